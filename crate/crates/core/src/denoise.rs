//! Corruption and the unrolled-denoising training objective.
//!
//! Step 0 denoises corrupted data `x₀ ~ q(·|x)`. Each later step denoises a
//! sample `x_{i+1}` drawn from the model's own output on `x_i`. Sampling is
//! a gradient barrier: the sampled ids enter the next forward pass as plain
//! inputs, so gradients reach the earlier logits only through their own
//! loss term. The objective is the mean of the per-step cross-entropies
//! against the clean sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Denoiser, ModelParams, SequenceBatch};
use crate::numerics::{cross_entropy, AdamConfig, AdamState, Graph, Scalar, Var};
use crate::sampler::sample_categorical;

/// Per-example corruption rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateDistribution {
    /// `t ~ Uniform(0, 1)` drawn independently per example.
    #[default]
    Uniform,
    Fixed(f64),
}

/// `q(·|x)`: each target-buffer slot is replaced, with probability equal to
/// the example's rate, by an id drawn uniformly from the full vocabulary.
/// Prefix positions are never touched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSpec {
    pub rate: RateDistribution,
}

impl CorruptionSpec {
    pub fn fixed(rate: f64) -> Self {
        Self { rate: RateDistribution::Fixed(rate) }
    }

    pub fn validate(&self) -> Result<()> {
        match self.rate {
            RateDistribution::Fixed(r) if !(0.0..=1.0).contains(&r) => {
                Err(Error::Config(format!("corruption rate {r} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Corruption plus unroll depth. Two steps is the default objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseConfig {
    pub corruption: CorruptionSpec,
    pub unroll_steps: usize,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            corruption: CorruptionSpec::default(),
            unroll_steps: 2,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        self.corruption.validate()?;
        if self.unroll_steps == 0 {
            return Err(Error::Config("unroll_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draws `x₀ ~ q(·|x)` for every row of `batch`.
pub fn corrupt(batch: &SequenceBatch, spec: &CorruptionSpec, vocab: usize, seed: u64) -> SequenceBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corrupt_with_rng(batch, spec, vocab, &mut rng)
}

pub(crate) fn corrupt_with_rng<R: Rng>(
    batch: &SequenceBatch,
    spec: &CorruptionSpec,
    vocab: usize,
    rng: &mut R,
) -> SequenceBatch {
    let mut out = batch.clone();
    for r in 0..batch.batch {
        let rate = match spec.rate {
            RateDistribution::Uniform => rng.random::<f64>(),
            RateDistribution::Fixed(t) => t,
        };
        for pos in batch.target_range(r) {
            if rng.random::<f64>() < rate {
                out.ids[pos] = rng.random_range(0..vocab as u32);
            }
        }
    }
    out
}

/// Per-step losses and token accuracies of one objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct UnrollLossReport {
    /// Cross-entropy against the clean sequence, one entry per unroll step.
    pub losses: Vec<f64>,
    /// Argmax accuracy on loss-masked positions, one entry per unroll step.
    pub token_accuracy: Vec<f64>,
    /// Mean of `losses`.
    pub total: f64,
    /// Row-major ids fed to the model at each step: `x₀`, then each sample.
    pub inputs: Vec<Vec<u32>>,
}

impl UnrollLossReport {
    pub fn loss_step0(&self) -> f64 {
        self.losses[0]
    }

    pub fn loss_step1(&self) -> f64 {
        self.losses.get(1).copied().unwrap_or(f64::NAN)
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.losses.iter().all(|l| l.is_finite())
    }
}

/// Records the unrolled objective on `graph` and returns its scalar node.
pub fn sundae_objective<T: Scalar, D: Denoiser<T> + ?Sized>(
    model: &D,
    graph: &mut Graph<T>,
    clean: &SequenceBatch,
    config: &DenoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, UnrollLossReport)> {
    config.validate()?;
    let vocab = model.vocab_size();
    let (b, s) = (clean.batch, clean.seq_len);
    let mut x = corrupt_with_rng(clean, &config.corruption, vocab, rng);
    let mut losses = Vec::with_capacity(config.unroll_steps);
    let mut loss_vars = Vec::with_capacity(config.unroll_steps);
    let mut token_accuracy = Vec::with_capacity(config.unroll_steps);
    let mut inputs = Vec::with_capacity(config.unroll_steps);

    for step in 0..config.unroll_steps {
        inputs.push(x.ids.clone());
        let logits = model.logits(graph, &x.ids, b, s)?;
        let loss = graph.cross_entropy(logits, &clean.ids, &clean.loss_mask)?;
        losses.push(graph.value(loss).item().as_f64());
        loss_vars.push(loss);
        let values = graph.value(logits).data();
        token_accuracy.push(masked_accuracy(values, vocab, &clean.ids, &clean.loss_mask));

        if step + 1 < config.unroll_steps {
            let mut next = x.clone();
            for r in 0..b {
                for pos in clean.target_range(r) {
                    let row = &values[pos * vocab..(pos + 1) * vocab];
                    next.ids[pos] = sample_categorical(row, 1.0, rng);
                }
            }
            x = next;
        }
    }

    let mut total = loss_vars[0];
    for &l in &loss_vars[1..] {
        total = graph.add(total, l)?;
    }
    let total = graph.scale(total, T::from_f64(1.0 / config.unroll_steps as f64));
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok((total, UnrollLossReport { losses, token_accuracy, total: mean, inputs }))
}

/// Evaluates the objective without updating anything.
pub fn sundae_loss<T: Scalar, D: Denoiser<T> + ?Sized>(
    model: &D,
    clean: &SequenceBatch,
    config: &DenoiseConfig,
    seed: u64,
) -> Result<UnrollLossReport> {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, report) = sundae_objective(model, &mut g, clean, config, &mut rng)?;
    Ok(report)
}

/// Mean cross-entropy against `clean` over the given step inputs. With the
/// inputs recorded by [`sundae_objective`] this reproduces its total loss as
/// a deterministic function of the parameters.
pub fn loss_on_inputs<T: Scalar, D: Denoiser<T> + ?Sized>(model: &D, clean: &SequenceBatch, inputs: &[Vec<u32>]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::Contract("no step inputs".into()));
    }
    let mut sum = 0.0;
    for ids in inputs {
        let logits = model.infer(ids, clean.batch, clean.seq_len)?;
        sum += cross_entropy(&logits, &clean.ids, &clean.loss_mask)?.loss.as_f64();
    }
    Ok(sum / inputs.len() as f64)
}

fn masked_accuracy<T: Scalar>(logits: &[T], vocab: usize, targets: &[u32], mask: &[u8]) -> f64 {
    let mut hit = 0usize;
    let mut n = 0usize;
    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m == 0 {
            continue;
        }
        n += 1;
        if argmax(&logits[r * vocab..(r + 1) * vocab]) == t {
            hit += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Parameters, optimizer moments, step counter and run seed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: ModelParams<f32>, optimizer: AdamConfig, seed: u64) -> Self {
        let shapes = params.shapes();
        let adam = AdamState::new(optimizer, shapes.iter().map(Vec::as_slice));
        Self { params, adam, step: 0, seed }
    }

    /// One objective evaluation, backward pass and Adam update.
    ///
    /// On a non-finite loss or gradient the state is left untouched and the
    /// error carries the offending step's losses.
    pub fn train_step(&mut self, clean: &SequenceBatch, config: &DenoiseConfig, seed: u64) -> Result<UnrollLossReport> {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (total, report) = sundae_objective(&self.params, &mut g, clean, config, &mut rng)?;
        let diagnostic = |what: &str| Error::NonFinite {
            op: format!("{what} at step {} (losses {:?}, token accuracy {:?})", self.step, report.losses, report.token_accuracy),
        };
        if !report.is_finite() || g.non_finite().is_some() {
            return Err(diagnostic("loss"));
        }
        let grads = g.backward(total)?.into_dense(&self.params.shapes());
        if grads.iter().any(|t| !t.all_finite()) {
            return Err(diagnostic("gradient"));
        }
        self.adam.step(self.params.tensors_mut(), &grads)?;
        self.step += 1;
        Ok(report)
    }
}

/// Functional form of [`TrainState::train_step`].
pub fn train_step(
    state: &TrainState,
    clean: &SequenceBatch,
    config: &DenoiseConfig,
    seed: u64,
) -> Result<(TrainState, UnrollLossReport)> {
    let mut next = state.clone();
    let report = next.train_step(clean, config, seed)?;
    Ok((next, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FnDenoiser, ModelConfig, SequenceRow};
    use crate::numerics::Tensor;
    use proptest::prelude::*;
    use rand::Rng;

    fn batch_of(rows: Vec<(Vec<u32>, Vec<u32>)>) -> SequenceBatch {
        let rows: Vec<SequenceRow> = rows.into_iter().map(|(p, t)| SequenceRow::new(p, t)).collect();
        SequenceBatch::from_rows(&rows, None).unwrap()
    }

    #[test]
    fn zero_rate_is_identity() {
        let b = batch_of(vec![(vec![5, 6], vec![7, 8, 9]), (vec![4, 4], vec![0, 0, 0])]);
        for seed in 0..20 {
            assert_eq!(corrupt(&b, &CorruptionSpec::fixed(0.0), 10, seed), b);
        }
    }

    #[test]
    fn full_rate_matches_binomial_expectation() {
        let rows: Vec<(Vec<u32>, Vec<u32>)> = (0..1000).map(|i| (vec![4], vec![(i % 250 + 5) as u32; 100])).collect();
        let b = batch_of(rows);
        let c = corrupt(&b, &CorruptionSpec::fixed(1.0), 260, 17);
        let n = 100_000f64;
        let same = (0..b.batch)
            .flat_map(|r| b.target_range(r))
            .filter(|&p| c.ids[p] == b.ids[p])
            .count() as f64;
        let p = 1.0 / 260.0;
        let se = (p * (1.0 - p) / n).sqrt();
        assert!((same / n - p).abs() < 3.0 * se, "fraction {} vs {p}", same / n);
    }

    #[test]
    fn corruption_is_deterministic_in_seed() {
        let b = batch_of(vec![(vec![5, 6], vec![7, 8, 9, 9, 9, 9])]);
        let spec = CorruptionSpec::default();
        assert_eq!(corrupt(&b, &spec, 50, 3), corrupt(&b, &spec, 50, 3));
    }

    proptest! {
        #[test]
        fn corruption_never_touches_prefix_or_tail(
            seed in any::<u64>(),
            rate in 0.0f64..=1.0,
            prefix in prop::collection::vec(4u32..30, 0..6),
            target in prop::collection::vec(0u32..30, 1..6),
        ) {
            let other = SequenceRow::new(vec![4; 7], target.clone());
            let rows = vec![SequenceRow::new(prefix.clone(), target.clone()), other];
            let b = SequenceBatch::from_rows(&rows, None).unwrap();
            for spec in [CorruptionSpec::fixed(rate), CorruptionSpec::default()] {
                let c = corrupt(&b, &spec, 30, seed);
                prop_assert_eq!(&c.loss_mask, &b.loss_mask);
                prop_assert_eq!(&c.prefix_len, &b.prefix_len);
                for p in 0..b.ids.len() {
                    if !b.is_target_position(p) {
                        prop_assert_eq!(c.ids[p], b.ids[p]);
                    }
                }
                c.validate().unwrap();
            }
        }
    }

    #[test]
    fn uniform_logits_give_ln_v_per_step() {
        let cfg = ModelConfig { layers: 1, hidden: 8, heads: 2, ffn: 16, vocab: 13, max_seq: 16, ..Default::default() };
        let mut p = ModelParams::<f32>::init(&cfg, 0).unwrap();
        p.get_mut("tok_emb").unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
        let b = batch_of(vec![(vec![5, 6, 7], vec![8, 9, 0, 0]), (vec![4], vec![10, 11, 12, 0])]);
        let r = sundae_loss(&p, &b, &DenoiseConfig::default(), 1).unwrap();
        let ln_v = 13f64.ln();
        assert!((r.loss_step0() - ln_v).abs() < 1e-6);
        assert!((r.loss_step1() - ln_v).abs() < 1e-6);
        assert!((r.total - (r.loss_step0() + r.loss_step1()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_denoiser_has_near_zero_loss() {
        let clean = batch_of(vec![(vec![5, 6], vec![7, 8, 0]), (vec![9, 9], vec![4, 0, 0])]);
        let target = clean.ids.clone();
        let model = FnDenoiser::new(10, move |row: usize, _ids: &[u32]| {
            let s = 5;
            (0..s)
                .flat_map(|i| {
                    let t = target[row * s + i] as usize;
                    (0..10).map(move |v| if v == t { 30.0 } else { 0.0 })
                })
                .collect()
        });
        let r = sundae_loss::<f64, _>(&model, &clean, &DenoiseConfig::default(), 5).unwrap();
        assert!(r.total <= 1e-3, "{r:?}");
        assert_eq!(r.token_accuracy, vec![1.0, 1.0]);
    }

    /// Logits that depend on the current input ids: position-wise table of
    /// shape `[V_in × V]` shared across target positions.
    fn table_model() -> FnDenoiser<impl Fn(usize, &[u32]) -> Vec<f64>> {
        let table = [[1.2, -0.3, 0.4], [0.1, 0.9, -1.0], [-0.5, 0.2, 1.5]];
        FnDenoiser::new(3, move |_row, ids: &[u32]| {
            ids.iter().enumerate().flat_map(|(i, &id)| {
                let next = ids[(i + 1) % ids.len()] as usize;
                (0..3).map(move |v| table[id as usize][v] + 0.25 * table[next][v])
            }).collect()
        })
    }

    fn ce(logits: &[f64], target: u32) -> f64 {
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        z.ln() - logits[target as usize]
    }

    #[test]
    fn sampling_step_matches_seed_replay_enumeration() {
        let model = table_model();
        let clean = batch_of(vec![(vec![2], vec![0, 1])]);
        let config = DenoiseConfig { corruption: CorruptionSpec::fixed(0.5), unroll_steps: 2 };
        for seed in 0..25u64 {
            let r = sundae_loss::<f64, _>(&model, &clean, &config, seed).unwrap();

            // Replay the random stream: corruption draws, then one uniform per sampled slot.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x0 = vec![2u32, 0, 1];
            for slot in 1..3 {
                if rng.random::<f64>() < 0.5 {
                    x0[slot] = rng.random_range(0..3u32);
                }
            }
            let logits0 = (model.f)(0, &x0);
            let loss0 = (ce(&logits0[3..6], 0) + ce(&logits0[6..9], 1)) / 2.0;
            assert!((r.loss_step0() - loss0).abs() < 1e-12);

            // Enumerate all 9 possible x1 and their step-1 losses.
            let probs: Vec<Vec<f64>> = (1..3)
                .map(|slot| {
                    let row = &logits0[slot * 3..slot * 3 + 3];
                    let z: f64 = row.iter().map(|v| v.exp()).sum();
                    row.iter().map(|v| v.exp() / z).collect()
                })
                .collect();
            let mut outcomes = Vec::new();
            for a in 0..3u32 {
                for b in 0..3u32 {
                    let x1 = vec![2, a, b];
                    let l = (model.f)(0, &x1);
                    outcomes.push(((a, b), (ce(&l[3..6], 0) + ce(&l[6..9], 1)) / 2.0));
                }
            }
            let pick = |p: &[f64], u: f64| {
                let mut acc = 0.0;
                for (i, &pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        return i as u32;
                    }
                }
                p.len() as u32 - 1
            };
            let a = pick(&probs[0], rng.random::<f64>());
            let b = pick(&probs[1], rng.random::<f64>());
            let want = outcomes.iter().find(|(k, _)| *k == (a, b)).unwrap().1;
            assert!((r.loss_step1() - want).abs() < 1e-12, "seed {seed}");
            assert!((r.total - (loss0 + want) / 2.0).abs() < 1e-12);
        }
    }

    /// Two scalar parameters: `logits = w0 · onehot(input) + w1 · onehot(position mod 3)`.
    struct TwoParam {
        w: [f64; 2],
    }

    impl Denoiser<f64> for TwoParam {
        fn vocab_size(&self) -> usize {
            3
        }

        fn logits(&self, g: &mut Graph<f64>, ids: &[u32], _b: usize, _s: usize) -> Result<Var> {
            let n = ids.len();
            let mut onehot = vec![0.0; n * 3];
            let mut cycle = vec![0.0; n * 3];
            for (i, &id) in ids.iter().enumerate() {
                onehot[i * 3 + id as usize] = 1.0;
                cycle[i * 3 + i % 3] = 1.0;
            }
            let w0 = g.param(0, &Tensor::new([1, 1], vec![self.w[0]]).unwrap());
            let w1 = g.param(1, &Tensor::new([1, 1], vec![self.w[1]]).unwrap());
            let oh = g.constant(Tensor::new([n * 3, 1], onehot).unwrap());
            let cy = g.constant(Tensor::new([n * 3, 1], cycle).unwrap());
            let a = g.matmul(oh, w0)?;
            let b = g.matmul(cy, w1)?;
            let s = g.add(a, b)?;
            g.reshape(s, [n, 3])
        }
    }

    #[test]
    fn sampling_is_a_gradient_barrier() {
        let clean = batch_of(vec![(vec![2], vec![0, 1, 2, 1]), (vec![1], vec![2, 2, 0, 1])]);
        let config = DenoiseConfig { corruption: CorruptionSpec::fixed(0.6), unroll_steps: 2 };
        let objective = |w: [f64; 2], seed: u64| {
            let mut g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (total, _) = sundae_objective(&TwoParam { w }, &mut g, &clean, &config, &mut rng).unwrap();
            (g.value(total).item(), g.backward(total).unwrap())
        };
        let h = 1e-6;
        for seed in 0..10 {
            let w = [0.7, -0.4];
            let (_, grads) = objective(w, seed);
            for k in 0..2 {
                let (mut up, mut down) = (w, w);
                up[k] += h;
                down[k] -= h;
                let fd = (objective(up, seed).0 - objective(down, seed).0) / (2.0 * h);
                let an = grads.get(k).unwrap().data()[0];
                assert!((fd - an).abs() < 1e-6 * fd.abs().max(1.0), "seed {seed} w{k}: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn train_step_is_deterministic_and_counts_steps() {
        let cfg = ModelConfig { layers: 1, hidden: 8, heads: 2, ffn: 16, vocab: 12, max_seq: 10, ..Default::default() };
        let params = ModelParams::init(&cfg, 4).unwrap();
        let state = TrainState::new(params, AdamConfig { lr: 1e-2, ..Default::default() }, 9);
        let b = batch_of(vec![(vec![4, 5], vec![6, 7, 0]), (vec![8], vec![9, 10, 11])]);
        let config = DenoiseConfig::default();
        let (a, ra) = train_step(&state, &b, &config, 77).unwrap();
        let (c, rc) = train_step(&state, &b, &config, 77).unwrap();
        assert_eq!(a, c);
        assert_eq!(ra, rc);
        assert_eq!(a.step, 1);
        assert_eq!(a.adam.t, 1);
        assert_ne!(a.params, state.params);
    }

    #[test]
    fn non_finite_parameters_abort_without_update() {
        let cfg = ModelConfig { layers: 1, hidden: 8, heads: 2, ffn: 16, vocab: 12, max_seq: 10, ..Default::default() };
        let mut params = ModelParams::init(&cfg, 4).unwrap();
        params.get_mut("layers.0.ffn.w1").unwrap().data_mut()[0] = f32::NAN;
        let mut state = TrainState::new(params, AdamConfig::default(), 0);
        let before = state.clone();
        let b = batch_of(vec![(vec![4, 5], vec![6, 7, 0])]);
        let err = state.train_step(&b, &DenoiseConfig::default(), 1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
        let bits = |s: &TrainState| -> Vec<u32> {
            s.params.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&state), bits(&before));
        assert_eq!((state.step, state.adam.t), (before.step, before.adam.t));
        assert_eq!(state.adam.m, before.adam.m);
    }
}
