//! Parallel unrolled decoding and the sequential autoregressive baseline.
//!
//! Unrolled decoding starts from `[prefix ‖ MASK × target_len]` and applies
//! the bidirectional denoiser `steps` times, rewriting every target slot on
//! each pass. The number of forward passes is therefore the number of
//! steps, independent of the output length. The autoregressive baseline
//! spends one forward pass per emitted token.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoise::argmax;
use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::numerics::Scalar;
use crate::tokenizer::{Vocab, MASK, PAD};

/// Default number of unroll steps at generation time.
pub const DEFAULT_UNROLL_STEPS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Argmax,
    Sample { temperature: f64 },
}

impl Default for DecodeMode {
    fn default() -> Self {
        DecodeMode::Argmax
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnrollConfig {
    pub steps: usize,
    pub mode: DecodeMode,
    /// Halt once a step leaves the buffer unchanged.
    pub early_stop: bool,
}

impl Default for UnrollConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_UNROLL_STEPS,
            mode: DecodeMode::Argmax,
            early_stop: false,
        }
    }
}

/// Record of one decode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub prefix: Vec<u32>,
    /// Output buffer before the first pass followed by the buffer after each pass.
    pub snapshots: Vec<Vec<u32>>,
    pub forward_pass_count: usize,
    /// First step `t` whose successor left the buffer unchanged.
    pub converged_at_step: Option<usize>,
    /// Final buffer with PAD and MASK removed, when a vocabulary was supplied.
    pub text: String,
    pub wall_ms: f64,
}

impl DecodeTrace {
    pub fn output(&self) -> &[u32] {
        self.snapshots.last().map_or(&[], Vec::as_slice)
    }

    pub fn attach_text(&mut self, vocab: &Vocab) -> Result<()> {
        self.text = strip_special(self.output(), vocab)?;
        Ok(())
    }
}

/// Drops PAD and MASK, then decodes the remaining ids in order.
pub fn strip_special(ids: &[u32], vocab: &Vocab) -> Result<String> {
    let kept: Vec<u32> = ids.iter().copied().filter(|&i| i != PAD && i != MASK).collect();
    vocab.decode(&kept)
}

/// Draws an index from `softmax(row / temperature)` by inverse CDF with one uniform draw.
pub fn sample_categorical<T: Scalar, R: Rng + ?Sized>(row: &[T], temperature: f64, rng: &mut R) -> u32 {
    let probs = categorical_probs(row, temperature);
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    probs.len() as u32 - 1
}

/// `softmax(row / temperature)` evaluated in f64.
pub fn categorical_probs<T: Scalar>(row: &[T], temperature: f64) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = row.iter().map(|v| ((v.as_f64() - max) / temperature).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

fn logits_for<T: Scalar, D: Denoiser<T> + ?Sized>(model: &D, ids: &[u32], batch: usize, seq: usize) -> Result<Vec<T>> {
    let out = model.infer(ids, batch, seq)?.into_data();
    if out.iter().any(|v| !v.as_f64().is_finite()) {
        return Err(Error::NonFinite { op: "logits".into() });
    }
    Ok(out)
}

fn check_unroll(config: &UnrollConfig, target_len: usize) -> Result<()> {
    if config.steps == 0 {
        return Err(Error::Config("unroll steps must be at least 1".into()));
    }
    if target_len == 0 {
        return Err(Error::Config("target length must be at least 1".into()));
    }
    if let DecodeMode::Sample { temperature } = config.mode {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
    }
    Ok(())
}

/// Unrolled decoding of a single prefix.
pub fn unroll_decode<T, D, R>(model: &D, prefix: &[u32], target_len: usize, config: &UnrollConfig, rng: &mut R) -> Result<DecodeTrace>
where
    T: Scalar,
    D: Denoiser<T> + ?Sized,
    R: Rng + ?Sized,
{
    let mut traces = unroll_decode_batch(model, &[prefix.to_vec()], target_len, config, rng)?;
    Ok(traces.remove(0))
}

/// Unrolled decoding of many prefixes. Rows with equal prefix length share
/// forward passes; each row halts independently under early stopping. The
/// result is identical to decoding the rows one at a time in order of
/// prefix length, then input order.
pub fn unroll_decode_batch<T, D, R>(
    model: &D,
    prefixes: &[Vec<u32>],
    target_len: usize,
    config: &UnrollConfig,
    rng: &mut R,
) -> Result<Vec<DecodeTrace>>
where
    T: Scalar,
    D: Denoiser<T> + ?Sized,
    R: Rng + ?Sized,
{
    check_unroll(config, target_len)?;
    let vocab = model.vocab_size();
    if MASK as usize >= vocab {
        return Err(Error::Config(format!("vocabulary of size {vocab} has no MASK id")));
    }
    for p in prefixes {
        if let Some(max) = model.max_seq() {
            if p.len() + target_len > max {
                return Err(Error::Contract(format!(
                    "prefix of {} plus target of {target_len} exceeds the model maximum {max}",
                    p.len()
                )));
            }
        }
        if let Some(&bad) = p.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::TokenOutOfRange { id: bad, size: vocab });
        }
    }

    let mut order: Vec<usize> = (0..prefixes.len()).collect();
    order.sort_by_key(|&i| prefixes[i].len());
    let mut out: Vec<Option<DecodeTrace>> = vec![None; prefixes.len()];
    let mut start = 0;
    while start < order.len() {
        let plen = prefixes[order[start]].len();
        let end = start + order[start..].iter().take_while(|&&i| prefixes[i].len() == plen).count();
        let group = &order[start..end];
        let traces = decode_group(model, prefixes, group, target_len, config, rng)?;
        for (&i, t) in group.iter().zip(traces) {
            out[i] = Some(t);
        }
        start = end;
    }
    Ok(out.into_iter().map(|t| t.expect("every row decoded")).collect())
}

fn decode_group<T, D, R>(
    model: &D,
    prefixes: &[Vec<u32>],
    group: &[usize],
    target_len: usize,
    config: &UnrollConfig,
    rng: &mut R,
) -> Result<Vec<DecodeTrace>>
where
    T: Scalar,
    D: Denoiser<T> + ?Sized,
    R: Rng + ?Sized,
{
    let vocab = model.vocab_size();
    let plen = prefixes[group[0]].len();
    let seq = plen + target_len;
    let started = Instant::now();
    let mut traces: Vec<DecodeTrace> = group
        .iter()
        .map(|&i| DecodeTrace {
            prefix: prefixes[i].clone(),
            snapshots: vec![vec![MASK; target_len]],
            forward_pass_count: 0,
            converged_at_step: None,
            text: String::new(),
            wall_ms: 0.0,
        })
        .collect();
    let mut active: Vec<usize> = (0..group.len()).collect();

    for step in 1..=config.steps {
        if active.is_empty() {
            break;
        }
        let mut ids = Vec::with_capacity(active.len() * seq);
        for &a in &active {
            ids.extend_from_slice(&traces[a].prefix);
            ids.extend_from_slice(traces[a].output());
        }
        let logits = logits_for(model, &ids, active.len(), seq)?;
        let mut still = Vec::with_capacity(active.len());
        for (r, &a) in active.iter().enumerate() {
            let mut next = Vec::with_capacity(target_len);
            for j in 0..target_len {
                let pos = r * seq + plen + j;
                let row = &logits[pos * vocab..(pos + 1) * vocab];
                next.push(match config.mode {
                    DecodeMode::Argmax => argmax(row),
                    DecodeMode::Sample { temperature } => sample_categorical(row, temperature, rng),
                });
            }
            let trace = &mut traces[a];
            trace.forward_pass_count += 1;
            let unchanged = next == *trace.output();
            if unchanged && trace.converged_at_step.is_none() {
                trace.converged_at_step = Some(step - 1);
            }
            trace.snapshots.push(next);
            if !(unchanged && config.early_stop) {
                still.push(a);
            }
        }
        active = still;
    }

    let per_row = started.elapsed().as_secs_f64() * 1e3 / group.len() as f64;
    for t in &mut traces {
        t.wall_ms = per_row;
    }
    Ok(traces)
}

/// Greedy left-to-right decoding with a causal model: one forward pass per
/// emitted token. Stops after `max_len` tokens, or after emitting PAD when
/// `halt_on_pad` is set. The emitted buffer starts as `MASK × max_len`.
pub fn ar_decode<T, D>(model: &D, prefix: &[u32], max_len: usize, halt_on_pad: bool) -> Result<DecodeTrace>
where
    T: Scalar,
    D: Denoiser<T> + ?Sized,
{
    if prefix.is_empty() {
        return Err(Error::Contract("autoregressive decoding needs a nonempty prefix".into()));
    }
    if let Some(max) = model.max_seq() {
        if prefix.len() + max_len > max + 1 {
            return Err(Error::Contract(format!(
                "prefix of {} plus {max_len} generated tokens exceeds the model maximum {max}",
                prefix.len()
            )));
        }
    }
    let vocab = model.vocab_size();
    let started = Instant::now();
    let mut seq = prefix.to_vec();
    let mut buffer = vec![MASK; max_len];
    let mut snapshots = vec![buffer.clone()];
    let mut passes = 0;
    for i in 0..max_len {
        let logits = logits_for(model, &seq, 1, seq.len())?;
        passes += 1;
        let last = seq.len() - 1;
        let next = argmax(&logits[last * vocab..(last + 1) * vocab]);
        buffer[i] = next;
        snapshots.push(buffer.clone());
        if next == PAD && halt_on_pad {
            break;
        }
        seq.push(next);
    }
    Ok(DecodeTrace {
        prefix: prefix.to_vec(),
        snapshots,
        forward_pass_count: passes,
        converged_at_step: None,
        text: String::new(),
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionMode, FnDenoiser, ModelConfig, ModelParams};
    use crate::tokenizer::TokenizerMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const A: u32 = 4;

    fn constant_a(vocab: usize) -> FnDenoiser<impl Fn(usize, &[u32]) -> Vec<f64>> {
        FnDenoiser::new(vocab, move |_, ids: &[u32]| {
            ids.iter().flat_map(|_| (0..vocab).map(|v| if v == A as usize { 5.0 } else { 0.0 })).collect()
        })
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn constant_denoiser_reaches_fixed_point_after_one_step() {
        let m = constant_a(8);
        let cfg = UnrollConfig { steps: 10, mode: DecodeMode::Argmax, early_stop: false };
        let t = unroll_decode::<f64, _, _>(&m, &[5, 6], 4, &cfg, &mut rng()).unwrap();
        assert_eq!(t.forward_pass_count, 10);
        assert_eq!(t.snapshots.len(), 11);
        assert_eq!(t.snapshots[0], vec![MASK; 4]);
        assert!(t.snapshots[1..].iter().all(|s| s == &vec![A; 4]));
        assert_eq!(t.converged_at_step, Some(1));

        let early = UnrollConfig { early_stop: true, ..cfg };
        let t = unroll_decode::<f64, _, _>(&m, &[5, 6], 4, &early, &mut rng()).unwrap();
        assert_eq!(t.forward_pass_count, 2);
        assert_eq!(t.converged_at_step, Some(1));
    }

    #[test]
    fn ten_step_default_runs_ten_passes() {
        let cfg = ModelConfig { layers: 1, hidden: 8, heads: 2, ffn: 16, vocab: 9, max_seq: 20, ..Default::default() };
        let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let t = unroll_decode(&p, &[4, 5, 6], 12, &UnrollConfig::default(), &mut rng()).unwrap();
        assert_eq!(UnrollConfig::default().steps, 10);
        assert_eq!(t.forward_pass_count, 10);
    }

    #[test]
    fn argmax_trace_matches_step_replay() {
        let cfg = ModelConfig { layers: 1, hidden: 8, heads: 2, ffn: 16, vocab: 4, max_seq: 8, ..Default::default() };
        let p = ModelParams::<f64>::init_with_std(&cfg, 11, 1.0).unwrap();
        let prefix = [3u32, 2];
        let config = UnrollConfig { steps: 5, mode: DecodeMode::Argmax, early_stop: false };
        let trace = unroll_decode(&p, &prefix, 3, &config, &mut rng()).unwrap();

        let mut buf = vec![MASK; 3];
        let mut replay = vec![buf.clone()];
        for _ in 0..5 {
            let ids: Vec<u32> = prefix.iter().chain(&buf).copied().collect();
            let batch = crate::model::SequenceBatch::from_rows(
                &[crate::model::SequenceRow::new(prefix.to_vec(), buf.clone())],
                None,
            )
            .unwrap();
            assert_eq!(batch.ids, ids);
            let logits = crate::model::forward(&p, &batch, AttentionMode::Bidirectional).unwrap();
            buf = (0..3)
                .map(|j| {
                    let row = &logits.data()[(2 + j) * 4..(3 + j) * 4];
                    let mut best = 0;
                    for v in 1..4 {
                        if row[v] > row[best] {
                            best = v;
                        }
                    }
                    best as u32
                })
                .collect();
            replay.push(buf.clone());
        }
        assert_eq!(trace.snapshots, replay);
        for w in trace.snapshots.windows(2).skip(1) {
            if w[0] == w[1] {
                let at = trace.snapshots.iter().position(|s| s == &w[0]).unwrap();
                assert!(trace.snapshots[at..].iter().all(|s| s == &w[0]));
            }
        }
    }

    #[test]
    fn batch_decode_matches_individual_decodes() {
        let cfg = ModelConfig { layers: 1, hidden: 8, heads: 2, ffn: 16, vocab: 9, max_seq: 20, ..Default::default() };
        let p = ModelParams::<f32>::init_with_std(&cfg, 2, 0.5).unwrap();
        let prefixes = vec![vec![4, 5], vec![6], vec![7, 8], vec![5, 5, 5]];
        let config = UnrollConfig { steps: 4, mode: DecodeMode::Argmax, early_stop: true };
        let batch = unroll_decode_batch(&p, &prefixes, 5, &config, &mut rng()).unwrap();
        for (pre, t) in prefixes.iter().zip(&batch) {
            let single = unroll_decode(&p, pre, 5, &config, &mut rng()).unwrap();
            assert_eq!(single.snapshots, t.snapshots);
            assert_eq!(&t.prefix, pre);
        }
    }

    #[test]
    fn decode_errors() {
        let cfg = ModelConfig { layers: 1, hidden: 8, heads: 2, ffn: 16, vocab: 9, max_seq: 6, ..Default::default() };
        let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let c = UnrollConfig::default();
        assert!(matches!(unroll_decode(&p, &[4, 4, 4], 4, &c, &mut rng()), Err(Error::Contract(_))));
        assert!(unroll_decode(&p, &[4], 0, &c, &mut rng()).is_err());
        assert!(unroll_decode(&p, &[4], 2, &UnrollConfig { steps: 0, ..c }, &mut rng()).is_err());
        let hot = UnrollConfig { mode: DecodeMode::Sample { temperature: 0.0 }, ..c };
        assert!(unroll_decode(&p, &[4], 2, &hot, &mut rng()).is_err());
    }

    #[test]
    fn ar_decode_halts_on_pad() {
        let pad_first = FnDenoiser::new(6, |_, ids: &[u32]| ids.iter().flat_map(|_| [3.0, 0.0, 0.0, 0.0, 0.0, 0.0]).collect());
        let t = ar_decode::<f64, _>(&pad_first, &[4, 5], 8, true).unwrap();
        assert_eq!(t.forward_pass_count, 1);
        let v = Vocab::build(["x y"], 10, TokenizerMode::Word).unwrap();
        assert_eq!(strip_special(t.output(), &v).unwrap(), "");
    }

    #[test]
    fn ar_decode_spends_one_pass_per_token() {
        let cfg = ModelConfig { layers: 1, hidden: 8, heads: 2, ffn: 16, vocab: 9, max_seq: 80, attention: AttentionMode::Causal };
        let p = ModelParams::<f32>::init(&cfg, 3).unwrap();
        let t = ar_decode(&p, &[4, 5], 64, false).unwrap();
        assert_eq!(t.forward_pass_count, 64);
        assert!(t.output().iter().all(|&i| i != MASK));
    }

    #[test]
    fn ar_greedy_trace_matches_replay() {
        let cfg = ModelConfig { layers: 2, hidden: 8, heads: 2, ffn: 16, vocab: 7, max_seq: 20, attention: AttentionMode::Causal };
        let p = ModelParams::<f64>::init_with_std(&cfg, 5, 0.8).unwrap();
        let t = ar_decode(&p, &[4, 5, 6], 6, true).unwrap();
        let mut seq = vec![4u32, 5, 6];
        let mut emitted = Vec::new();
        for _ in 0..6 {
            let rows = [crate::model::SequenceRow::new(seq.clone(), vec![])];
            let b = crate::model::SequenceBatch::from_rows(&rows, None).unwrap();
            let l = crate::model::forward(&p, &b, AttentionMode::Causal).unwrap();
            let last = &l.data()[(seq.len() - 1) * 7..seq.len() * 7];
            let next = argmax(last);
            emitted.push(next);
            if next == PAD {
                break;
            }
            seq.push(next);
        }
        assert_eq!(t.forward_pass_count, emitted.len());
        assert_eq!(&t.output()[..emitted.len()], emitted.as_slice());
    }

    #[test]
    fn strip_special_cases() {
        let v = Vocab::build(["hello world"], 10, TokenizerMode::Word).unwrap();
        let h = v.id("hello").unwrap();
        let w = v.id("world").unwrap();
        assert_eq!(strip_special(&[PAD, PAD, PAD], &v).unwrap(), "");
        assert_eq!(strip_special(&[h, w], &v).unwrap(), "hello world");
        assert_eq!(strip_special(&[w, PAD, h, MASK], &v).unwrap(), "world hello");
    }

    #[test]
    fn sampling_follows_probabilities() {
        let row = [0.0f64, (3.0f64).ln()];
        let mut r = rng();
        let ones = (0..20_000).filter(|_| sample_categorical(&row, 1.0, &mut r) == 1).count();
        assert!((ones as f64 / 20_000.0 - 0.75).abs() < 0.015);
        let cold = categorical_probs(&row, 0.01);
        assert!(cold[1] > 0.999);
    }
}
