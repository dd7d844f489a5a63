//! Exact distribution of the unrolled sampling chain on tiny instances.
//!
//! States are target buffers of length `n` over a vocabulary of size `V`,
//! indexed lexicographically with the first position most significant, so
//! index `i` of a [`SequenceDistribution`] corresponds to the base-`V`
//! digits of `i`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Denoiser, ModelConfig, ModelParams};
use crate::numerics::Scalar;
use crate::sampler::{categorical_probs, unroll_decode_batch, DecodeMode, UnrollConfig};
use crate::tokenizer::MASK;

/// Largest state space the oracle will enumerate.
pub const ORACLE_CAP: u128 = 1_000_000;

/// Agreement threshold between exact and sampled distributions.
pub const TV_THRESHOLD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDistribution {
    vocab: usize,
    len: usize,
    probs: Vec<f64>,
}

fn state_count(vocab: usize, len: usize) -> Result<usize> {
    let states = (vocab as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
    if states > ORACLE_CAP {
        return Err(Error::OracleCap { states, cap: ORACLE_CAP as usize });
    }
    Ok(states as usize)
}

impl SequenceDistribution {
    pub fn point_mass(vocab: usize, seq: &[u32]) -> Result<Self> {
        let n = state_count(vocab, seq.len())?;
        let mut probs = vec![0.0; n];
        let d = Self { vocab, len: seq.len(), probs: Vec::new() };
        probs[d.index_of(seq)?] = 1.0;
        Ok(Self { probs, ..d })
    }

    /// Product of independent per-position categoricals given as `len × vocab` rows.
    pub fn product(vocab: usize, marginals: &[f64]) -> Result<Self> {
        if vocab == 0 || marginals.len() % vocab != 0 {
            return Err(Error::shape("product", format!("{} entries for vocabulary {vocab}", marginals.len())));
        }
        let len = marginals.len() / vocab;
        let n = state_count(vocab, len)?;
        let mut probs = vec![0.0; n];
        accumulate_product(&mut probs, vocab, marginals, 1.0);
        Ok(Self { vocab, len, probs })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, seq: &[u32]) -> Result<f64> {
        Ok(self.probs[self.index_of(seq)?])
    }

    pub fn index_of(&self, seq: &[u32]) -> Result<usize> {
        if seq.len() != self.len {
            return Err(Error::shape("index_of", format!("sequence of {} for length {}", seq.len(), self.len)));
        }
        seq.iter().try_fold(0usize, |acc, &t| {
            if t as usize >= self.vocab {
                Err(Error::TokenOutOfRange { id: t, size: self.vocab })
            } else {
                Ok(acc * self.vocab + t as usize)
            }
        })
    }

    pub fn sequence_at(&self, mut index: usize) -> Vec<u32> {
        let mut seq = vec![0u32; self.len];
        for slot in seq.iter_mut().rev() {
            *slot = (index % self.vocab) as u32;
            index /= self.vocab;
        }
        seq
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.iter().any(|&p| !(p >= 0.0)) || (self.total() - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("not a distribution: total {}", self.total())));
        }
        Ok(())
    }
}

/// Adds `weight × Π_j marginals[j][s_j]` to every state `s`.
fn accumulate_product(out: &mut [f64], vocab: usize, marginals: &[f64], weight: f64) {
    let len = marginals.len() / vocab;
    // Expand position by position; `partial` holds the joint over the first j positions.
    let mut partial = vec![weight];
    for j in 0..len {
        let row = &marginals[j * vocab..(j + 1) * vocab];
        let mut next = Vec::with_capacity(partial.len() * vocab);
        for &p in &partial {
            next.extend(row.iter().map(|&q| p * q));
        }
        partial = next;
    }
    for (o, p) in out.iter_mut().zip(partial) {
        *o += p;
    }
}

/// Exact distribution after `steps` transitions from the all-MASK buffer.
/// `transition(state)` returns the `n × vocab` per-position categoricals
/// for the next state. Each visited state is queried once.
pub fn exact_unroll_distribution<F>(mut transition: F, vocab: usize, len: usize, steps: usize) -> Result<SequenceDistribution>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    if vocab <= MASK as usize {
        return Err(Error::Config(format!("vocabulary of size {vocab} has no MASK id")));
    }
    let mut dist = SequenceDistribution::point_mass(vocab, &vec![MASK; len])?;
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; dist.probs.len()];
    for _ in 0..steps {
        let mut next = vec![0.0; dist.probs.len()];
        for (s, &p) in dist.probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            if cache[s].is_none() {
                let marginals = transition(&dist.sequence_at(s))?;
                if marginals.len() != len * vocab {
                    return Err(Error::shape(
                        "exact_unroll_distribution",
                        format!("transition returned {} entries, expected {}", marginals.len(), len * vocab),
                    ));
                }
                cache[s] = Some(marginals);
            }
            accumulate_product(&mut next, vocab, cache[s].as_deref().expect("filled above"), p);
        }
        dist.probs = next;
    }
    Ok(dist)
}

/// Greedy trajectory of the chain: the all-MASK buffer, then the
/// per-position argmax of each successive transition.
pub fn argmax_skeleton<F>(mut transition: F, vocab: usize, len: usize, steps: usize) -> Result<Vec<Vec<u32>>>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    let mut path = vec![vec![MASK; len]];
    for _ in 0..steps {
        let m = transition(path.last().expect("nonempty"))?;
        path.push(m.chunks(vocab).map(crate::denoise::argmax).collect());
    }
    Ok(path)
}

/// Transition function of a denoiser conditioned on a fixed prefix,
/// at sampling temperature 1.
pub fn model_transition<'a, T, D>(model: &'a D, prefix: &'a [u32]) -> impl FnMut(&[u32]) -> Result<Vec<f64>> + 'a
where
    T: Scalar,
    D: Denoiser<T> + ?Sized,
{
    move |state: &[u32]| {
        let ids: Vec<u32> = prefix.iter().chain(state).copied().collect();
        let out = model.infer(&ids, 1, ids.len())?;
        let logits = out.data();
        let v = model.vocab_size();
        Ok((prefix.len()..ids.len())
            .flat_map(|p| categorical_probs(&logits[p * v..(p + 1) * v], 1.0))
            .collect())
    }
}

/// `½ Σ |p_i − counts_i / N|`.
pub fn tv_distance(p: &SequenceDistribution, counts: &[u64]) -> Result<f64> {
    if counts.len() != p.probs.len() {
        return Err(Error::shape("tv_distance", format!("{} counts for {} states", counts.len(), p.probs.len())));
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Contract("empirical distribution has no samples".into()));
    }
    let n = total as f64;
    Ok(0.5 * p.probs.iter().zip(counts).map(|(&a, &c)| (a - c as f64 / n).abs()).sum::<f64>())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub vocab: usize,
    pub target_len: usize,
    pub steps: usize,
    pub samples: usize,
    pub tv: f64,
    pub threshold: f64,
    pub passed: bool,
    pub argmax_consistent: bool,
}

/// Frozen random model used by the oracle check: one layer, width 16, with
/// weights drawn at unit scale so the per-position categoricals are far from
/// uniform.
pub fn frozen_tiny_model(vocab: usize, max_seq: usize, seed: u64) -> Result<ModelParams<f64>> {
    let cfg = ModelConfig { layers: 1, hidden: 16, heads: 2, ffn: 32, vocab, max_seq, ..Default::default() };
    ModelParams::init_with_std(&cfg, seed, 1.0)
}

/// Prefix shared by the oracle check: ids cycle through the vocabulary.
pub fn check_prefix(vocab: usize) -> Vec<u32> {
    (0..3).map(|i| (i + 2) as u32 % vocab as u32).collect()
}

/// Compares the exact chain with `samples` sampled decodes of `model`.
/// With zero steps every decode is the all-MASK buffer.
pub fn oracle_check<T, D>(model: &D, prefix: &[u32], len: usize, steps: usize, samples: usize, seed: u64) -> Result<OracleReport>
where
    T: Scalar,
    D: Denoiser<T> + ?Sized,
{
    let vocab = model.vocab_size();
    let exact = exact_unroll_distribution(model_transition(model, prefix), vocab, len, steps)?;
    let mut counts = vec![0u64; exact.probs.len()];
    let mut argmax_consistent = true;
    if steps == 0 {
        counts[exact.index_of(&vec![MASK; len])?] = samples as u64;
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = UnrollConfig { steps, mode: DecodeMode::Sample { temperature: 1.0 }, early_stop: false };
        const CHUNK: usize = 2000;
        let mut done = 0;
        while done < samples {
            let k = CHUNK.min(samples - done);
            let prefixes = vec![prefix.to_vec(); k];
            for t in unroll_decode_batch(model, &prefixes, len, &sample, &mut rng)? {
                counts[exact.index_of(t.output())?] += 1;
            }
            done += k;
        }
        let greedy = UnrollConfig { steps, mode: DecodeMode::Argmax, early_stop: false };
        let trace = unroll_decode_batch(model, &[prefix.to_vec()], len, &greedy, &mut rng)?.remove(0);
        let skeleton = argmax_skeleton(model_transition(model, prefix), vocab, len, steps)?;
        argmax_consistent = trace.snapshots == skeleton;
    }
    let tv = tv_distance(&exact, &counts)?;
    Ok(OracleReport {
        vocab,
        target_len: len,
        steps,
        samples,
        tv,
        threshold: TV_THRESHOLD,
        passed: tv < TV_THRESHOLD && argmax_consistent,
        argmax_consistent,
    })
}

/// Builds the frozen tiny model for `(vocab, len)` and runs [`oracle_check`].
pub fn run_oracle_check(vocab: usize, len: usize, steps: usize, samples: usize, seed: u64) -> Result<OracleReport> {
    state_count(vocab, len)?;
    if vocab <= MASK as usize {
        return Err(Error::Config(format!("vocabulary of size {vocab} has no MASK id")));
    }
    if samples == 0 {
        return Err(Error::Config("oracle check needs at least one sample".into()));
    }
    let prefix = check_prefix(vocab);
    let model = frozen_tiny_model(vocab, prefix.len() + len, seed)?;
    oracle_check(&model, &prefix, len, steps, samples, seed.wrapping_add(1))
}
