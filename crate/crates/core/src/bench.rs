//! Latency comparison of unrolled decoding against the autoregressive baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{AttentionMode, ModelConfig, ModelParams};
use crate::numerics::Scalar;
use crate::sampler::{ar_decode, unroll_decode, DecodeMode, UnrollConfig};
use crate::train::model_config_diff;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub target_tokens: usize,
    pub unroll_steps: usize,
    pub runs: usize,
    pub nar_forward_passes: usize,
    pub ar_forward_passes: usize,
    pub pass_ratio: f64,
    pub nar_ms_median: f64,
    pub ar_ms_median: f64,
    /// `ar_ms_median / nar_ms_median`.
    pub wall_ratio: f64,
}

pub fn median(xs: &mut [f64]) -> f64 {
    assert!(!xs.is_empty(), "median of nothing");
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Decodes `k` target tokens after `prefix` with both decoders, `runs` times
/// each at batch size 1, and reports pass counts and median wall clock.
/// The unrolled decoder runs all `t` steps; the baseline never halts early.
pub fn run_bench<T: Scalar>(
    bidirectional: &ModelParams<T>,
    causal: &ModelParams<T>,
    prefix: &[u32],
    k: usize,
    t: usize,
    runs: usize,
) -> Result<BenchReport> {
    let strip = |c: &ModelConfig| ModelConfig { attention: AttentionMode::Bidirectional, ..c.clone() };
    let diff = model_config_diff(&strip(&bidirectional.config), &strip(&causal.config));
    if !diff.is_empty() {
        return Err(Error::Mismatch(diff.join("\n")));
    }
    if runs == 0 {
        return Err(Error::Config("bench needs at least one run".into()));
    }
    let nar_model = bidirectional.with_mode(AttentionMode::Bidirectional);
    let ar_model = causal.with_mode(AttentionMode::Causal);
    let config = UnrollConfig { steps: t, mode: DecodeMode::Argmax, early_stop: false };
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let (mut nar_ms, mut ar_ms) = (Vec::with_capacity(runs), Vec::with_capacity(runs));
    let (mut nar_passes, mut ar_passes) = (0, 0);
    for _ in 0..runs {
        let nar = unroll_decode(&nar_model, prefix, k, &config, &mut rng)?;
        let ar = ar_decode(&ar_model, prefix, k, false)?;
        nar_passes = nar.forward_pass_count;
        ar_passes = ar.forward_pass_count;
        nar_ms.push(nar.wall_ms);
        ar_ms.push(ar.wall_ms);
    }
    let nar_ms_median = median(&mut nar_ms);
    let ar_ms_median = median(&mut ar_ms);
    Ok(BenchReport {
        target_tokens: k,
        unroll_steps: t,
        runs,
        nar_forward_passes: nar_passes,
        ar_forward_passes: ar_passes,
        pass_ratio: ar_passes as f64 / nar_passes as f64,
        nar_ms_median,
        ar_ms_median,
        wall_ratio: ar_ms_median / nar_ms_median,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn models() -> (ModelParams<f32>, ModelParams<f32>) {
        let cfg = ModelConfig { layers: 1, hidden: 16, heads: 2, ffn: 32, vocab: 20, max_seq: 80, ..Default::default() };
        let causal = ModelConfig { attention: AttentionMode::Causal, ..cfg.clone() };
        (ModelParams::init(&cfg, 1).unwrap(), ModelParams::init(&causal, 2).unwrap())
    }

    #[test]
    fn pass_count_ratios() {
        let (b, c) = models();
        let r = run_bench(&b, &c, &[4, 5, 6], 64, 10, 2).unwrap();
        assert_eq!((r.nar_forward_passes, r.ar_forward_passes), (10, 64));
        assert!((r.pass_ratio - 6.4).abs() < 1e-12);
        let r = run_bench(&b, &c, &[4, 5, 6], 10, 10, 1).unwrap();
        assert_eq!(r.pass_ratio, 1.0);
    }

    #[test]
    fn mismatched_models_are_refused() {
        let (b, _) = models();
        let other = ModelConfig { hidden: 8, ..b.config.clone() };
        let c = ModelParams::<f32>::init(&other, 1).unwrap();
        assert!(matches!(run_bench(&b, &c, &[4], 4, 2, 1), Err(Error::Mismatch(_))));
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
