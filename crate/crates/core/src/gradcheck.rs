//! Central finite-difference check of the training gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::denoise::{sundae_objective, DenoiseConfig};
use crate::error::Result;
use crate::model::{apply_block, block_of, embed, final_hidden, head_rows, ModelParams, SequenceBatch};
use crate::numerics::{cross_entropy, Graph};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the backward pass of the unrolled objective with fourth-order
/// central differences of step `h` on every parameter coordinate:
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`. The corrupted
/// input and the sampled inputs of later steps are drawn once and held fixed,
/// matching the gradient barrier at each sampling step.
///
/// A perturbed loss is recomputed from the first block the coordinate can
/// influence, reusing the unperturbed residual stream up to that block.
/// Token embedding rows absent from every input reach the loss only
/// through the tied head.
pub fn check_model_gradient(
    params: &ModelParams<f64>,
    clean: &SequenceBatch,
    config: &DenoiseConfig,
    seed: u64,
    h: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (total, report) = sundae_objective(params, &mut g, clean, config, &mut rng)?;
    let grads = g.backward(total)?.into_dense(&params.shapes());
    let inputs = report.inputs;
    let (b, seq) = (clean.batch, clean.seq_len);
    let mode = params.config.attention;
    let layers = params.config.layers;
    let d = params.config.hidden;

    // streams[step][l]: residual stream entering block l; the last entry follows the final block.
    let mut streams = Vec::with_capacity(inputs.len());
    for ids in &inputs {
        let mut h = embed(params, ids, b, seq)?;
        let mut per_block = vec![h.clone()];
        for l in 0..layers {
            apply_block(params, mode, l, &mut h, b, seq);
            per_block.push(h.clone());
        }
        streams.push(per_block);
    }
    // Only loss-masked rows reach the loss, so the head runs on those alone.
    let scored: Vec<usize> = (0..clean.ids.len()).filter(|&r| clean.loss_mask[r] != 0).collect();
    let targets: Vec<u32> = scored.iter().map(|&r| clean.ids[r]).collect();
    let ones = vec![1u8; scored.len()];
    let loss_from = |probe: &ModelParams<f64>, first: Option<usize>| -> Result<f64> {
        let mut sum = 0.0;
        for (ids, per_block) in inputs.iter().zip(&streams) {
            let h = match first {
                None => final_hidden(probe, mode, 0, embed(probe, ids, b, seq)?, b, seq)?,
                Some(l) => final_hidden(probe, mode, l, per_block[l].clone(), b, seq)?,
            };
            let logits = head_rows(probe, &h, Some(&scored))?;
            sum += cross_entropy(&logits, &targets, &ones)?.loss;
        }
        Ok(sum / inputs.len() as f64)
    };
    let fed: std::collections::HashSet<u32> = inputs.iter().flatten().copied().collect();

    let mut probe = params.clone();
    let mut out = GradCheckReport {
        coordinates: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (t, grad) in grads.iter().enumerate() {
        for i in 0..grad.numel() {
            let first = match block_of(&params.config, t) {
                None if params.names()[t] == "tok_emb" && !fed.contains(&((i / d) as u32)) => Some(layers),
                other => other,
            };
            let orig = probe.tensors()[t].data()[i];
            let mut at = |x: f64| {
                probe.tensors_mut()[t].data_mut()[i] = x;
                loss_from(&probe, first)
            };
            let near = at(orig + h)? - at(orig - h)?;
            let far = at(orig + 2.0 * h)? - at(orig - 2.0 * h)?;
            probe.tensors_mut()[t].data_mut()[i] = orig;

            let numeric = (8.0 * near - far) / (12.0 * h);
            let analytic = grad.data()[i];
            let err = relative_error(analytic, numeric, floor);
            out.coordinates += 1;
            if err > out.max_rel_error || out.worst_param.is_empty() {
                out.max_rel_error = err;
                out.worst_param = params.names()[t].clone();
                out.worst_index = i;
                out.worst_analytic = analytic;
                out.worst_numeric = numeric;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, SequenceRow};

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn tiny_model_passes() {
        let cfg = ModelConfig { layers: 1, hidden: 8, heads: 2, ffn: 12, vocab: 9, max_seq: 6, ..Default::default() };
        let params = ModelParams::<f64>::init_with_std(&cfg, 3, 0.3).unwrap();
        let rows = [SequenceRow::new(vec![4, 5], vec![6, 7, 0]), SequenceRow::new(vec![8], vec![5, 0, 0])];
        let batch = SequenceBatch::from_rows(&rows, Some(6)).unwrap();
        let r = check_model_gradient(&params, &batch, &DenoiseConfig::default(), 1, 1e-4, 1e-6).unwrap();
        assert_eq!(r.coordinates, params.num_params());
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
