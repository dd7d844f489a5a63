//! ROUGE-1/2/L, corpus BLEU-4, OVERALL and exact match.
//!
//! Text is lowercased and split on whitespace before scoring. All scores
//! are on a 0–100 scale.

use std::collections::HashMap;
use std::hash::Hash;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn metric_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts<S: Eq + Hash>(tokens: &[S], n: usize) -> HashMap<&[S], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches of `hyp` against `reference`.
fn clipped_matches<S: Eq + Hash>(hyp: &[S], reference: &[S], n: usize) -> usize {
    let r = ngram_counts(reference, n);
    ngram_counts(hyp, n).iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum()
}

fn f1(hits: usize, hyp_total: usize, ref_total: usize) -> f64 {
    if hits == 0 || hyp_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = hits as f64 / hyp_total as f64;
    let r = hits as f64 / ref_total as f64;
    100.0 * 2.0 * p * r / (p + r)
}

/// ROUGE-N F1 with clipped counts. Panics if `n == 0`.
pub fn rouge_n<S: Eq + Hash>(hyp: &[S], reference: &[S], n: usize) -> f64 {
    assert!(n >= 1, "ROUGE-N needs n >= 1");
    let total = |len: usize| (len + 1).saturating_sub(n);
    f1(clipped_matches(hyp, reference, n), total(hyp.len()), total(reference.len()))
}

/// Length of the longest common subsequence, in O(|a|·|b|) time and O(|b|) memory.
pub fn lcs_len<S: Eq>(a: &[S], b: &[S]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE-L F1.
pub fn rouge_l<S: Eq>(hyp: &[S], reference: &[S]) -> f64 {
    f1(lcs_len(hyp, reference), hyp.len(), reference.len())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BleuSmoothing {
    #[default]
    None,
    /// Adds one to the match and total counts of 2- to 4-grams.
    AddOne,
}

impl FromStr for BleuSmoothing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "add-one" => Ok(Self::AddOne),
            other => Err(Error::Config(format!("unknown BLEU smoothing `{other}`"))),
        }
    }
}

/// Corpus-level BLEU-4: geometric mean of clipped 1–4-gram precisions
/// times the brevity penalty `min(1, e^(1 − r/c))`.
pub fn bleu4<S: Eq + Hash>(hyps: &[Vec<S>], refs: &[Vec<S>], smoothing: BleuSmoothing) -> f64 {
    let mut hits = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            hits[n - 1] += clipped_matches(h, rf, n);
            totals[n - 1] += (h.len() + 1).saturating_sub(n);
        }
    }
    if c == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        let (m, t) = match smoothing {
            BleuSmoothing::AddOne if n > 0 => (hits[n] + 1, totals[n] + 1),
            _ => (hits[n], totals[n]),
        };
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_p += (m as f64 / t as f64).ln() / 4.0;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * log_p.exp()
}

/// Arithmetic mean of ROUGE-1, ROUGE-2 and ROUGE-L.
pub fn overall(rouge1: f64, rouge2: f64, rouge_l: f64) -> f64 {
    (rouge1 + rouge2 + rouge_l) / 3.0
}

/// Rounds to two decimals for reporting.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Percentage of pairs whose token sequences are identical.
pub fn exact_match<S: Eq>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> f64 {
    if hyps.is_empty() {
        return 0.0;
    }
    let hits = hyps.iter().zip(refs).filter(|(h, r)| h == r).count();
    100.0 * hits as f64 / hyps.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub overall: f64,
    pub bleu4: f64,
    pub exact_match: f64,
}

pub const EVAL_CSV_HEADER: &str = "rouge1,rouge2,rougeL,overall,bleu4,exact_match";

impl EvalReport {
    /// Scores paired hypothesis and reference lines. ROUGE is averaged over
    /// pairs; BLEU is computed over the whole corpus.
    pub fn score<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R], smoothing: BleuSmoothing) -> Result<Self> {
        if hyps.len() != refs.len() {
            return Err(Error::Data(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
        }
        let h: Vec<Vec<String>> = hyps.iter().map(|s| metric_tokens(s.as_ref())).collect();
        let r: Vec<Vec<String>> = refs.iter().map(|s| metric_tokens(s.as_ref())).collect();
        let n = h.len().max(1) as f64;
        let mean = |f: &dyn Fn(&[String], &[String]) -> f64| h.iter().zip(&r).map(|(a, b)| f(a, b)).sum::<f64>() / n;
        let rouge1 = mean(&|a, b| rouge_n(a, b, 1));
        let rouge2 = mean(&|a, b| rouge_n(a, b, 2));
        let rouge_l = mean(&|a, b| rouge_l(a, b));
        Ok(Self {
            rouge1,
            rouge2,
            rouge_l,
            overall: overall(rouge1, rouge2, rouge_l),
            bleu4: bleu4(&h, &r, smoothing),
            exact_match: exact_match(&h, &r),
        })
    }

    /// Every score rounded to two decimals.
    pub fn rounded(&self) -> Self {
        Self {
            rouge1: round2(self.rouge1),
            rouge2: round2(self.rouge2),
            rouge_l: round2(self.rouge_l),
            overall: round2(self.overall),
            bleu4: round2(self.bleu4),
            exact_match: round2(self.exact_match),
        }
    }

    /// Single-line JSON with two-decimal values.
    pub fn to_json(&self) -> String {
        let r = self.rounded();
        format!(
            "{{\"rouge1\":{:.2},\"rouge2\":{:.2},\"rougeL\":{:.2},\"overall\":{:.2},\"bleu4\":{:.2},\"exact_match\":{:.2}}}",
            r.rouge1, r.rouge2, r.rouge_l, r.overall, r.bleu4, r.exact_match
        )
    }

    pub fn csv_row(&self) -> String {
        let r = self.rounded();
        format!("{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}", r.rouge1, r.rouge2, r.rouge_l, r.overall, r.bleu4, r.exact_match)
    }
}
