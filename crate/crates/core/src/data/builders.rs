use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{RawExample, SEP_MARKER};
use crate::error::{Error, Result};
use crate::model::SequenceRow;
use crate::tokenizer::{Vocab, MASK, PAD, SEP};

/// Seed for item `index` of a stream seeded with `seed` (SplitMix64 finalizer).
pub fn example_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruncationSide {
    Left,
    #[default]
    Right,
}

/// Where a prefix-LM document is split into prefix and target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPolicy {
    /// Uniform over `[1, len − 1]`.
    #[default]
    Uniform,
    /// `max(1, len / 2)`.
    Middle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpanConfig {
    /// Expected fraction of tokens hidden.
    pub rate: f64,
    pub mean_span: f64,
}

impl Default for SpanConfig {
    fn default() -> Self {
        Self { rate: 0.15, mean_span: 3.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Pretraining prefix length.
    pub prefix_len: usize,
    /// Pretraining target buffer length.
    pub target_len: usize,
    /// Downstream input budget.
    pub input_budget: usize,
    /// Downstream target buffer length.
    pub target_budget: usize,
    /// Side dropped when a downstream input exceeds its budget.
    pub truncation: TruncationSide,
    pub split: SplitPolicy,
    /// Whether PAD slots of the target buffer carry loss.
    pub pad_loss: bool,
    pub span: SpanConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            prefix_len: 512,
            target_len: 114,
            input_budget: 512,
            target_budget: 114,
            truncation: TruncationSide::Right,
            split: SplitPolicy::Uniform,
            pad_loss: true,
            span: SpanConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("prefix_len", self.prefix_len),
            ("target_len", self.target_len),
            ("input_budget", self.input_budget),
            ("target_budget", self.target_budget),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.span.rate) {
            return Err(Error::Config(format!("span rate {} outside [0, 1]", self.span.rate)));
        }
        if !(self.span.mean_span >= 1.0) {
            return Err(Error::Config(format!("mean span {} below 1", self.span.mean_span)));
        }
        Ok(())
    }

    fn finish(&self, row: SequenceRow) -> SequenceRow {
        if self.pad_loss {
            row
        } else {
            row.without_pad_loss()
        }
    }
}

/// Right-truncates `tokens` to `len` and PAD-fills. Returns whether tokens were dropped.
fn pad_to(mut tokens: Vec<u32>, len: usize) -> (Vec<u32>, bool) {
    let truncated = tokens.len() > len;
    tokens.resize(len, PAD);
    (tokens, truncated)
}

fn truncate(mut tokens: Vec<u32>, len: usize, side: TruncationSide) -> (Vec<u32>, bool) {
    if tokens.len() <= len {
        return (tokens, false);
    }
    match side {
        TruncationSide::Right => tokens.truncate(len),
        TruncationSide::Left => {
            tokens.drain(..tokens.len() - len);
        }
    }
    (tokens, true)
}

fn random_window<'a, R: Rng + ?Sized>(ids: &'a [u32], len: usize, rng: &mut R) -> &'a [u32] {
    if ids.len() <= len {
        return ids;
    }
    let start = rng.random_range(0..=ids.len() - len);
    &ids[start..start + len]
}

/// Prefix-LM row for a split at `split`: tokens before it form the prefix
/// (left-truncated), tokens from it on fill the target buffer.
pub fn prefix_lm_split_at(ids: &[u32], split: usize, cfg: &PipelineConfig) -> SequenceRow {
    let (prefix, _) = truncate(ids[..split].to_vec(), cfg.prefix_len, TruncationSide::Left);
    let (target, _) = pad_to(ids[split..].to_vec(), cfg.target_len);
    cfg.finish(SequenceRow::new(prefix, target))
}

/// Prefix-LM row from token ids, or `None` for documents shorter than two tokens.
pub fn prefix_lm_from_ids<R: Rng + ?Sized>(ids: &[u32], cfg: &PipelineConfig, rng: &mut R) -> Option<SequenceRow> {
    if ids.len() < 2 {
        return None;
    }
    let ids = random_window(ids, cfg.prefix_len + cfg.target_len, rng);
    let split = match cfg.split {
        SplitPolicy::Uniform => rng.random_range(1..ids.len()),
        SplitPolicy::Middle => (ids.len() / 2).max(1),
    };
    Some(prefix_lm_split_at(ids, split, cfg))
}

pub fn build_prefix_lm(example: &RawExample, vocab: &Vocab, cfg: &PipelineConfig, seed: u64) -> Option<SequenceRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    prefix_lm_from_ids(&vocab.encode(&example.input), cfg, &mut rng)
}

/// Lengths of a uniformly random composition of `total` into `parts` positive parts.
fn random_segmentation<R: Rng + ?Sized>(total: usize, parts: usize, rng: &mut R) -> Vec<usize> {
    let mut cuts: Vec<usize> = sample(rng, total - 1, parts - 1).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    cuts.push(total);
    let mut prev = 0;
    cuts.into_iter()
        .map(|c| {
            let len = c - prev;
            prev = c;
            len
        })
        .collect()
}

/// Span-corruption row. About `rate × len` tokens (stochastically rounded)
/// are hidden in spans of mean length `mean_span`; each span collapses to a
/// single MASK in the prefix, and the target buffer lists the hidden spans
/// separated by SEP. Returns `None` when nothing would be hidden.
pub fn span_corruption_from_ids<R: Rng + ?Sized>(ids: &[u32], cfg: &PipelineConfig, rng: &mut R) -> Option<SequenceRow> {
    if ids.len() < 2 {
        return None;
    }
    let ids = random_window(ids, cfg.prefix_len, rng);
    let n = ids.len();
    let expected = cfg.span.rate * n as f64;
    let mut noise = expected.floor() as usize;
    if rng.random::<f64>() < expected.fract() {
        noise += 1;
    }
    let noise = noise.min(n - 1);
    if noise == 0 {
        return None;
    }
    let spans = ((noise as f64 / cfg.span.mean_span).round() as usize).clamp(1, noise.min(n - noise));
    let noise_lens = random_segmentation(noise, spans, rng);
    let keep_lens = random_segmentation(n - noise, spans, rng);

    let mut prefix = Vec::with_capacity(n - noise + spans);
    let mut target = Vec::with_capacity(noise + spans);
    let mut pos = 0;
    for (i, (&keep, &hide)) in keep_lens.iter().zip(&noise_lens).enumerate() {
        prefix.extend_from_slice(&ids[pos..pos + keep]);
        pos += keep;
        prefix.push(MASK);
        if i > 0 {
            target.push(SEP);
        }
        target.extend_from_slice(&ids[pos..pos + hide]);
        pos += hide;
    }
    let (target, _) = pad_to(target, cfg.target_len);
    Some(cfg.finish(SequenceRow::new(prefix, target)))
}

pub fn build_span_corruption(example: &RawExample, vocab: &Vocab, cfg: &PipelineConfig, seed: u64) -> Option<SequenceRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    span_corruption_from_ids(&vocab.encode(&example.input), cfg, &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Qg,
    Summarization,
    Mt,
    Synthetic,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qg" => Ok(Self::Qg),
            "summarization" => Ok(Self::Summarization),
            "mt" => Ok(Self::Mt),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Counts of examples formatted and of inputs and targets cut to budget.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TruncationCounters {
    pub examples: usize,
    pub input_truncated: usize,
    pub target_truncated: usize,
}

/// Downstream row: the input (for `qg`, `answer ‖ SEP ‖ passage`) as prefix
/// and the target PAD-filled to the target budget.
pub fn format_downstream(
    example: &RawExample,
    task: Task,
    vocab: &Vocab,
    cfg: &PipelineConfig,
    counters: &mut TruncationCounters,
) -> Result<SequenceRow> {
    if example.target.trim().is_empty() {
        return Err(Error::Data("downstream examples need both input and target".into()));
    }
    let prefix = format_input(&example.input, task, vocab, cfg, counters)?;
    let (target, cut_target) = pad_to(vocab.encode(&example.target), cfg.target_budget);
    counters.target_truncated += cut_target as usize;
    Ok(cfg.finish(SequenceRow::new(prefix, target)))
}

/// The prefix half of [`format_downstream`], for decoding unseen inputs.
pub fn format_input(input: &str, task: Task, vocab: &Vocab, cfg: &PipelineConfig, counters: &mut TruncationCounters) -> Result<Vec<u32>> {
    if input.trim().is_empty() {
        return Err(Error::Data("downstream examples empty input".into()));
    }
    let ids = match task {
        Task::Qg => {
            let (answer, passage) =
                input.split_once(SEP_MARKER).ok_or_else(|| Error::Data(format!("question-generation input lacks `{SEP_MARKER}`")))?;
            let mut ids = vocab.encode(answer);
            ids.push(SEP);
            ids.extend(vocab.encode(passage));
            ids
        }
        Task::Summarization | Task::Mt | Task::Synthetic => vocab.encode(input),
    };
    if ids.is_empty() {
        return Err(Error::Data("input encodes to no tokens".into()));
    }
    let (prefix, cut_input) = truncate(ids, cfg.input_budget, cfg.truncation);
    counters.examples += 1;
    counters.input_truncated += cut_input as usize;
    Ok(prefix)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub count: usize,
    /// `None` for an empty stream.
    pub mean_input_len: Option<f64>,
    pub mean_target_len: Option<f64>,
}

/// Example count and mean token lengths of inputs and targets.
pub fn corpus_stats<I>(stream: I, vocab: &Vocab) -> Result<CorpusStats>
where
    I: IntoIterator<Item = Result<RawExample>>,
{
    let (mut count, mut input, mut target) = (0usize, 0u64, 0u64);
    for ex in stream {
        let ex = ex?;
        count += 1;
        input += vocab.encode(&ex.input).len() as u64;
        target += vocab.encode(&ex.target).len() as u64;
    }
    let mean = |total: u64| (count > 0).then(|| total as f64 / count as f64);
    Ok(CorpusStats { count, mean_input_len: mean(input), mean_target_len: mean(target) })
}
