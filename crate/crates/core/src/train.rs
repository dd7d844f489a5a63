//! Training loops for pretraining and finetuning.
//!
//! Each step's batch and randomness are functions of the run seed and the
//! step index alone, so a run resumed from a checkpoint at step `k`
//! reproduces a straight run bit for bit.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{Objective, RunConfig};
use crate::data::{example_seed, format_downstream, load_corpus, prefix_lm_from_ids, span_corruption_from_ids, CorpusFormat, RawExample, TruncationCounters};
use crate::denoise::TrainState;
use crate::error::{Error, Result};
use crate::model::{Denoiser, ModelConfig, ModelParams, SequenceBatch, SequenceRow};
use crate::numerics::Scalar;
use crate::sampler::{unroll_decode_batch, UnrollConfig};
use crate::tokenizer::{TokenizerMode, Vocab, PAD};

pub const LOG_HEADER: &str = "step,loss_step0,loss_step1,total,token_acc0,token_acc1,wall_ms";
pub const EVAL_LOG_HEADER: &str = "step,token_accuracy,exact_match";

const STEP_STREAM: u64 = 0x5354_4550_5345_4544;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss_step0: f64,
    pub loss_step1: f64,
    pub total: f64,
    pub token_acc0: f64,
    pub token_acc1: f64,
    pub wall_ms: f64,
}

impl LogRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.6},{:.6},{:.1}",
            self.step, self.loss_step0, self.loss_step1, self.total, self.token_acc0, self.token_acc1, self.wall_ms
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(Error::Data(format!("log line has {} fields: {line}", f.len())));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| Error::Data(format!("field {i} of `{line}`: {e}")));
        Ok(Self {
            step: f[0].parse().map_err(|e| Error::Data(format!("step of `{line}`: {e}")))?,
            loss_step0: num(1)?,
            loss_step1: num(2)?,
            total: num(3)?,
            token_acc0: num(4)?,
            token_acc1: num(5)?,
            wall_ms: num(6)?,
        })
    }
}

/// Reads a training log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Data(format!("{}: missing log header", path.display())));
    }
    lines.filter(|l| !l.trim().is_empty()).map(LogRecord::parse).collect()
}

/// Training examples: tokenized documents turned into rows on the fly, or
/// preformatted rows.
#[derive(Clone, Debug)]
pub enum TrainSource {
    Documents(Vec<Vec<u32>>),
    Rows(Vec<SequenceRow>),
}

impl TrainSource {
    pub fn len(&self) -> usize {
        match self {
            Self::Documents(d) => d.len(),
            Self::Rows(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Seed of the objective's corruption and sampling draws at `step`.
pub fn step_seed(run_seed: u64, step: u64) -> u64 {
    example_seed(run_seed ^ STEP_STREAM, step)
}

/// The batch used at `step`: `batch_size` examples drawn with replacement.
pub fn step_batch(config: &RunConfig, source: &TrainSource, step: u64) -> Result<SequenceBatch> {
    if source.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let batch_seed = example_seed(config.seed, step);
    let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
    let mut rows = Vec::with_capacity(config.batch_size);
    let mut attempt = 0u64;
    while rows.len() < config.batch_size {
        let i = rng.random_range(0..source.len());
        let mut row_rng = ChaCha8Rng::seed_from_u64(example_seed(batch_seed, attempt));
        attempt += 1;
        let row = match source {
            TrainSource::Rows(r) => Some(r[i].clone()),
            TrainSource::Documents(d) => match config.objective {
                Objective::PrefixLm => prefix_lm_from_ids(&d[i], &config.pipeline, &mut row_rng),
                Objective::SpanCorruption => span_corruption_from_ids(&d[i], &config.pipeline, &mut row_rng),
            },
        };
        if let Some(row) = row {
            rows.push(row);
        } else if attempt > 100 * config.batch_size as u64 {
            return Err(Error::Data("corpus yields no usable training rows".into()));
        }
    }
    SequenceBatch::from_rows(&rows, None)
}

/// Greedy-decode quality on reference rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DecodeEval {
    /// Fraction of non-PAD reference slots reproduced exactly.
    pub token_accuracy: f64,
    /// Fraction of rows whose whole target buffer is reproduced.
    pub exact_match: f64,
}

/// Decodes every row's prefix and compares the output with its target buffer.
pub fn evaluate_rows<T: Scalar, D: Denoiser<T> + ?Sized>(model: &D, rows: &[SequenceRow], decode: &UnrollConfig, seed: u64) -> Result<DecodeEval> {
    let Some(first) = rows.first() else {
        return Ok(DecodeEval { token_accuracy: 0.0, exact_match: 0.0 });
    };
    let target_len = first.target.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hit, mut total, mut exact) = (0usize, 0usize, 0usize);
    for chunk in rows.chunks(64) {
        let prefixes: Vec<Vec<u32>> = chunk.iter().map(|r| r.prefix.clone()).collect();
        let traces = unroll_decode_batch(model, &prefixes, target_len, decode, &mut rng)?;
        for (row, trace) in chunk.iter().zip(&traces) {
            let out = trace.output();
            for (&want, &got) in row.target.iter().zip(out) {
                if want != PAD {
                    total += 1;
                    hit += (want == got) as usize;
                }
            }
            exact += (out == row.target.as_slice()) as usize;
        }
    }
    Ok(DecodeEval {
        token_accuracy: if total == 0 { 0.0 } else { hit as f64 / total as f64 },
        exact_match: exact as f64 / rows.len() as f64,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRecord>,
    pub evals: Vec<(u64, DecodeEval)>,
    pub checkpoints: Vec<PathBuf>,
}

/// Everything a training loop reads besides the state it advances.
pub struct TrainRun<'a> {
    pub config: &'a RunConfig,
    pub source: &'a TrainSource,
    pub eval_rows: &'a [SequenceRow],
    /// Destination of logs and checkpoints; `None` keeps the run in memory.
    pub out_dir: Option<&'a Path>,
}

fn open_log(path: &Path, header: &str, fresh: bool) -> Result<BufWriter<File>> {
    let exists = path.exists();
    let file = if fresh || !exists {
        File::create(path)
    } else {
        OpenOptions::new().append(true).open(path)
    }
    .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    if fresh || !exists {
        writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

/// Runs `state` forward to `config.steps`.
///
/// Logs every `log_every` steps and at the last step, checkpoints every
/// `checkpoint_every` steps and at the end. A non-finite loss or gradient
/// stops the run, writes `diverged.narc` with the last good state and
/// returns the numerical error.
pub fn train(run: &TrainRun, mut state: TrainState) -> Result<TrainOutcome> {
    let config = run.config;
    config.validate()?;
    if state.params.config != config.model {
        return Err(Error::Mismatch(model_config_diff(&config.model, &state.params.config).join("\n")));
    }
    let fresh = state.step == 0;
    let (mut log_file, mut eval_file) = match run.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let log = open_log(&dir.join("train_log.csv"), LOG_HEADER, fresh)?;
            let eval = if config.eval_every > 0 && !run.eval_rows.is_empty() {
                Some(open_log(&dir.join("eval.csv"), EVAL_LOG_HEADER, fresh)?)
            } else {
                None
            };
            (Some(log), eval)
        }
        None => (None, None),
    };
    let mut outcome = TrainOutcome { state: state.clone(), log: Vec::new(), evals: Vec::new(), checkpoints: Vec::new() };
    let mut window_start = Instant::now();

    while state.step < config.steps {
        let step = state.step;
        let batch = step_batch(config, run.source, step)?;
        let report = match state.train_step(&batch, &config.denoise, step_seed(config.seed, step)) {
            Ok(r) => r,
            Err(e @ Error::NonFinite { .. }) => {
                if let Some(dir) = run.out_dir {
                    let path = dir.join("diverged.narc");
                    Checkpoint::new(config.clone(), state.clone()).save(&path)?;
                    log::error!("non-finite training step {step}; last good state written to {}", path.display());
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let done = state.step;

        if done % config.log_every == 0 || done == config.steps {
            let rec = LogRecord {
                step: done,
                loss_step0: report.loss_step0(),
                loss_step1: report.loss_step1(),
                total: report.total,
                token_acc0: report.token_accuracy[0],
                token_acc1: report.token_accuracy.get(1).copied().unwrap_or(f64::NAN),
                wall_ms: window_start.elapsed().as_secs_f64() * 1e3,
            };
            window_start = Instant::now();
            log::info!("step {done}: loss {:.4} / {:.4}, accuracy {:.3}", rec.loss_step0, rec.loss_step1, rec.token_acc0);
            if let Some(w) = log_file.as_mut() {
                writeln!(w, "{}", rec.csv_line()).and_then(|_| w.flush()).map_err(|e| Error::io("train_log.csv", e))?;
            }
            outcome.log.push(rec);
        }

        if config.eval_every > 0 && done % config.eval_every == 0 && !run.eval_rows.is_empty() {
            let rows = &run.eval_rows[..run.eval_rows.len().min(config.eval_examples)];
            let ev = evaluate_rows(&state.params, rows, &config.decode, config.seed)?;
            log::info!("step {done}: eval token accuracy {:.4}, exact match {:.4}", ev.token_accuracy, ev.exact_match);
            if let Some(w) = eval_file.as_mut() {
                writeln!(w, "{done},{:.6},{:.6}", ev.token_accuracy, ev.exact_match)
                    .and_then(|_| w.flush())
                    .map_err(|e| Error::io("eval.csv", e))?;
            }
            outcome.evals.push((done, ev));
        }

        if let Some(dir) = run.out_dir {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
                let path = dir.join(format!("ckpt-{done:08}.narc"));
                Checkpoint::new(config.clone(), state.clone()).save(&path)?;
                outcome.checkpoints.push(path);
            }
        }
    }

    if let Some(dir) = run.out_dir {
        let path = dir.join("final.narc");
        Checkpoint::new(config.clone(), state.clone()).save(&path)?;
        outcome.checkpoints.push(path);
    }
    outcome.state = state;
    Ok(outcome)
}

/// Field-by-field differences between two model configurations.
pub fn model_config_diff(expected: &ModelConfig, found: &ModelConfig) -> Vec<String> {
    let a = serde_json::to_value(expected).expect("config serializes");
    let b = serde_json::to_value(found).expect("config serializes");
    let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
        return vec!["model configurations differ".into()];
    };
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| format!("model.{k}: config {v}, checkpoint {}", b.get(k).map_or("missing".into(), |x| x.to_string())))
        .collect()
}

fn read_examples(path: &Path, format: CorpusFormat) -> Result<Vec<RawExample>> {
    let examples: Vec<RawExample> = load_corpus(path, format)?.collect::<Result<_>>()?;
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(examples)
}

/// Loads the configured vocabulary, or builds one from `texts` and writes it
/// to `out_dir/vocab.txt`. Sets `model.vocab` and `paths.vocab` accordingly.
pub fn prepare_vocab<'a>(config: &mut RunConfig, texts: impl IntoIterator<Item = &'a str>) -> Result<Vocab> {
    let vocab = match (&config.paths.vocab, config.tokenizer.mode) {
        (Some(path), _) => Vocab::load(path)?,
        (None, TokenizerMode::Byte) => Vocab::bytes(),
        (None, TokenizerMode::Word) => Vocab::build(texts, config.tokenizer.max_vocab, TokenizerMode::Word)?,
    };
    if vocab.mode() != config.tokenizer.mode {
        return Err(Error::Config(format!("vocabulary mode {:?} does not match tokenizer.mode {:?}", vocab.mode(), config.tokenizer.mode)));
    }
    if config.paths.vocab.is_none() {
        let dir = &config.paths.out_dir;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("vocab.txt");
        vocab.save(&path)?;
        config.paths.vocab = Some(path);
    }
    config.model.vocab = vocab.len();
    Ok(vocab)
}

fn downstream_rows(examples: &[RawExample], config: &RunConfig, vocab: &Vocab) -> Result<(Vec<SequenceRow>, TruncationCounters)> {
    let mut counters = TruncationCounters::default();
    let rows = examples
        .iter()
        .map(|ex| format_downstream(ex, config.task, vocab, &config.pipeline, &mut counters))
        .collect::<Result<Vec<_>>>()?;
    if counters.input_truncated + counters.target_truncated > 0 {
        log::warn!(
            "truncated {} inputs and {} targets of {} examples",
            counters.input_truncated,
            counters.target_truncated,
            counters.examples
        );
    }
    Ok((rows, counters))
}

/// Pretraining on `paths.corpus`. A `resume` state continues from its step.
pub fn run_pretrain(mut config: RunConfig, resume: Option<TrainState>) -> Result<TrainOutcome> {
    config.validate()?;
    let corpus = config.paths.corpus.clone().ok_or_else(|| Error::Config("paths.corpus is required".into()))?;
    let examples = read_examples(&corpus, config.paths.corpus_format)?;
    let vocab = prepare_vocab(&mut config, examples.iter().map(|e| e.input.as_str()))?;
    config.validate()?;
    let docs: Vec<Vec<u32>> = examples.iter().map(|e| vocab.encode(&e.input)).filter(|d| d.len() >= 2).collect();
    if docs.is_empty() {
        return Err(Error::Data("no document has two or more tokens".into()));
    }
    log::info!("pretraining on {} documents, vocabulary {}", docs.len(), vocab.len());
    let eval_rows = match &config.paths.eval_corpus {
        Some(p) => downstream_rows(&read_examples(p, crate::data::CorpusFormat::Records)?, &config, &vocab)?.0,
        None => Vec::new(),
    };
    let state = match resume {
        Some(s) => s,
        None => TrainState::new(ModelParams::init(&config.model, config.seed)?, config.optimizer, config.seed),
    };
    let source = TrainSource::Documents(docs);
    let out_dir = config.paths.out_dir.clone();
    train(&TrainRun { config: &config, source: &source, eval_rows: &eval_rows, out_dir: Some(&out_dir) }, state)
}

/// Finetuning on the records in `paths.corpus`, starting from `init`.
/// Unless `resume` is set the step counter and optimizer moments start
/// over; the parameters and vocabulary come from the checkpoint.
pub fn run_finetune(mut config: RunConfig, init: Checkpoint, resume: bool) -> Result<TrainOutcome> {
    if config.paths.vocab.is_none() {
        config.paths.vocab = init.config.paths.vocab.clone();
    }
    config.tokenizer = init.config.tokenizer.clone();
    let corpus = config.paths.corpus.clone().ok_or_else(|| Error::Config("paths.corpus is required".into()))?;
    let examples = read_examples(&corpus, CorpusFormat::Records)?;
    let vocab = prepare_vocab(&mut config, examples.iter().flat_map(|e| [e.input.as_str(), e.target.as_str()]))?;
    let diff = model_config_diff(&config.model, &init.state.params.config);
    if !diff.is_empty() {
        return Err(Error::Mismatch(diff.join("\n")));
    }
    config.validate()?;
    let (rows, _) = downstream_rows(&examples, &config, &vocab)?;
    let eval_rows = match &config.paths.eval_corpus {
        Some(p) => downstream_rows(&read_examples(p, CorpusFormat::Records)?, &config, &vocab)?.0,
        None => Vec::new(),
    };
    let state = if resume { init.state } else { TrainState::new(init.state.params, config.optimizer, config.seed) };
    let source = TrainSource::Rows(rows);
    let out_dir = config.paths.out_dir.clone();
    train(&TrainRun { config: &config, source: &source, eval_rows: &eval_rows, out_dir: Some(&out_dir) }, state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::AdamConfig;

    fn tiny_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.model = ModelConfig { layers: 1, hidden: 16, heads: 2, ffn: 32, vocab: 260, max_seq: 48, ..Default::default() };
        c.pipeline.prefix_len = 24;
        c.pipeline.target_len = 12;
        c.pipeline.input_budget = 24;
        c.pipeline.target_budget = 12;
        c.batch_size = 4;
        c.steps = 6;
        c.log_every = 2;
        c.checkpoint_every = 3;
        c.optimizer = AdamConfig { lr: 1e-3, ..Default::default() };
        c
    }

    fn docs() -> TrainSource {
        let v = Vocab::bytes();
        TrainSource::Documents(["the cat sat on the mat", "a dog ran off", "birds sing at dawn and dusk"].iter().map(|s| v.encode(s)).collect())
    }

    #[test]
    fn log_line_roundtrip() {
        let r = LogRecord { step: 5, loss_step0: 1.25, loss_step1: 2.5, total: 1.875, token_acc0: 0.5, token_acc1: 0.25, wall_ms: 12.0 };
        assert_eq!(LogRecord::parse(&r.csv_line()).unwrap(), r);
        assert_eq!(LOG_HEADER.split(',').count(), r.csv_line().split(',').count());
    }

    #[test]
    fn batches_depend_only_on_seed_and_step() {
        let c = tiny_config();
        let s = docs();
        assert_eq!(step_batch(&c, &s, 3).unwrap(), step_batch(&c, &s, 3).unwrap());
        assert_ne!(step_batch(&c, &s, 3).unwrap(), step_batch(&c, &s, 4).unwrap());
        step_batch(&c, &s, 0).unwrap().validate().unwrap();
    }

    #[test]
    fn resume_equals_straight_run() {
        let c = tiny_config();
        let s = docs();
        let init = TrainState::new(ModelParams::init(&c.model, 1).unwrap(), c.optimizer, 1);
        let run = TrainRun { config: &c, source: &s, eval_rows: &[], out_dir: None };
        let straight = train(&run, init.clone()).unwrap();

        let half = RunConfig { steps: 3, ..c.clone() };
        let first = train(&TrainRun { config: &half, ..run }, init).unwrap();
        let bytes = Checkpoint::new(half.clone(), first.state).to_bytes();
        let restored = Checkpoint::from_bytes(&bytes).unwrap();
        let resumed = train(&run, restored.state).unwrap();
        assert_eq!(resumed.state, straight.state);
        assert_eq!(straight.state.step, 6);
        assert_eq!(straight.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 4, 6]);
    }

    #[test]
    fn writes_logs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_config();
        let s = docs();
        let init = TrainState::new(ModelParams::init(&c.model, 1).unwrap(), c.optimizer, 1);
        let out = train(&TrainRun { config: &c, source: &s, eval_rows: &[], out_dir: Some(dir.path()) }, init).unwrap();
        let names: Vec<_> = out.checkpoints.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, ["ckpt-00000003.narc", "ckpt-00000006.narc", "final.narc"]);
        let log = read_log(&dir.path().join("train_log.csv")).unwrap();
        assert_eq!(log.len(), 3);
        let ck = Checkpoint::load(&dir.path().join("final.narc")).unwrap();
        assert_eq!(ck.state, out.state);
    }

    #[test]
    fn divergence_stops_with_diagnostic_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_config();
        let s = docs();
        let mut params = ModelParams::init(&c.model, 1).unwrap();
        params.get_mut("ln_f.gamma").unwrap().data_mut()[0] = f32::INFINITY;
        let init = TrainState::new(params, c.optimizer, 1);
        let err = train(&TrainRun { config: &c, source: &s, eval_rows: &[], out_dir: Some(dir.path()) }, init).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(dir.path().join("diverged.narc").exists());
    }

    #[test]
    fn mismatched_state_is_refused() {
        let c = tiny_config();
        let other = ModelConfig { hidden: 8, ..c.model.clone() };
        let state = TrainState::new(ModelParams::init(&other, 1).unwrap(), c.optimizer, 1);
        let err = train(&TrainRun { config: &c, source: &docs(), eval_rows: &[], out_dir: None }, state).unwrap_err();
        assert!(matches!(&err, Error::Mismatch(d) if d.contains("model.hidden")), "{err}");
    }

    #[test]
    fn evaluation_counts_non_pad_slots() {
        let c = tiny_config();
        let p = ModelParams::<f32>::init(&c.model, 2).unwrap();
        let rows = vec![SequenceRow::new(vec![5, 6], vec![7, 8, PAD])];
        let ev = evaluate_rows(&p, &rows, &UnrollConfig::default(), 0).unwrap();
        assert!((0.0..=1.0).contains(&ev.token_accuracy));
        assert!(ev.token_accuracy * 2.0 == (ev.token_accuracy * 2.0).round());
    }
}
