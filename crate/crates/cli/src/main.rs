//! `nardec`: pretrain, finetune, decode and evaluate step-unrolled denoisers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nardec::bench::run_bench;
use nardec::checkpoint::Checkpoint;
use nardec::config::RunConfig;
use nardec::data::{corpus_stats, format_downstream, format_input, load_corpus, CorpusFormat, PackedWriter, TruncationCounters};
use nardec::metrics::{BleuSmoothing, EvalReport, EVAL_CSV_HEADER};
use nardec::model::SequenceRow;
use nardec::oracle::run_oracle_check;
use nardec::sampler::{unroll_decode_batch, DecodeMode, UnrollConfig, DEFAULT_UNROLL_STEPS};
use nardec::tokenizer::{TokenizerMode, Vocab};
use nardec::train::{run_finetune, run_pretrain, TrainOutcome};
use nardec::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "nardec", version, about = "Non-autoregressive decoding with step-unrolled denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prefix-LM or span-corruption pretraining on a plain-text corpus.
    Pretrain {
        #[command(flatten)]
        run: RunFlags,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Finetuning on input/target records, starting from a checkpoint.
    Finetune {
        #[command(flatten)]
        run: RunFlags,
        /// Checkpoint providing the initial parameters and vocabulary.
        #[arg(long)]
        init: PathBuf,
        /// Keep the step counter and optimizer moments of `--init`.
        #[arg(long)]
        resume: bool,
    },
    /// Decode one output per input line.
    Generate(GenerateArgs),
    /// Score hypotheses against references, one pair per line.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Append the report as a CSV row, writing the header if the file is new.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Smoothing::None)]
        bleu_smoothing: Smoothing,
    },
    /// Compare unrolled decoding against autoregressive decoding.
    Bench {
        #[arg(long)]
        bidirectional: PathBuf,
        #[arg(long)]
        causal: PathBuf,
        /// Target tokens to decode.
        #[arg(long, default_value_t = 114)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_UNROLL_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, default_value = "The quick brown fox jumps over the lazy dog.")]
        prefix: String,
    },
    /// Exact chain distribution versus Monte Carlo decoding on a tiny model.
    Oracle {
        #[arg(long)]
        vocab: usize,
        #[arg(long)]
        len: usize,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Corpus statistics, optionally packing formatted rows to a batch file.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "records")]
        format: CorpusFormat,
        #[arg(long, value_enum, default_value_t = Tokenizer::Byte)]
        tokenizer: Tokenizer,
        /// Vocabulary file; word mode builds one from the corpus otherwise.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Write formatted rows to this NARB file.
        #[arg(long)]
        pack: Option<PathBuf>,
        /// Configuration supplying the task and pipeline used by `--pack`.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Smoothing {
    None,
    AddOne,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tokenizer {
    Byte,
    Word,
}

/// Configuration file plus overrides named after its keys.
#[derive(Args, Default)]
struct RunFlags {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any key by dotted path, e.g. `--set model.layers=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    log_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    eval_examples: Option<usize>,
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    max_seq: Option<usize>,
    #[arg(long)]
    prefix_len: Option<usize>,
    #[arg(long)]
    target_len: Option<usize>,
    #[arg(long)]
    tokenizer: Option<String>,
    #[arg(long)]
    max_vocab: Option<usize>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    corpus_format: Option<String>,
    #[arg(long)]
    eval_corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl RunFlags {
    fn overrides(&self) -> Vec<(&'static str, Option<Value>)> {
        let v = |x: Option<Value>| x;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| json!(p));
        let mut out = vec![
            ("steps", v(self.steps.map(Value::from))),
            ("batch_size", v(self.batch_size.map(Value::from))),
            ("seed", v(self.seed.map(Value::from))),
            ("log_every", v(self.log_every.map(Value::from))),
            ("checkpoint_every", v(self.checkpoint_every.map(Value::from))),
            ("eval_every", v(self.eval_every.map(Value::from))),
            ("eval_examples", v(self.eval_examples.map(Value::from))),
            ("objective", self.objective.as_ref().map(|s| json!(s.replace('-', "_")))),
            ("task", self.task.as_ref().map(|s| json!(s))),
            ("optimizer.lr", self.lr.map(Value::from)),
            ("model.layers", self.layers.map(Value::from)),
            ("model.hidden", self.hidden.map(Value::from)),
            ("model.heads", self.heads.map(Value::from)),
            ("model.ffn", self.ffn.map(Value::from)),
            ("model.vocab", self.vocab_size.map(Value::from)),
            ("model.max_seq", self.max_seq.map(Value::from)),
            ("tokenizer.mode", self.tokenizer.as_ref().map(|s| json!(s))),
            ("tokenizer.max_vocab", self.max_vocab.map(Value::from)),
            ("paths.corpus", path(&self.corpus)),
            ("paths.corpus_format", self.corpus_format.as_ref().map(|s| json!(s))),
            ("paths.eval_corpus", path(&self.eval_corpus)),
            ("paths.vocab", path(&self.vocab)),
            ("paths.out_dir", path(&self.out_dir)),
        ];
        // The two length budgets follow the lengths unless set separately.
        if let Some(p) = self.prefix_len {
            out.push(("pipeline.prefix_len", Some(p.into())));
            out.push(("pipeline.input_budget", Some(p.into())));
        }
        if let Some(t) = self.target_len {
            out.push(("pipeline.target_len", Some(t.into())));
            out.push(("pipeline.target_budget", Some(t.into())));
        }
        out
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut doc = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => json!({}),
        };
        for (key, value) in self.overrides() {
            if let Some(value) = value {
                set_path(&mut doc, key, value)?;
            }
        }
        for s in &self.sets {
            let (key, raw) = s.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key.trim(), value)?;
        }
        RunConfig::from_json(&doc.to_string())
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = node.as_object_mut().ok_or_else(|| Error::Config(format!("{key}: {part} is not inside an object")))?;
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part).or_insert_with(|| json!({}));
    }
    Err(Error::Config("empty key".into()))
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One input per line, formatted as in the checkpoint's task.
    #[arg(long)]
    input: PathBuf,
    /// Decoded text, one line per input; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// JSON lines with one decode trace per input.
    #[arg(long)]
    traces: Option<PathBuf>,
    /// Unroll steps.
    #[arg(long, default_value_t = DEFAULT_UNROLL_STEPS)]
    steps: usize,
    /// Target buffer length; the checkpoint's target length by default.
    #[arg(long)]
    target_len: Option<usize>,
    /// Sample at this temperature instead of taking the argmax.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    early_stop: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn vocab_for(ckpt: &Checkpoint, ckpt_path: &Path) -> Result<Vocab> {
    if ckpt.config.tokenizer.mode == TokenizerMode::Byte {
        return Ok(Vocab::bytes());
    }
    let beside = ckpt_path.parent().unwrap_or(Path::new(".")).join("vocab.txt");
    match &ckpt.config.paths.vocab {
        Some(p) if p.exists() => Vocab::load(p),
        _ if beside.exists() => Vocab::load(&beside),
        _ => Err(Error::Data(format!("no vocabulary found for {}", ckpt_path.display()))),
    }
}

fn outcome_json(outcome: &TrainOutcome) -> Value {
    let last = outcome.log.last();
    json!({
        "step": outcome.state.step,
        "loss_step0": last.map(|r| r.loss_step0),
        "loss_step1": last.map(|r| r.loss_step1),
        "checkpoint": outcome.checkpoints.last(),
    })
}

fn generate(args: &GenerateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let vocab = vocab_for(&ckpt, &args.checkpoint)?;
    let config = &ckpt.config;
    let target_len = args.target_len.unwrap_or(config.pipeline.target_len);
    let mode = match args.temperature {
        Some(temperature) => DecodeMode::Sample { temperature },
        None => DecodeMode::Argmax,
    };
    let decode = UnrollConfig { steps: args.steps, mode, early_stop: args.early_stop };

    let file = File::open(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let lines: Vec<String> = BufReader::new(file).lines().collect::<std::io::Result<_>>().map_err(|e| Error::io(&args.input, e))?;
    let mut counters = TruncationCounters::default();
    let prefixes = lines
        .iter()
        .map(|l| format_input(l, config.task, &vocab, &config.pipeline, &mut counters))
        .collect::<Result<Vec<_>>>()?;
    if counters.input_truncated > 0 {
        log::warn!("truncated {} of {} inputs", counters.input_truncated, counters.examples);
    }

    let mut out: Box<dyn Write> = match &args.output {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    let mut traces = match &args.traces {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let params = &ckpt.state.params;
    for chunk in prefixes.chunks(64) {
        for mut trace in unroll_decode_batch(params, chunk, target_len, &decode, &mut rng)? {
            trace.attach_text(&vocab)?;
            writeln!(out, "{}", trace.text.replace('\n', " ")).map_err(|e| Error::io("output", e))?;
            if let Some(t) = traces.as_mut() {
                writeln!(t, "{}", serde_json::to_string(&trace)?).map_err(|e| Error::io("traces", e))?;
            }
        }
    }
    out.flush().map_err(|e| Error::io("output", e))?;
    if let Some(mut t) = traces {
        t.flush().map_err(|e| Error::io("traces", e))?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn evaluate(hyp: &Path, reference: &Path, csv: Option<&Path>, smoothing: Smoothing) -> Result<()> {
    let hyps = read_lines(hyp)?;
    let refs = read_lines(reference)?;
    let smoothing = match smoothing {
        Smoothing::None => BleuSmoothing::None,
        Smoothing::AddOne => BleuSmoothing::AddOne,
    };
    let report = EvalReport::score(&hyps, &refs, smoothing)?;
    println!("{}", report.to_json());
    if let Some(path) = csv {
        let fresh = !path.exists();
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        if fresh {
            writeln!(w, "{EVAL_CSV_HEADER}").map_err(|e| Error::io(path, e))?;
        }
        writeln!(w, "{}", report.csv_row()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn stats(corpus: &Path, format: CorpusFormat, tokenizer: Tokenizer, vocab: Option<&Path>, pack: Option<&Path>, config: Option<&Path>) -> Result<()> {
    let vocab = match (vocab, tokenizer) {
        (Some(p), _) => Vocab::load(p)?,
        (None, Tokenizer::Byte) => Vocab::bytes(),
        (None, Tokenizer::Word) => {
            let texts = load_corpus(corpus, format)?.map(|r| r.map(|e| format!("{} {}", e.input, e.target))).collect::<Result<Vec<_>>>()?;
            Vocab::build(texts.iter().map(String::as_str), usize::MAX, TokenizerMode::Word)?
        }
    };
    let stats = corpus_stats(load_corpus(corpus, format)?, &vocab)?;
    let mut report = serde_json::to_value(stats)?;
    if let Some(out) = pack {
        let mut cfg = match config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.model.vocab = vocab.len();
        let seq_len = cfg.pipeline.input_budget + cfg.pipeline.target_budget;
        let mut writer = PackedWriter::create(out, seq_len, cfg.pipeline.target_budget, vocab.len())?;
        let mut counters = TruncationCounters::default();
        for ex in load_corpus(corpus, format)? {
            let row: SequenceRow = format_downstream(&ex?, cfg.task, &vocab, &cfg.pipeline, &mut counters)?;
            writer.push(&row)?;
        }
        let rows = writer.rows();
        writer.finish()?;
        report["packed_rows"] = rows.into();
        report["input_truncated"] = counters.input_truncated.into();
        report["target_truncated"] = counters.target_truncated.into();
    }
    println!("{report}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { run, resume } => {
            let config = run.resolve()?;
            let state = match resume {
                Some(p) => Some(Checkpoint::load(&p)?.state),
                None => None,
            };
            println!("{}", outcome_json(&run_pretrain(config, state)?));
        }
        Command::Finetune { run, init, resume } => {
            let mut config = run.resolve()?;
            let ckpt = Checkpoint::load(&init)?;
            if config.paths.vocab.is_none() && ckpt.config.tokenizer.mode == TokenizerMode::Word {
                let beside = init.parent().unwrap_or(Path::new(".")).join("vocab.txt");
                config.paths.vocab = match &ckpt.config.paths.vocab {
                    Some(p) if p.exists() => Some(p.clone()),
                    _ => Some(beside),
                };
            }
            println!("{}", outcome_json(&run_finetune(config, ckpt, resume)?));
        }
        Command::Generate(args) => generate(&args)?,
        Command::Evaluate { hyp, reference, csv, bleu_smoothing } => evaluate(&hyp, &reference, csv.as_deref(), bleu_smoothing)?,
        Command::Bench { bidirectional, causal, k, steps, runs, prefix } => {
            let a = Checkpoint::load(&bidirectional)?;
            let b = Checkpoint::load(&causal)?;
            let vocab = vocab_for(&a, &bidirectional)?;
            let report = run_bench(&a.state.params, &b.state.params, &vocab.encode(&prefix), k, steps, runs)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Oracle { vocab, len, steps, samples, seed } => {
            let report = run_oracle_check(vocab, len, steps, samples, seed)?;
            println!("{}", serde_json::to_string(&report)?);
            if !report.passed {
                log::warn!("TV distance {:.4} is not below {}", report.tv, report.threshold);
            }
        }
        Command::Stats { corpus, format, tokenizer, vocab, pack, config } => {
            stats(&corpus, format, tokenizer, vocab.as_deref(), pack.as_deref(), config.as_deref())?
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
