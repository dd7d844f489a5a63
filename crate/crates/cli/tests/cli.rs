use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn nardec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nardec")).args(args).env("RUST_LOG", "warn").output().expect("spawn nardec")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("{e}: {text:?}"))
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny byte-level model pretrained for a few steps.
fn pretrain(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let corpus: String = (0..40).map(|i| format!("the cat sat on the mat number {i} and then went home\n")).collect();
    let corpus = write(dir, "corpus.txt", &corpus);
    let out = dir.join(name);
    let mut args = vec![
        "pretrain", "--corpus", s(&corpus), "--steps", "6", "--layers", "1", "--hidden", "16", "--heads", "2", "--ffn", "32",
        "--prefix-len", "8", "--target-len", "8", "--max-seq", "16", "--batch-size", "4", "--log-every", "3", "--out-dir", s(&out),
    ];
    args.extend_from_slice(extra);
    let r = nardec(&args);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let report = stdout_json(&r);
    assert_eq!(report["step"], 6);
    out.join("final.narc")
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&nardec(&["frobnicate"])), 1);
    assert_eq!(code(&nardec(&["evaluate", "--hyp", "a.txt"])), 1);
    assert_eq!(code(&nardec(&["--help"])), 0);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let corpus = write(dir.path(), "c.txt", "some text here\n");
    let r = nardec(&["pretrain", "--corpus", s(&corpus), "--set", "model.depth=3"]);
    assert_eq!(code(&r), 1);
    assert!(String::from_utf8_lossy(&r.stderr).contains("depth"));
}

#[test]
fn evaluate_identical_files_scores_full_marks() {
    let dir = TempDir::new().unwrap();
    let text = "the cat sat on the mat today\na quick brown fox jumps over dogs\n";
    let hyp = write(dir.path(), "hyp.txt", text);
    let csv = dir.path().join("scores.csv");
    for _ in 0..2 {
        let r = nardec(&["evaluate", "--hyp", s(&hyp), "--ref", s(&hyp), "--csv", s(&csv)]);
        assert_eq!(code(&r), 0);
        let report = stdout_json(&r);
        for key in ["rouge1", "rouge2", "rougeL", "overall", "bleu4", "exact_match"] {
            assert_eq!(report[key].as_f64(), Some(100.0), "{key}");
        }
    }
    let lines: Vec<String> = fs::read_to_string(&csv).unwrap().lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("rouge1"));
}

#[test]
fn evaluate_reports_bad_inputs() {
    let dir = TempDir::new().unwrap();
    let one = write(dir.path(), "one.txt", "a b c\n");
    let two = write(dir.path(), "two.txt", "a b c\nd e f\n");
    let missing = dir.path().join("missing.txt");

    let r = nardec(&["evaluate", "--hyp", s(&missing), "--ref", s(&one)]);
    assert_ne!(code(&r), 0);
    assert!(String::from_utf8_lossy(&r.stderr).contains("missing.txt"));
    assert!(r.stdout.is_empty());

    let r = nardec(&["evaluate", "--hyp", s(&one), "--ref", s(&two)]);
    assert_eq!(code(&r), 2);
}

#[test]
fn generate_is_repeatable_and_unrolls_ten_steps() {
    let dir = TempDir::new().unwrap();
    let ckpt = pretrain(dir.path(), "run", &[]);
    let input = write(dir.path(), "in.txt", "the cat sat\nhello there\nnumber 7 went\n");
    let run = |tag: &str| {
        let out = dir.path().join(format!("out-{tag}.txt"));
        let traces = dir.path().join(format!("traces-{tag}.jsonl"));
        let r = nardec(&["generate", "--checkpoint", s(&ckpt), "--input", s(&input), "--output", s(&out), "--traces", s(&traces)]);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
        (fs::read(&out).unwrap(), fs::read_to_string(&traces).unwrap())
    };
    let (a, traces) = run("a");
    let (b, _) = run("b");
    assert_eq!(a, b);
    assert_eq!(String::from_utf8_lossy(&a).lines().count(), 3);
    let traces: Vec<Value> = traces.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(traces.len(), 3);
    for t in &traces {
        assert_eq!(t["forward_pass_count"], 10);
        assert_eq!(t["snapshots"].as_array().unwrap().len(), 11);
        assert_eq!(t["snapshots"][0].as_array().unwrap().len(), 8);
    }
}

#[test]
fn generate_on_empty_input_writes_nothing() {
    let dir = TempDir::new().unwrap();
    let ckpt = pretrain(dir.path(), "run", &[]);
    let input = write(dir.path(), "empty.txt", "");
    let r = nardec(&["generate", "--checkpoint", s(&ckpt), "--input", s(&input)]);
    assert_eq!(code(&r), 0);
    assert!(r.stdout.is_empty());
}

#[test]
fn generate_rejects_a_corrupted_checkpoint() {
    let dir = TempDir::new().unwrap();
    let ckpt = pretrain(dir.path(), "run", &[]);
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&ckpt, bytes).unwrap();
    let input = write(dir.path(), "in.txt", "the cat\n");
    let r = nardec(&["generate", "--checkpoint", s(&ckpt), "--input", s(&input)]);
    assert_eq!(code(&r), 2);
}

#[test]
fn bench_counts_passes() {
    let dir = TempDir::new().unwrap();
    let bi = pretrain(dir.path(), "bi", &[]);
    let causal = pretrain(dir.path(), "causal", &["--set", "model.attention=causal", "--seed", "3"]);
    let r = nardec(&[
        "bench", "--bidirectional", s(&bi), "--causal", s(&causal), "--k", "8", "--steps", "2", "--runs", "3", "--prefix", "the cat",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let report = stdout_json(&r);
    assert_eq!(report["nar_forward_passes"], 2);
    assert_eq!(report["ar_forward_passes"], 8);
    assert_eq!(report["pass_ratio"].as_f64(), Some(4.0));
}

#[test]
fn oracle_reports_a_passing_check() {
    let r = nardec(&["oracle", "--vocab", "2", "--len", "1", "--steps", "1", "--samples", "20000", "--seed", "4"]);
    assert_eq!(code(&r), 0);
    let report = stdout_json(&r);
    assert_eq!(report["passed"], true);
    assert!(report["tv"].as_f64().unwrap() < 0.01);

    let r = nardec(&["oracle", "--vocab", "2", "--len", "1", "--steps", "0", "--samples", "100"]);
    assert_eq!(stdout_json(&r)["tv"].as_f64(), Some(0.0));
}

#[test]
fn stats_counts_and_packs_records() {
    let dir = TempDir::new().unwrap();
    let corpus = write(
        dir.path(),
        "pairs.jsonl",
        "{\"input\": \"abcd\", \"target\": \"xy\"}\n{\"input\": \"ef\", \"target\": \"zzzz\"}\n",
    );
    let config = write(
        dir.path(),
        "config.json",
        r#"{"task": "mt", "pipeline": {"prefix_len": 3, "target_len": 3, "input_budget": 3, "target_budget": 3}, "model": {"max_seq": 6}}"#,
    );
    let packed = dir.path().join("rows.narb");
    let r = nardec(&["stats", "--corpus", s(&corpus), "--pack", s(&packed), "--config", s(&config)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let report = stdout_json(&r);
    assert_eq!(report["count"], 2);
    assert_eq!(report["mean_input_len"].as_f64(), Some(3.0));
    assert_eq!(report["mean_target_len"].as_f64(), Some(3.0));
    assert_eq!(report["packed_rows"], 2);
    assert_eq!(report["input_truncated"], 1);
    assert_eq!(report["target_truncated"], 1);
    assert!(packed.exists());
}
