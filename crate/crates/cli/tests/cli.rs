use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.conf")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmstack"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(dir: &Path, p: &str) -> Vec<u8> {
    std::fs::read(dir.join(p)).unwrap_or_else(|e| panic!("{p}: {e}"))
}

#[test]
fn config_errors_exit_2_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[(&[&str], &str)] = &[
        (&["pretrain", "--set", "bogus.key=1"], "bogus.key"),
        (&["pretrain", "--set", "train.seq_len=abc"], "train.seq_len"),
        (&["pretrain", "--set", "model.n_kv_heads=3"], "model"),
        (&["pretrain", "--set", "stage.core.warmup_steps=5000"], "stage.core"),
        (&["pretrain", "--set", "pretrain.stages=core,core"], "pretrain.stages"),
        (&["pretrain", "--set", "optim.kind=lion"], "optim.kind"),
        (&["sft", "--steps", "0"], "steps"),
        (&["sample", "--steps", "3"], "steps"),
        (&["distill"], "distill.teacher"),
        (&["decontaminate", "--set", "decontam.benchmark=missing.txt", "--set", "decontam.corpus=missing.txt"], "decontam.benchmark"),
        (&["pretrain", "--config", "nope.conf"], "config"),
    ];
    for (i, (args, key)) in cases.iter().enumerate() {
        let out = format!("o{i}");
        let mut a = args.to_vec();
        a.extend(["--out", &out]);
        let o = run(dir.path(), &a);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).contains(key), "{args:?} should name `{key}`: {}", stderr(&o));
        assert!(!dir.path().join(&out).exists(), "{args:?} created its output directory");
    }
}

#[test]
fn checkpoint_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let s = smoke();
    let s = s.to_str().unwrap();
    ok(dir.path(), &["pretrain", "--config", s, "--out", "pt"]);
    // Written by another command.
    let o = run(dir.path(), &["sft", "--config", s, "--resume", "pt/final.ckpt", "--out", "x"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let o = run(dir.path(), &["eval", "--config", s, "--set", "init=absent.ckpt", "--out", "y"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    std::fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let o = run(dir.path(), &["pretrain", "--config", s, "--resume", "junk.ckpt", "--out", "z"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn diverging_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let s = smoke();
    let o = run(
        dir.path(),
        &["pretrain", "--config", s.to_str().unwrap(), "--set", "optim.kind=sgd", "--set", "stage.core.peak_lr=1e30", "--out", "nan"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("busy")).unwrap();
    std::fs::write(dir.path().join("busy/.lock"), "1\n").unwrap();
    let s = smoke();
    let o = run(dir.path(), &["pretrain", "--config", s.to_str().unwrap(), "--out", "busy"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("locked"), "{}", stderr(&o));
    assert!(!dir.path().join("busy/final.ckpt").exists());
}

#[test]
fn hundred_step_run_resumes_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = ["--set", "stage.core.steps=100", "--set", "stage.core.warmup_steps=10", "--set", "checkpoint.every=40", "--set", "data.docs_per_component=60"];
    let mut full = vec!["pretrain", "--out", "full"];
    full.extend(args);
    ok(d, &full);
    // An interrupted run leaves its last periodic checkpoint behind.
    let mut resumed = vec!["pretrain", "--out", "resumed", "--resume", "full/step-000040.ckpt"];
    resumed.extend(args);
    ok(d, &resumed);
    assert_eq!(read(d, "full/final.ckpt"), read(d, "resumed/final.ckpt"));
    assert_eq!(read(d, "full/step-000080.ckpt"), read(d, "resumed/step-000080.ckpt"));
    let steps: Vec<u64> = String::from_utf8(read(d, "resumed/metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps.first(), Some(&41));
    assert!(steps.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn training_commands_resume_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = smoke();
    let s = s.to_str().unwrap();
    ok(d, &["pretrain", "--config", s, "--out", "pt"]);
    ok(d, &["quantize", "--config", s, "--set", "init=pt/final.ckpt", "--out", "q"]);
    let cases: &[(&str, &[&str])] = &[
        ("pretrain", &["--set", "pretrain.stages=core,continued,context"]),
        ("sft", &["--set", "init=pt/final.ckpt"]),
        ("train-reward", &[]),
        ("distill", &["--set", "distill.teacher=pt/final.ckpt"]),
        ("prune", &["--set", "init=pt/final.ckpt"]),
        ("recover", &["--set", "init=q/final.ckpt"]),
        ("committee-rs", &[]),
        ("ablate-recipe", &["--set", "recipe.steps=4", "--set", "recipe.warmup_steps=1", "--set", "ablate.seeds=1"]),
    ];
    for (cmd, extra) in cases {
        let mut a = vec![*cmd, "--config", s, "--out"];
        let full = format!("{cmd}-full");
        let again = format!("{cmd}-again");
        let mut first = a.clone();
        first.push(&full);
        first.extend(extra.iter());
        ok(d, &first);
        let ck = if *cmd == "committee-rs" { format!("{full}/step-000000.ckpt") } else { format!("{full}/step-000002.ckpt") };
        a.push(&again);
        a.extend(extra.iter());
        a.extend(["--resume", &ck]);
        ok(d, &a);
        let main = if *cmd == "committee-rs" { "rs.jsonl" } else { "final.ckpt" };
        assert_eq!(read(d, &format!("{full}/{main}")), read(d, &format!("{again}/{main}")), "{cmd}");
    }
}

#[test]
fn run_directory_contents() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = smoke();
    let o = ok(d, &["pretrain", "--config", s.to_str().unwrap(), "--set", "pretrain.stages=core,context", "--out", "pt"]);
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["rope_base"].as_f64(), Some(6315089.0));
    assert_eq!(summary, serde_json::from_slice::<Value>(&read(d, "pt/summary.json")).unwrap());
    assert!(!d.join("pt/.lock").exists());
    // The resolved config reproduces the run on its own.
    ok(d, &["pretrain", "--config", "pt/config.resolved", "--out", "again"]);
    assert_eq!(read(d, "pt/final.ckpt"), read(d, "again/final.ckpt"));
    let resolved = String::from_utf8(read(d, "pt/config.resolved")).unwrap();
    assert!(resolved.contains("pretrain.stages = core,context"), "{resolved}");
}

#[test]
fn decontaminate_with_empty_benchmark_keeps_everything() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bench.jsonl"), "").unwrap();
    std::fs::write(d.join("corpus.jsonl"), "{\"id\":\"a\",\"text\":\"one two three four five\"}\n{\"id\":\"b\",\"text\":\"six seven eight nine ten\"}\n").unwrap();
    let o = ok(d, &["decontaminate", "--benchmark", "bench.jsonl", "--corpus", "corpus.jsonl", "--out", "dc"]);
    let s: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(s["dropped"], 0);
    assert_eq!(s["kept"], 2);
    assert!(read(d, "dc/report.jsonl").is_empty());
}

#[test]
fn decontaminate_reports_matches() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bench.txt"), "the quick brown fox jumps over the lazy dog\n").unwrap();
    std::fs::write(d.join("corpus.txt"), "yesterday the quick brown fox jumps again\nunrelated words only here\n").unwrap();
    let o = ok(d, &["decontaminate", "--benchmark", "bench.txt", "--corpus", "corpus.txt", "--out", "dc"]);
    let s: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(s["dropped"], 1);
    let report: Value = serde_json::from_slice(&read(d, "dc/report.jsonl")).unwrap();
    assert_eq!(report["id"], "1");
    assert!(report["matches"].as_array().unwrap().iter().any(|m| m["ngram"] == "the quick brown fox jumps"));
}

#[test]
fn recipe_ablation_writes_a_two_column_loss_table() {
    let dir = tempfile::tempdir().unwrap();
    let s = smoke();
    ok(
        dir.path(),
        &["ablate-recipe", "--config", s.to_str().unwrap(), "--set", "recipe.steps=3", "--set", "recipe.warmup_steps=1", "--set", "ablate.seeds=4,5", "--out", "ar"],
    );
    let table = String::from_utf8(read(dir.path(), "ar/table.tsv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "seed\tafm\tadamw\trel_diff");
    assert_eq!(lines.len(), 3);
    for l in &lines[1..] {
        let cols: Vec<&str> = l.split('\t').collect();
        assert!(cols[1].parse::<f64>().unwrap() > 0.0 && cols[2].parse::<f64>().unwrap() > 0.0);
    }
}
