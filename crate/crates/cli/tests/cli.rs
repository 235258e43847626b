use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

const BIN: &str = env!("CARGO_BIN_EXE_riskfuse");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A cohort and a briefly trained checkpoint shared by the tests.
fn fixture() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let o = run(dir.path(), &["gen", "--config", "default", "--out", "c.jsonl", "--n", "300", "--seed", "9"]);
        assert_eq!(code(&o), 0, "{o:?}");
        let o = run(dir.path(), &["train", "--cohort", "c.jsonl", "--out", "m.ckpt", "--seed", "1", "--epochs", "2"]);
        assert_eq!(code(&o), 0, "{o:?}");
        dir
    })
    .path()
}

#[test]
fn usage_errors_exit_1_with_message() {
    let dir = fixture();
    for args in [
        &["frobnicate"][..],
        &["eval", "--cohort", "c.jsonl"],
        &["eval", "--cohort", "c.jsonl", "--ckpt", "m.ckpt", "--bogus"],
        &["eval", "--cohort", "c.jsonl", "--ckpt", "m.ckpt", "--ablation", "audio_only"],
        &["explain", "--ckpt", "m.ckpt", "--cohort", "c.jsonl", "--patient", "P001", "--target", "gout"],
        &["train", "--cohort", "c.jsonl", "--out", "c.jsonl", "--seed", "1"],
        &[],
    ] {
        let o = run(dir, args);
        assert_eq!(code(&o), 1, "{args:?}: {o:?}");
        assert!(!o.stderr.is_empty(), "{args:?}");
    }
    for args in [&["--help"][..], &["eval", "--help"], &["serve", "--help"]] {
        let o = run(dir, args);
        assert_eq!(code(&o), 0, "{args:?}");
        assert!(stdout(&o).contains("Usage"));
    }
}

#[test]
fn unreadable_or_corrupt_inputs_exit_2() {
    let dir = fixture();
    let scratch = tempfile::tempdir().unwrap();
    std::fs::copy(dir.join("m.ckpt"), scratch.path().join("m.ckpt")).unwrap();
    std::fs::copy(dir.join("c.jsonl"), scratch.path().join("c.jsonl")).unwrap();
    let mut bytes = std::fs::read(dir.join("m.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(scratch.path().join("flipped.ckpt"), bytes).unwrap();
    std::fs::write(scratch.path().join("garbage.jsonl"), "not json\n").unwrap();
    std::fs::write(scratch.path().join("bad.conf"), "listen = nowhere\n").unwrap();

    for args in [
        &["eval", "--cohort", "missing.jsonl", "--ckpt", "m.ckpt"][..],
        &["eval", "--cohort", "c.jsonl", "--ckpt", "missing.ckpt"],
        &["eval", "--cohort", "c.jsonl", "--ckpt", "flipped.ckpt"],
        &["eval", "--cohort", "garbage.jsonl", "--ckpt", "m.ckpt"],
        &["train", "--cohort", "missing.jsonl", "--out", "x.ckpt", "--seed", "1"],
        &["gen", "--config", "missing.json", "--out", "x.jsonl"],
        &["explain", "--ckpt", "m.ckpt", "--cohort", "c.jsonl", "--patient", "NOPE"],
        &["serve", "--config", "missing.conf"],
        &["serve", "--config", "bad.conf"],
    ] {
        let o = run(scratch.path(), args);
        assert_eq!(code(&o), 2, "{args:?}: {o:?}");
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"), "{args:?}");
    }
}

#[test]
fn training_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // Every record negative for hypertension: training must refuse.
    std::fs::write(dir.path().join("cfg.json"), r#"{"n_patients": 10, "prevalence": {"diabetes": 0.3, "heart": 0.3, "hypertension": 0.01}}"#).unwrap();
    let o = run(dir.path(), &["gen", "--config", "cfg.json", "--out", "c.jsonl"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let o = run(dir.path(), &["train", "--cohort", "c.jsonl", "--out", "m.ckpt", "--seed", "1"]);
    assert_eq!(code(&o), 3, "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("hypertension"));
}

#[test]
fn eval_renders_table_rows_and_csv_without_touching_inputs() {
    let dir = fixture();
    let before = std::fs::read(dir.join("c.jsonl")).unwrap();
    let out = tempfile::tempdir().unwrap();
    let csv = out.path().join("m.csv");
    let o = run(dir, &["eval", "--cohort", "c.jsonl", "--ckpt", "m.ckpt", "--csv", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{o:?}");
    let table = stdout(&o);
    for label in ["Hypertension (n=", "Heart disease (n=", "Diabetes (n="] {
        assert!(table.contains(label), "{table}");
    }
    let lines: Vec<&str> = table.lines().collect();
    let diabetes = lines.iter().position(|l| l.starts_with("Diabetes")).unwrap();
    assert!(lines[diabetes].contains("fused"));
    assert!(lines[diabetes + 1].contains("text_only"));
    assert!(lines[diabetes + 2].contains("labs_only"));

    let csv = std::fs::read_to_string(csv).unwrap();
    assert_eq!(csv.lines().next(), Some("disease,ablation,n_pos,precision,recall,f1,threshold"));
    assert_eq!(std::fs::read(dir.join("c.jsonl")).unwrap(), before);

    let o = run(dir, &["eval", "--cohort", "c.jsonl", "--ckpt", "m.ckpt", "--ablation", "text-only", "--json"]);
    let reports: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 1);
    assert_eq!(reports[0]["ablation"], "text_only");
}

#[test]
fn explain_output_is_efficient() {
    let dir = fixture();
    let o = run(
        dir,
        &["explain", "--ckpt", "m.ckpt", "--cohort", "c.jsonl", "--patient", "P042", "--target", "diabetes", "--mode", "exact", "--json"],
    );
    assert_eq!(code(&o), 0, "{o:?}");
    let e: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let sum: f64 = e["attributions"].as_array().unwrap().iter().map(|a| a["phi"].as_f64().unwrap()).sum();
    let gap = e["prediction"].as_f64().unwrap() - e["baseline"].as_f64().unwrap();
    assert!((sum - gap).abs() < 1e-6, "{sum} vs {gap}");
    assert_eq!(e["mode"], "exact");

    let o = run(dir, &["explain", "--ckpt", "m.ckpt", "--cohort", "c.jsonl", "--patient", "P042", "--mode", "sampled", "--permutations", "50"]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(stdout(&o).contains("50 permutations"));
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let dir = fixture();
    let out = tempfile::tempdir().unwrap();
    let a = out.path().join("a.ckpt");
    let b = out.path().join("b.ckpt");
    for p in [&a, &b] {
        let o = run(dir, &["train", "--cohort", "c.jsonl", "--out", p.to_str().unwrap(), "--seed", "1", "--epochs", "2"]);
        assert_eq!(code(&o), 0, "{o:?}");
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(dir.join("m.ckpt")).unwrap());
}

#[test]
fn gradcheck_passes_and_reports() {
    let o = run(Path::new("."), &["gradcheck", "--seed", "4", "--json"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(r["max_rel_error"].as_f64().unwrap() < 1e-4);
}
