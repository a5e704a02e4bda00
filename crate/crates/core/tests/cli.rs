use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wsag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsag"))
        .args(args)
        .env("WSAG_THREADS", "0")
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gradcheck_passes_on_default_dims() {
    let out = wsag(&["gradcheck", "--seed", "7"]);
    let stdout = text(&out.stdout);
    assert!(out.status.success(), "{stdout}{}", text(&out.stderr));
    assert!(stdout.contains("max relative error"));
    assert!(stdout.trim_end().ends_with("PASS"), "{stdout}");
}

#[test]
fn gradcheck_reports_fail_with_nonzero_exit() {
    // an impossible tolerance must fail loudly, not pass
    let out = wsag(&["gradcheck", "--seed", "1", "--clips", "3", "--d-v", "2", "--d-s", "2", "--d-h", "3", "--tolerance", "0"]);
    assert!(!out.status.success());
    assert!(text(&out.stdout).trim_end().ends_with("FAIL"));
}

#[test]
fn oracle_scores_recover_noise_free_segments() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let gen = wsag(&["generate", "--out", p(&data), "--set", "noise_sigma=0"]);
    assert!(gen.status.success(), "{}", text(&gen.stderr));
    let test = data.join("test/manifest.tsv");
    let preds = dir.path().join("pred.tsv");
    let inf = wsag(&["infer", "--data", p(&test), "--oracle", "--out", p(&preds)]);
    assert!(inf.status.success(), "{}", text(&inf.stderr));
    let tsv = dir.path().join("eval.tsv");
    let ev = wsag(&["eval", "--data", p(&test), "--predictions", p(&preds), "--tsv", p(&tsv)]);
    assert!(ev.status.success(), "{}", text(&ev.stderr));
    assert!(text(&ev.stdout).contains("per task"));
    let report = fs::read_to_string(&tsv).unwrap();
    let row = report
        .lines()
        .find(|l| l.starts_with("all\tsentence R@K\t10\t0.5\t"))
        .expect("sentence R@10 row");
    let value: f64 = row.split('\t').nth(4).unwrap().parse().unwrap();
    assert_eq!(value, 1.0, "{row}");
}

#[test]
fn missing_config_is_a_file_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = wsag(&["train", "--config", "missing.cfg", "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert_ne!(out.status.code(), Some(2));
    let stderr = text(&out.stderr);
    assert!(stderr.contains("missing.cfg"), "{stderr}");
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(wsag(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(wsag(&["gradcheck", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(wsag(&[]).status.code(), Some(2));
}

#[test]
fn bad_config_values_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "ss_kernel = 4\n").unwrap();
    let out = wsag(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("ss_kernel"));
}

#[test]
fn rerunning_from_run_lock_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let gen = wsag(&[
        "generate", "--out", p(&data), "--set", "num_tasks=3", "--set", "videos_per_task=2", "--set", "num_clips=6",
        "--set", "clip_dim=8", "--set", "sent_dim=8", "--set", "high_per_article=3", "--set", "distractor_count=1",
    ]);
    assert!(gen.status.success(), "{}", text(&gen.stderr));
    let first = dir.path().join("a");
    let tr = wsag(&[
        "train", "--data", p(&data.join("train/manifest.tsv")), "--out", p(&first), "--set", "d_h=6", "--set",
        "num_clips=6", "--set", "epochs=3", "--set", "warmup_epochs=1", "--set", "batch_size=2", "--set", "lr=1e-3",
    ]);
    assert!(tr.status.success(), "{}", text(&tr.stderr));
    let second = dir.path().join("b");
    let again = wsag(&["train", "--config", p(&first.join("run.lock")), "--out", p(&second)]);
    assert!(again.status.success(), "{}", text(&again.stderr));
    for f in ["model.ckpt", "last.ckpt", "train.log", "run.lock"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f} differs");
    }
    let rep = wsag(&["report", "--log", p(&first.join("train.log"))]);
    assert!(rep.status.success());
    assert_eq!(text(&rep.stdout).lines().count(), 4);
}
