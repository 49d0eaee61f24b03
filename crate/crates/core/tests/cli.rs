use std::path::Path;
use std::process::{Command, Output};

use cktf::harness::metrics::read_metrics;

fn cktf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cktf")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--set", "synthetic_classes=3",
    "--set", "synthetic_train_per_class=8",
    "--set", "synthetic_test_per_class=4",
    "--set", "synthetic_shape=2x6x6",
    "--set", "epochs=3",
    "--set", "batch_size=8",
    "--set", "negatives=8",
    "--set", "embed_dim=8",
    "--set", "teacher_spec=input=2x6x6 stages=4x2,6x2/2 classes=3",
    "--set", "student_spec=input=2x6x6 stages=2x1,3x1/2 classes=3",
    "--quiet",
];

fn run(sub: &str, dir: &Path, extra: &[&str]) -> Output {
    let out = format!("--output-dir={}", dir.display());
    let mut args = vec![sub, out.as_str()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    cktf(&args)
}

fn column(header: &[String], rows: &[Vec<String>], name: &str) -> Vec<f64> {
    let i = header.iter().position(|h| h == name).unwrap();
    rows.iter().map(|r| r[i].parse().unwrap()).collect()
}

#[test]
fn gradcheck_and_oracle_check_pass() {
    let o = cktf(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains(" 0 failed"));
    assert!(!stdout(&o).contains("FAIL"));
    let o = cktf(&["oracle-check"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("50 checks, 0 failed"));
}

#[test]
fn distill_without_teacher_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("distill", dir.path(), &["--set", "teacher_checkpoint=/no/such/teacher.ckpt"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("teacher_checkpoint"));
    let o = run("distill", dir.path(), &[]);
    assert_eq!(code(&o), 2);
}

#[test]
fn invalid_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for bad in ["tau=-1", "alpha1=x", "mapping=sideways", "nosuchkey=1", "batch_size=0"] {
        let o = run("train-teacher", dir.path(), &["--set", bad]);
        assert_eq!(code(&o), 2, "{bad}: {}", stderr(&o));
    }
    let cfg = dir.path().join("eval.cfg");
    std::fs::write(&cfg, "mode = eval\n").unwrap();
    let o = cktf(&["train-teacher", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "mode mismatch");
    assert_eq!(code(&cktf(&["train-teacher", "--bogus-flag"])), 2);
}

#[test]
fn runtime_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("broken.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let o = run("eval", dir.path(), &["--set", &format!("checkpoint={}", bad.display())]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn zero_alpha_override_leaves_ce_plus_kd() {
    let dir = tempfile::tempdir().unwrap();
    let teacher_dir = dir.path().join("teacher");
    assert_eq!(code(&run("train-teacher", &teacher_dir, &[])), 0);
    let teacher = format!("teacher_checkpoint={}", teacher_dir.join("teacher.ckpt").display());
    let out = dir.path().join("kd");
    let o = run(
        "distill",
        &out,
        &["--set", &teacher, "--set", "alpha1=0", "--set", "alpha2=0", "--set", "theta=1"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = read_metrics(&out.join("metrics.tsv")).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(column(&header, &rows, "loss_ckt").iter().all(|&v| v == 0.0));
    // per-site losses are still reported, they just carry no weight
    assert!(column(&header, &rows, "loss_module_0").iter().all(|&v| v > 0.0));
    let (total, ce, kd) = (
        column(&header, &rows, "loss_total"),
        column(&header, &rows, "loss_ce"),
        column(&header, &rows, "loss_distill"),
    );
    for i in 0..rows.len() {
        assert!(kd[i] > 0.0);
        assert!((total[i] - (ce[i] + kd[i])).abs() <= 1e-12 * total[i]);
    }
}

#[test]
fn config_file_run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let out = dir.path().join("out");
    std::fs::write(
        &cfg,
        format!(
            "# tiny teacher\nmode = train_teacher\noutput_dir = {}\nseed = 4\n\nsynthetic_classes = 3\nsynthetic_shape = 2x6x6\n\
             synthetic_train_per_class = 8\nsynthetic_test_per_class = 4\nepochs = 2\nbatch_size = 8\n\
             teacher_spec = input=2x6x6 stages=4x1,6x1/2 classes=3\n",
            out.display()
        ),
    )
    .unwrap();
    let o = cktf(&["train-teacher", "--config", cfg.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["config.txt", "metrics.tsv", "timing.tsv", "summary.json", "teacher.ckpt"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["mode"], "train_teacher");
    assert_eq!(summary["epochs"], 2);
    assert_eq!(serde_json::from_str::<serde_json::Value>(&stdout(&o)).unwrap(), summary);

    // the echoed config reproduces the run
    let echo = out.join("config.txt");
    let again = dir.path().join("again");
    let o = cktf(&["train-teacher", "--config", echo.to_str().unwrap(), "--output-dir", again.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(out.join("teacher.ckpt")).unwrap(), std::fs::read(again.join("teacher.ckpt")).unwrap());
}

#[test]
fn desk_teacher_fits_train_and_generalizes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk_teacher.cfg");
    let out = dir.path().join("teacher");
    // trained long enough without weight decay to fit its own training set
    let o = cktf(&[
        "train-teacher", "--config", cfg, "--output-dir", out.to_str().unwrap(), "--quiet",
        "--set", "epochs=150", "--set", "weight_decay=0",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = out.join("teacher.ckpt");
    let o = cktf(&[
        "eval",
        "--output-dir",
        dir.path().join("eval").to_str().unwrap(),
        "--set",
        &format!("checkpoint={}", ckpt.display()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let (train, test) = (s["final_train_acc"].as_f64().unwrap(), s["final_test_acc"].as_f64().unwrap());
    assert!(test >= 0.95, "test accuracy {test}");
    assert!(train > test, "train {train} test {test}");
}
