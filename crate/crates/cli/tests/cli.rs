use std::path::Path;
use std::process::{Command, Output};

fn mcf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcf"))
        .args(args)
        .output()
        .expect("spawn mcf")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen_small(dir: &Path) -> Output {
    mcf(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "3",
        "--train-size",
        "64",
        "--dev-size",
        "16",
        "--test-size",
        "16",
    ])
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&mcf(&["param-count", "--no-such-flag"])), 1);
    assert_eq!(code(&mcf(&["frobnicate"])), 1);
    assert_eq!(code(&mcf(&["param-count", "--kernels", "8,16"])), 1);
    assert_eq!(code(&mcf(&["param-count", "--fusion", "product"])), 1);
    assert_eq!(code(&mcf(&["--help"])), 0);
}

#[test]
fn param_count_compare_reports_deltas() {
    let out = mcf(&["param-count", "--compare"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    for label in ["sum", "weighted", "concat", "depth", "csgu", "conformer"] {
        assert!(
            text.lines().any(|l| l.starts_with(label)),
            "missing {label} in\n{text}"
        );
    }

    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("report.json");
    let out = mcf(&["param-count", "--compare", "--out", json.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 6);
}

#[test]
fn missing_config_is_a_runtime_failure() {
    let out = mcf(&["param-count", "--config", "/nonexistent/config.json"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gen_data_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen_small(dir.path())), 0);
    let again = gen_small(dir.path());
    assert_ne!(code(&again), 0);
    assert!(String::from_utf8_lossy(&again.stderr).contains("already holds a dataset"));
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("grad.json");
    let out = mcf(&[
        "grad-check",
        "--reps",
        "1",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert!(v["cases"].as_array().unwrap().len() > 40);
}

#[test]
fn train_eval_analyze_flow() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert_eq!(code(&gen_small(&data)), 0);
    let (data_s, run_s) = (data.to_str().unwrap(), run.to_str().unwrap());

    let out = mcf(&[
        "train", "--data", data_s, "--out", run_s, "--steps", "4", "--fusion", "weighted",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.json", "metrics.jsonl", "best.ckpt", "last.ckpt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let ckpt = run.join("best.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();

    let csv = dir.path().join("eval.csv");
    let out = mcf(&[
        "eval",
        "--checkpoint",
        ckpt_s,
        "--data",
        data_s,
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("TER"));
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 17);

    let out = mcf(&[
        "analyze",
        "diagonality",
        "--checkpoint",
        ckpt_s,
        "--data",
        data_s,
        "--limit",
        "4",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).starts_with("layer,value"));

    let out = mcf(&[
        "analyze",
        "gate-importance",
        "--checkpoint",
        ckpt_s,
        "--data",
        data_s,
        "--limit",
        "4",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).starts_with("layer,k3,k7,k11,k15"));
    assert_eq!(stdout(&out).lines().count(), 3);
}

#[test]
fn gate_importance_rejects_unweighted_models() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert_eq!(code(&gen_small(&data)), 0);
    let out = mcf(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--steps",
        "1",
        "--fusion",
        "depth",
    ]);
    assert_eq!(code(&out), 0);
    let out = mcf(&[
        "analyze",
        "gate-importance",
        "--checkpoint",
        run.join("last.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}
