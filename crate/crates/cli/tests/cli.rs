use std::path::Path;
use std::process::{Command, Output};

fn qzo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qzo")).args(args).output().expect("run qzo")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL: &str = "steps = 300\nlearning_rate = 1e-3\ngroup_size = 4\nclip_threshold = 100\n\
                     dataset = two-gaussians:n=200,seed=1\n";

#[test]
fn train_writes_logs_and_layers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.conf", SMALL);
    let out = dir.path().join("run");
    let o = qzo(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--eval-every", "100"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let steps = std::fs::read_to_string(out.join("steps.csv")).unwrap();
    assert!(steps.starts_with("step,loss,d,d_clipped,lr,wall_ms\n"));
    assert_eq!(steps.lines().count(), 301);
    let evals = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    assert!(evals.lines().any(|l| l.starts_with("100,test,accuracy,")));
    assert!(out.join("layer_0.qzol").exists());
    assert!(out.join("run_header.txt").exists());
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.conf", SMALL);
    let mut logs = Vec::new();
    for name in ["r1", "r2"] {
        let out = dir.path().join(name);
        let o = qzo(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--deterministic"]);
        assert!(o.status.success(), "{}", stderr(&o));
        logs.push((
            std::fs::read(out.join("steps.csv")).unwrap(),
            std::fs::read(out.join("layer_0.qzol")).unwrap(),
        ));
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    for body in ["steps = 0\n", "steps = 10\nmomentum = 0.9\n", "model = transformer\n"] {
        let cfg = write_config(dir.path(), "bad.conf", body);
        let o = qzo(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{body:?}: {}", stderr(&o));
    }
}

#[test]
fn zero_threshold_reproduces_zero_shot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.conf", SMALL);
    let out = dir.path().join("run");
    let o = qzo(&["train", "--config", &cfg, "--clip", "0", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    let metric = |prefix: &str| {
        text.lines()
            .find(|l| l.starts_with(prefix))
            .and_then(|l| l.rsplit('=').next())
            .unwrap()
            .trim()
            .to_string()
    };
    assert_eq!(metric("zero-shot"), metric("final"));
}

#[test]
fn verify_refuses_tiny_sample() {
    let o = qzo(&["verify-unbiased", "--problem", "linear", "--samples", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sample count too small"));
}

#[test]
fn verify_linear_passes() {
    let o = qzo(&["verify-unbiased", "--problem", "linear", "--samples", "20000"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("mean within 3 SE on every coordinate: true"));
}

#[test]
fn memory_table() {
    let o = qzo(&["account-memory", "--params", "7e9", "--modes", "finetune-bf16-adamw16,qzo-4bit"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let row: Vec<&str> = text
        .lines()
        .find(|l| l.starts_with("finetune-bf16-adamw16"))
        .unwrap()
        .split_whitespace()
        .collect();
    assert_eq!(&row[1..6], &["14", "14", "28", "0", "56"]);
    let qzo_row: Vec<&str> = text.lines().find(|l| l.starts_with("qzo-4bit")).unwrap().split_whitespace().collect();
    assert_eq!(&qzo_row[1..5], &["3.5", "0", "0", "0.438"]);

    let o = qzo(&["account-memory", "--params", "7e9", "--modes", "adam8bit"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn quantize_then_estimate_twice() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("w.csv");
    std::fs::write(&weights, "0.5,-1.0,0.25,2.0\n").unwrap();
    let layer = dir.path().join("l.qzol");
    let o = qzo(&[
        "quantize",
        "--weights",
        weights.to_str().unwrap(),
        "--bits",
        "4",
        "--group-size",
        "2",
        "--bias",
        "0.1",
        "--out",
        layer.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let data = dir.path().join("d.csv");
    std::fs::write(&data, "a,b,c,d,label\n1,2,3,4,1.5\n0,1,0,1,-0.5\n").unwrap();
    let before = std::fs::read(&layer).unwrap();
    let spec = format!("csv:{}#label", data.display());
    let args = ["estimate-once", "--layer", layer.to_str().unwrap(), "--dataset", &spec, "--seed", "7"];
    let a = qzo(&args);
    let b = qzo(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).contains("loss_plus"));
    assert_eq!(std::fs::read(&layer).unwrap(), before);
}

#[test]
fn ablation_dedups_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.conf", SMALL);
    let table = dir.path().join("t.csv");
    let o = qzo(&[
        "ablate-clipping",
        "--config",
        &cfg,
        "--thresholds",
        "0,inf,0",
        "--repeats",
        "2",
        "--out",
        table.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("duplicate clipping threshold 0"));
    let csv = std::fs::read_to_string(&table).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let zero: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(zero[0], "0");
    assert_eq!(zero[1], zero[2], "C=0 keeps the zero-shot metric");
}
