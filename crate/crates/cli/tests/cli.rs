use std::path::Path;
use std::process::{Command, Output};

fn deft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deft")).args(args).output().expect("binary runs")
}

fn small_sets(out: &Path) -> Vec<String> {
    [
        "model.d_model=16",
        "model.d_ff=32",
        "epochs=1",
        "batch_size=32",
        "data.train_size=96",
        "data.validation_size=32",
        "mode=ADA_DEFT",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([format!("output_dir={}", out.display())])
    .flat_map(|s| ["--set".to_string(), s])
    .collect()
}

fn run_with(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args: Vec<String> = vec![cmd.to_string()];
    args.extend(small_sets(out));
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    deft(&refs)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_then_evaluate_infer_and_prune() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run_with("train", &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["report.json", "layerwise_density.csv", "checkpoint.bin"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["mode"], "ADA_DEFT");
    assert!(report["trainable_percent"].as_f64().unwrap() > 0.0);

    let o = run_with("evaluate", &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("eval").join("report.json").exists());

    let o = run_with("infer", &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("full") && text.contains("skip") && text.contains("saving %"));

    let ck = out.join("checkpoint.bin");
    let o = run_with("prune-sweep", &out, &["--checkpoint", ck.to_str().unwrap(), "--set", "prune.levels=[0,0.5]"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("prune").join("sweep.csv")).unwrap();
    assert!(csv.starts_with("sparsity,metric,density_percent\n"));
    assert_eq!(csv.lines().count(), 3);

    let o = run_with("evaluate", &out, &["--set", "model.d_ff=48"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn compare_and_sweep_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("peft"), dir.path().join("deft"));
    assert!(run_with("train", &a, &["--set", "mode=PEFT"]).status.success());
    assert!(run_with("train", &b, &["--set", "mode=DEFT"]).status.success());
    let csv_path = dir.path().join("cmp.csv");
    let o = deft(&[
        "compare",
        a.join("report.json").to_str().unwrap(),
        b.join("report.json").to_str().unwrap(),
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("mode,metric,density_percent"));
    assert!(csv.lines().nth(1).unwrap().starts_with("PEFT,"));

    let s = dir.path().join("sweep");
    let o = run_with("sweep", &s, &["--set", "sweep.values=[0,1]"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(s.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("value,metric,density_percent\n"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(run_with("train", &out, &["--set", "model.heads=3"]).status.code(), Some(2));
    assert_eq!(run_with("train", &out, &["--set", "no_such_key=1"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(deft(&["train", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(deft(&["train", "--config", "/nonexistent/cfg.json"]).status.code(), Some(2));
}

#[test]
fn numerical_abort_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_with("train", &dir.path().join("nan"), &["--set", "optimizer.lr=1e300"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("numerical abort"));
}
