use std::path::Path;
use std::process::{Command, Output};

use obim_core::bench::{finetune_all, make_task_suite, Finetune, SuiteConfig, TaskSuite};
use obim_core::calib::INPUTS_TENSOR;
use obim_core::{write_checkpoint, TensorMap};
use tempfile::TempDir;

fn obim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_obim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"))
}

fn write_json(dir: &Path, name: &str, v: &serde_json::Value) -> String {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

/// Writes base, fine-tuned models, per-task inputs and the spec of a
/// two-task suite into `dir`.
fn fixture(dir: &Path) -> TaskSuite {
    let mut cfg = SuiteConfig::new(4, 2, 8, 3, 100);
    cfg.bias = true;
    let suite = make_task_suite(&cfg).unwrap();
    let models = finetune_all(&suite, Finetune::ClosedForm { ridge: 0.0 }).unwrap();
    write_checkpoint(&suite.base, dir.join("base.safetensors")).unwrap();
    for (k, m) in models.iter().enumerate() {
        write_checkpoint(m, dir.join(format!("m{k}.safetensors"))).unwrap();
        let mut inputs = TensorMap::new();
        inputs.insert(INPUTS_TENSOR, suite.tasks[k].inputs.clone());
        write_checkpoint(&inputs, dir.join(format!("calib{k}.safetensors"))).unwrap();
        let stats_cfg = serde_json::json!({
            "spec": suite.spec,
            "weights_path": format!("m{k}.safetensors"),
            "inputs_path": format!("calib{k}.safetensors"),
            "output_path": format!("stats{k}.safetensors"),
        });
        let path = write_json(dir, &format!("stats{k}.json"), &stats_cfg);
        let o = obim(&["stats", "--config", &path]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    suite
}

fn merge_config(suite: &TaskSuite, method: &str) -> serde_json::Value {
    serde_json::json!({
        "base_path": "base.safetensors",
        "models": [
            {"path": "m0.safetensors", "ratio": 0.5, "stats_path": "stats0.safetensors"},
            {"path": "m1.safetensors", "ratio": 0.5, "stats_path": "stats1.safetensors"},
        ],
        "method": method,
        "seed": 7,
        "output_path": "merged.safetensors",
        "spec": suite.spec,
    })
}

#[test]
fn stats_reports_counts_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    fixture(dir.path());
    let path = dir.path().join("stats0.json");
    let o = obim(&["stats", "--config", path.to_str().unwrap()]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("l0.weight: 8 features"), "{out}");
    assert!(out.contains("samples: 100"), "{out}");
    let first = std::fs::read(dir.path().join("stats0.safetensors")).unwrap();
    let o = obim(&[
        "stats",
        "--config",
        path.to_str().unwrap(),
        "--output",
        dir.path().join("again.safetensors").to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(first, std::fs::read(dir.path().join("again.safetensors")).unwrap());
}

#[test]
fn stats_rejects_empty_inputs() {
    let dir = TempDir::new().unwrap();
    let suite = fixture(dir.path());
    // Zero-row inputs tensor, written by hand.
    let header = br#"{"inputs":{"dtype":"F32","shape":[0,8],"data_offsets":[0,0]}}"#;
    let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
    bytes.extend_from_slice(header);
    std::fs::write(dir.path().join("empty.safetensors"), bytes).unwrap();
    let cfg = serde_json::json!({
        "spec": suite.spec,
        "weights_path": "m0.safetensors",
        "inputs_path": "empty.safetensors",
        "output_path": "s.safetensors",
    });
    let o = obim(&["stats", "--config", &write_json(dir.path(), "bad.json", &cfg)]);
    assert!(!o.status.success());
    assert_eq!(stderr_json(&o)["field"], "inputs_path");
}

#[test]
fn obim_merge_writes_checkpoint_and_disjoint_report() {
    let dir = TempDir::new().unwrap();
    let suite = fixture(dir.path());
    let cfg = write_json(dir.path(), "merge.json", &merge_config(&suite, "OBIM"));
    let o = obim(&["merge", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = stdout(&o);
    let mut lines = report.lines();
    assert_eq!(lines.next().unwrap(), obim_cli::commands::MERGE_REPORT_HEADER);
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0], "OBIM");
        assert_eq!(cols[7], "true");
        assert_eq!(cols[9], "0");
    }
    assert!(dir.path().join("merged.safetensors").exists());

    let o = obim(&["report", "--config", &cfg]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().nth(1).unwrap().ends_with(",0"));
}

#[test]
fn constraint_violations_name_the_field() {
    let dir = TempDir::new().unwrap();
    let suite = fixture(dir.path());
    let mut v = merge_config(&suite, "OBIM");
    v["models"][0]["ratio"] = serde_json::json!(0.6);
    v["models"][1]["ratio"] = serde_json::json!(0.6);
    let o = obim(&["merge", "--config", &write_json(dir.path(), "bad.json", &v)]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    assert_eq!(e["code"], "ratio_sum");
    assert_eq!(e["field"], "models");

    for name in ["DELLA", "TALL-Mask", "PCB"] {
        let cfg = write_json(dir.path(), "m.json", &merge_config(&suite, "OBIM"));
        let o = obim(&["merge", "--config", &cfg, "--method", name]);
        assert_eq!(o.status.code(), Some(2));
        assert_eq!(stderr_json(&o)["code"], "unavailable_method");
        assert!(!dir.path().join("merged.safetensors").exists());
    }

    let o = obim(&[
        "merge",
        "--config",
        &write_json(dir.path(), "broken.json", &serde_json::json!({"base_path": 3})),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["field"], "base_path");

    let mut v = merge_config(&suite, "TA");
    v["models"][1]["path"] = serde_json::json!("missing.safetensors");
    let o = obim(&["merge", "--config", &write_json(dir.path(), "missing.json", &v)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["code"], "io");
    assert_eq!(stderr_json(&o)["field"], "models[1].path");
}

#[test]
fn effective_config_echo_round_trips() {
    let dir = TempDir::new().unwrap();
    let suite = fixture(dir.path());
    let mut v = merge_config(&suite, "ties+im");
    v["models"][1].as_object_mut().unwrap().remove("ratio");
    let cfg = write_json(dir.path(), "merge.json", &v);
    let o = obim(&["merge", "--config", &cfg, "--seed", "11", "--print-config"]);
    assert!(o.status.success());
    let echoed = stdout(&o);
    let parsed: obim_cli::config::RunConfig = obim_cli::config::parse_json(&echoed).unwrap();
    assert_eq!(parsed.seed, 11);
    assert_eq!(parsed.method, "TIES+IM");
    assert_eq!(parsed.models[1].ratio, Some(0.5));
    let again = write_json(dir.path(), "echo.json", &serde_json::from_str(&echoed).unwrap());
    let o2 = obim(&["merge", "--config", &again, "--print-config"]);
    assert_eq!(stdout(&o2), echoed);
    assert!(!dir.path().join("merged.safetensors").exists());
}

#[test]
fn every_available_method_merges() {
    let dir = TempDir::new().unwrap();
    let suite = fixture(dir.path());
    for m in ["TA", "TIES", "DARE", "TIES+OBM", "TIES+IM", "OBIM"] {
        let cfg = write_json(dir.path(), "merge.json", &merge_config(&suite, m));
        let o = obim(&["merge", "--config", &cfg]);
        assert!(o.status.success(), "{m}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

fn bench_config(tasks: usize, methods: &[&str]) -> serde_json::Value {
    serde_json::json!({
        "suite": {"seed": 3, "tasks": tasks, "d_in": 8, "d_out": 3, "samples": 120, "bias": true},
        "methods": methods,
    })
}

fn parse_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn bench_obim_beats_task_arithmetic_on_disjoint_tasks() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(dir.path(), "bench.json", &bench_config(2, &["TA", "TIES", "OBIM"]));
    let o = obim(&["bench", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = parse_rows(&stdout(&o));
    let loss = |method: &str, task: &str| -> f64 {
        rows.iter().find(|r| r[0] == method && r[1] == task).unwrap()[4]
            .parse()
            .unwrap()
    };
    for task in ["task0", "task1"] {
        assert!(loss("OBIM", task) <= loss("TA", task), "{task}");
    }
}

#[test]
fn single_task_bench_matches_finetune() {
    let dir = TempDir::new().unwrap();
    let mut v = bench_config(1, &["TA", "TIES", "DARE", "TIES+OBM", "TIES+IM", "OBIM"]);
    v["drop_p"] = serde_json::json!(0.0);
    let o = obim(&["bench", "--config", &write_json(dir.path(), "b.json", &v)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for r in parse_rows(&stdout(&o)) {
        let ft: f64 = r[3].parse().unwrap();
        let merged: f64 = r[4].parse().unwrap();
        assert!((ft - merged).abs() <= 1e-6 * ft.max(1e-6), "{r:?}");
    }
}

#[test]
fn bench_output_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(dir.path(), "bench.json", &bench_config(2, &["TA", "DARE", "OBIM"]));
    let a = obim(&["bench", "--config", &cfg]);
    let b = obim(&["--threads", "2", "bench", "--config", &cfg]);
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, b.stdout);
    let c = obim(&["bench", "--config", &cfg, "--seed", "99"]);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn zero_threads_is_a_usage_error() {
    let o = obim(&["--threads", "0", "report", "--config", "nowhere.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["code"], "usage");
}
