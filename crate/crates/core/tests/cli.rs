use std::path::Path;
use std::process::{Command, Output};

use coda::backbone::TrainConfig;
use coda::experiment::ExperimentConfig;
use coda::synth::SynthConfig;
use coda::trainer::TuneConfig;

fn coda(args: &[&str], dir: &Path, seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_coda"));
    cmd.args(args).current_dir(dir).env_remove("CODA_SEED");
    if let Some(s) = seed {
        cmd.env("CODA_SEED", s);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn failed(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(err.starts_with("error:"), "{err}");
    err
}

fn write_config(dir: &Path, seeds: Vec<u64>) {
    let synth = SynthConfig { learners: 30, mean_length: 10, ..SynthConfig::default() };
    let cfg = ExperimentConfig {
        synth: Some(synth),
        backbone: TrainConfig { epochs: 2, ..TrainConfig::default() },
        coda: TuneConfig { epochs: 1, ..TuneConfig::default() },
        seeds,
        ..ExperimentConfig::default()
    };
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    std::fs::write(dir.join("synth.json"), serde_json::to_string_pretty(&synth).unwrap()).unwrap();
}

#[test]
fn stages_chain_through_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, vec![4]);

    ok(&coda(&["train-backbone", "--config", "config.json", "--out", "backbone.ckpt"], dir, None));
    ok(&coda(&["tune", "--backbone", "backbone.ckpt", "--config", "config.json", "--out", "coda.ckpt"], dir, None));

    let plain: serde_json::Value = serde_json::from_str(&ok(&coda(&["eval", "--backbone", "backbone.ckpt"], dir, None))).unwrap();
    let tuned: serde_json::Value =
        serde_json::from_str(&ok(&coda(&["eval", "--backbone", "backbone.ckpt", "--coda", "coda.ckpt"], dir, None))).unwrap();
    for m in [&plain, &tuned] {
        let auc = m["auc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&auc));
    }
    assert_eq!(plain["count"], tuned["count"]);

    let scores: serde_json::Value = serde_json::from_str(&ok(&coda(
        &["identify-noise", "--coda", "coda.ckpt", "--out", "roles.jsonl", "--dump-graphs", "graphs"],
        dir,
        None,
    )))
    .unwrap();
    assert!(scores["unwanted"]["f1"].is_number());
    let roles = std::fs::read_to_string(dir.join("roles.jsonl")).unwrap();
    for line in roles.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["learner"].is_string() && v["roles"].is_array());
        assert!(dir.join("graphs").join(format!("{}.edges", v["learner"].as_str().unwrap())).is_file());
    }

    let args =
        ["trace", "--backbone", "backbone.ckpt", "--coda", "coda.ckpt", "--learner", "s0000", "--concept", "0", "--out", "trace.csv"];
    ok(&coda(&args, dir, None));
    let trace = std::fs::read_to_string(dir.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,role,raw,corrected\n") && trace.lines().count() > 1);

    let mut bad = args;
    bad[6] = "nobody";
    assert!(failed(&coda(&bad, dir, None)).contains("unknown learner"));

    ok(&coda(&["synth", "--config", "synth.json", "--out", "bench"], dir, None));
    let external = ["eval", "--backbone", "backbone.ckpt", "--dataset", "bench/dataset.jsonl"];
    let m: serde_json::Value = serde_json::from_str(&ok(&coda(&external, dir, None))).unwrap();
    assert!(m["count"].as_u64().unwrap() > plain["count"].as_u64().unwrap());
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), vec![1]);
    ok(&coda(&["sweep", "--config", "config.json", "--out", "sweep.csv", "--values", "0.2,0.6"], tmp.path(), None));
    let csv = std::fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("0.2,") && rows[1].starts_with("0.6,"));
}

#[test]
fn seed_variable_overrides_config_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, vec![1, 2]);
    ok(&coda(&["run", "--config", "config.json", "--out", "report.json"], dir, Some("5")));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    let seeds: Vec<u64> = report["seeds"].as_array().unwrap().iter().map(|s| s["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, vec![5]);
    assert_eq!(report["config"]["seeds"], serde_json::json!([5]));

    ok(&coda(&["synth", "--config", "synth.json", "--out", "a"], dir, Some("1")));
    ok(&coda(&["synth", "--config", "synth.json", "--out", "b"], dir, Some("2")));
    let read = |d: &str| std::fs::read(dir.join(d).join("dataset.jsonl")).unwrap();
    assert_ne!(read("a"), read("b"));

    assert!(failed(&coda(&["run", "--config", "config.json", "--out", "x.json"], dir, Some("seven"))).contains("CODA_SEED"));
}

#[test]
fn failures_exit_nonzero_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert!(failed(&coda(&["run", "--config", "missing.json", "--out", "r.json"], dir, None)).contains("missing.json"));

    write_config(dir, vec![]);
    assert!(failed(&coda(&["run", "--config", "config.json", "--out", "r.json"], dir, None)).contains("seeds"));

    std::fs::write(dir.join("junk.ckpt"), b"not a checkpoint").unwrap();
    failed(&coda(&["eval", "--backbone", "junk.ckpt"], dir, None));
    assert!(!coda(&["no-such-command"], dir, None).status.success());
}
