use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fedforest_cli::commands;
use fedforest_cli::dataset::{format_table, read_table};
use fedforest_cli::RunConfig;
use fedforest::TaskKind;

fn fedforest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedforest")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn gen_data_writes_one_file_per_client_and_a_mixture_test_set() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(fedforest(&["gen-data", "--set", "scenario.per_client=200", "--set", "scenario.clients=10", "--set", "scenario.d=20", "-o", path(&out)]));
    for k in 0..10 {
        let t = read_table(&out.join(format!("client_{k:03}.csv"))).unwrap();
        assert_eq!(t.len(), 200);
        assert!(t.client_ids.iter().all(|&id| id == k));
    }
    let test = read_table(&out.join("test.csv")).unwrap();
    assert_eq!(test.len(), 857);
    assert!(out.join("ground_truth.json").exists());
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["config"]["scenario"]["clients"], 10);
}

#[test]
fn gen_data_is_byte_identical_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(fedforest(&["gen-data", "--set", "scenario.scenario=covariate_shift", "--set", "scenario.clients=3", "--set", "scenario.per_client=40", "-o", path(out)]));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 6);
    for name in &names {
        let text = fs::read(a.join(name)).unwrap();
        assert_eq!(text, fs::read(b.join(name)).unwrap(), "{name:?}");
        if name.to_str().unwrap().ends_with(".csv") {
            let table = read_table(&a.join(name)).unwrap();
            assert_eq!(format_table(&table, TaskKind::Regression).into_bytes(), text);
        }
    }
}

#[test]
fn binary_datasets_write_integer_labels() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(fedforest(&["gen-data", "--set", "binary=true", "--set", "scenario.clients=2", "--set", "scenario.per_client=30", "-o", path(&out)]));
    let text = fs::read_to_string(out.join("client_000.csv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",0") || l.ends_with(",1")));
    let model = dir.path().join("m.json");
    ok(fedforest(&["train", "-d", path(&out), "-m", path(&model), "--set", "binary=true", "--set", "forest.trees=3"]));
    let report = ok(fedforest(&["evaluate", "-m", path(&model), "-d", path(&out.join("test.csv"))]));
    let report: serde_json::Value = serde_json::from_slice(&report.stdout).unwrap();
    assert!(report["accuracy"].as_f64().unwrap() > 0.5);
}

#[test]
fn a_fully_grown_tree_memorizes_its_training_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("one.csv");
    let mut text = String::from("client_id,x0,x1,y\n");
    for i in 0..40 {
        let (x0, x1) = ((i * 7 % 40) as f64 / 3.0, (i * 13 % 17) as f64);
        text.push_str(&format!("0,{x0},{x1},{}\n", (x0 * 1.7).sin() * 5.0 + x1));
    }
    fs::write(&data, text).unwrap();
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        "[forest]\ntrees = 1\nmax_depth = 63\nmin_leaf = 1\nmtry = 2\nbootstrap = false\ncandidates = { rule = \"exact_midpoints\" }\n",
    )
    .unwrap();
    let model = dir.path().join("model.json");
    ok(fedforest(&["train", "-c", path(&config), "-d", path(&data), "-m", path(&model)]));
    let report = ok(fedforest(&["evaluate", "-m", path(&model), "-d", path(&data)]));
    let report: serde_json::Value = serde_json::from_slice(&report.stdout).unwrap();
    // right-child statistics are parent minus left, so leaf means carry rounding
    assert!(report["mse"].as_f64().unwrap() < 1e-24, "{report}");

    let preds = ok(fedforest(&["predict", "-m", path(&model), "-d", path(&data)]));
    let preds = String::from_utf8(preds.stdout).unwrap();
    assert_eq!(preds.lines().count(), 41);
    assert!(preds.starts_with("client_id,prediction\n0,"));
    let truth = read_table(&data).unwrap();
    for (line, y) in preds.lines().skip(1).zip(&truth.targets) {
        let p: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((p - y).abs() <= 1e-12 * y.abs().max(1.0), "{p} vs {y}");
    }
}

#[test]
fn training_is_deterministic_and_metrics_echo_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(fedforest(&["gen-data", "--set", "scenario.scenario=outcome_shift", "--set", "scenario.clients=3", "--set", "scenario.per_client=60", "--set", "scenario.d=4", "-o", path(&data)]));
    let train = |name: &str| {
        let model = dir.path().join(name);
        ok(fedforest(&["train", "-d", path(&data), "-m", path(&model), "--set", "forest.trees=4", "--set", "forest.include_h=true"]));
        model
    };
    let (a, b) = (train("a.json"), train("b.json"));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a.metrics.json")).unwrap()).unwrap();
    let mut expected = RunConfig::default();
    expected.forest.trees = 4;
    expected.forest.include_h = true;
    assert_eq!(metrics["config"], expected.echo());
    assert_eq!(metrics["seed"], 0);
    assert!(metrics["wall_time_seconds"].as_f64().unwrap() >= 0.0);
    let ledger = &metrics["ledger"];
    assert!(ledger["rounds"].as_u64().unwrap() <= 2 * 8 + 1);
    let node_up: u64 = metrics["nodes"].as_array().unwrap().iter().map(|n| n["up"].as_u64().unwrap()).sum();
    assert!(node_up > 0 && node_up <= ledger["scalars_up"].as_u64().unwrap());
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);

    assert_eq!(code(&fedforest(&["gen-data", "--set", "scenario.d=1", "-o", path(&p("x"))])), 2);
    assert_eq!(code(&fedforest(&["gen-data", "--set", "forest.trese=3", "-o", path(&p("x"))])), 2);
    fs::write(p("bad.toml"), "[forest]\ntrees = \"many\"\n").unwrap();
    assert_eq!(code(&fedforest(&["gen-data", "-c", path(&p("bad.toml")), "-o", path(&p("x"))])), 2);
    assert_eq!(code(&fedforest(&["gen-data", "-c", path(&p("missing.toml")), "-o", path(&p("x"))])), 2);

    fs::write(p("bad.csv"), "client_id,x0,y\n0,1.0,2.0\n0,oops,1.0\n").unwrap();
    let out = fedforest(&["train", "-d", path(&p("bad.csv")), "-m", path(&p("m.json"))]);
    assert_eq!(code(&out), 3);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("column 2"), "{err}");
    assert_eq!(code(&fedforest(&["train", "-d", path(&p("nothing")), "-m", path(&p("m.json"))])), 3);
    assert_eq!(code(&fedforest(&["predict", "-m", path(&p("bad.csv")), "-d", path(&p("bad.csv"))])), 3);

    fs::write(p("ok.csv"), "client_id,x0,y\n0,1,1\n0,2,2\n1,3,3\n1,4,4\n").unwrap();
    assert_eq!(code(&fedforest(&["train", "-d", path(&p("ok.csv")), "-m", path(&p("m.json")), "--set", "forest.trees=0"])), 2);
}

#[test]
fn strict_prediction_rejects_unseen_clients() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.csv");
    let mut text = String::from("client_id,x0,y\n");
    for i in 0..30 {
        let site = i % 3;
        text.push_str(&format!("{site},{},{}\n", i as f64 / 10.0, site as f64 * 10.0));
    }
    fs::write(&train, text).unwrap();
    let model = dir.path().join("m.json");
    ok(fedforest(&["train", "-d", path(&train), "-m", path(&model), "--set", "forest.include_h=true", "--set", "forest.trees=2", "--set", "forest.min_leaf=1"]));
    let doc = commands::load_model(&model).unwrap();
    assert!(doc.forest.has_client_splits());
    let unseen = dir.path().join("unseen.csv");
    fs::write(&unseen, "client_id,x0\n7,1.0\n").unwrap();
    ok(fedforest(&["predict", "-m", path(&model), "-d", path(&unseen)]));
    assert_eq!(code(&fedforest(&["predict", "-m", path(&model), "-d", path(&unseen), "--strict"])), 3);
}

#[test]
fn diagnose_reports_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("scenario.scenario=homogeneous", "scenario.gamma=0", "fast_mode"),
        ("scenario.scenario=disjoint_step", "scenario.gamma=5", "robust_mode"),
        ("scenario.scenario=outcome_shift", "scenario.delta=1.5", "robust_mode"),
    ];
    for (i, (scenario, shift, recommendation)) in cases.into_iter().enumerate() {
        let data = dir.path().join(format!("data{i}"));
        ok(fedforest(&["gen-data", "--set", scenario, "--set", shift, "--set", "scenario.clients=2", "-o", path(&data)]));
        let report_path = dir.path().join(format!("report{i}.json"));
        ok(fedforest(&["diagnose", "-d", path(&data), "-o", path(&report_path), "--set", "forest.trees=10"]));
        let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
        assert_eq!(report["recommendation"], recommendation, "{scenario}: {report}");
    }
}

#[test]
fn benchmark_writes_results_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bench.toml");
    fs::write(
        &config,
        "[scenario]\nscenario = \"disjoint_step\"\nper_client = 60\n[forest]\ntrees = 5\n[benchmark]\nseeds = 2\nmethods = [\"quantiles_x\", \"local_learning\", \"centralized_xh\"]\n",
    )
    .unwrap();
    let out = dir.path().join("bench");
    let run = ok(fedforest(&["benchmark", "-c", path(&config), "-o", path(&out)]));
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2 + 3);
    assert!(csv.lines().skip(1).all(|l| !l.contains("error:")));
    let summary = fs::read_to_string(out.join("summary.md")).unwrap();
    assert_eq!(String::from_utf8(run.stdout).unwrap(), summary);
    assert!(summary.contains("FedForest-Quantiles(X)"));
}
