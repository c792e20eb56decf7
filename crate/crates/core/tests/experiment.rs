use std::fs;

use hyperfed::data::PartitionPlan;
use hyperfed::experiment::{chart_from_csv, dry_run, parse_config_str, resume, run, RunOptions};

fn small(extra: &str) -> String {
    format!(
        "preset = \"blobs-desk\"\nseed = 3\n[dataset]\nper_class = 20\n[training]\nrounds = 4\nlocal_epochs = 1\neval_every = 2\n[output]\ncheckpoint_every = 1\n{extra}"
    )
}

fn opts(dir: &std::path::Path) -> RunOptions {
    RunOptions {
        out_dir: Some(dir.to_path_buf()),
        ..RunOptions::default()
    }
}

#[test]
fn run_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = parse_config_str(&small("")).unwrap();
    let summary = run(&cfg, &opts(tmp.path())).unwrap();
    assert_eq!(summary.rounds_completed, 4);
    assert!(!summary.interrupted);
    assert!(summary.final_mean_accuracy.is_some());
    let resolved = fs::read_to_string(tmp.path().join("config.resolved.toml")).unwrap();
    assert_eq!(parse_config_str(&resolved).unwrap(), cfg);
    let plan = PartitionPlan::load(&tmp.path().join("partition.json")).unwrap();
    assert_eq!(plan.clients.len(), 10);
    let csv = fs::read_to_string(&summary.metrics_path).unwrap();
    let evals: Vec<_> = csv.lines().filter(|l| l.contains(",eval,")).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(evals.len(), 20);
    assert!(evals.iter().all(|r| *r == "2" || *r == "4"));
    let chart = chart_from_csv("t", &csv).unwrap();
    assert!(chart.series.iter().any(|s| s.name == "eval" && s.points.len() == 2));
    assert!(summary.checkpoint_path.exists());
}

#[test]
fn interrupted_run_resumes_to_identical_artifacts() {
    let full = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let cfg = parse_config_str(&small("[generalization]\nmode = \"embeddings-only\"\nrounds = 2\n")).unwrap();
    let a = run(&cfg, &opts(full.path())).unwrap();
    assert_eq!(a.rounds_completed, 6);
    assert!(a.novel_mean_accuracy.is_some());

    let mut o = opts(split.path());
    o.stop_after = Some(3);
    let b = run(&cfg, &o).unwrap();
    assert!(b.interrupted);
    assert_eq!(b.rounds_completed, 3);
    // Rows written after the last checkpoint must be dropped on resume.
    let mut csv = fs::read_to_string(&b.metrics_path).unwrap();
    csv.push_str("5,eval,0,tiny-mlp,0.5,0.1,0,0,10\n");
    fs::write(&b.metrics_path, csv).unwrap();
    let c = resume(&b.checkpoint_path, &RunOptions::default()).unwrap();
    assert_eq!(c.rounds_completed, 6);
    assert_eq!(c.final_mean_accuracy, a.final_mean_accuracy);
    assert_eq!(
        fs::read_to_string(&a.metrics_path).unwrap(),
        fs::read_to_string(&c.metrics_path).unwrap()
    );
    assert_eq!(fs::read(&a.checkpoint_path).unwrap(), fs::read(&c.checkpoint_path).unwrap());
}

#[test]
fn dry_run_describes_fleet() {
    let cfg = parse_config_str(&small("[generalization]\nmode = \"new-head\"\n")).unwrap();
    let text = dry_run(&cfg, &RunOptions::default()).unwrap();
    assert!(text.contains("client 9"), "{text}");
    assert!(text.contains("held out"), "{text}");
    assert!(text.contains("phase A"), "{text}");
    let hetero = parse_config_str("preset = \"cifar10-noniid1-50-hetero\"").unwrap();
    let text = dry_run(&hetero, &RunOptions::default()).unwrap();
    for arch in ["lenet", "vgg8", "resnet10", "resnet12", "resnet18"] {
        assert!(text.contains(arch), "{text}");
    }
}

#[test]
fn missing_image_data_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = parse_config_str("preset = \"cifar10-noniid1-50\"\n").unwrap();
    let o = RunOptions {
        data_dir: Some(tmp.path().join("absent")),
        out_dir: Some(tmp.path().join("out")),
        ..RunOptions::default()
    };
    assert!(run(&cfg, &o).is_err());
}
