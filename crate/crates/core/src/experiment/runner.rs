use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::config::{parse_config, DatasetKind, RunConfig, SchemeKind};
use crate::data::{
    load_cifar_binary, load_idx, partition_dirichlet, partition_quantity_skew, synth_blobs, CifarLayout,
    Dataset, PartitionPlan,
};
use crate::engine::{Federation, FederationSetup, NewClient, Phase, RoundMetrics, CSV_HEADER};
use crate::error::{Error, Result};
use crate::hypernet::chunk_count;
use crate::model::{flat_param_count, zoo, ArchitectureSpec};

/// Environment variable naming the directory that holds raw datasets.
pub const DATA_DIR_ENV: &str = "HYPERFED_DATA_DIR";

const RESOLVED: &str = "config.resolved.toml";
const METRICS: &str = "metrics.csv";
const CHECKPOINT: &str = "checkpoint.bin";
const PLAN: &str = "partition.json";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for client training; `None` uses every core.
    pub workers: Option<usize>,
    /// Overrides the environment variable.
    pub data_dir: Option<PathBuf>,
    /// Overrides `output.dir`.
    pub out_dir: Option<PathBuf>,
    /// Stop (with a checkpoint) once this many rounds are complete.
    pub stop_after: Option<usize>,
    /// Base for relative architecture file paths.
    pub config_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub rounds_completed: usize,
    pub final_mean_accuracy: Option<f64>,
    pub novel_mean_accuracy: Option<f64>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub interrupted: bool,
}

/// A ready-to-run federation plus the clients held out for
/// generalization.
pub struct Prepared {
    pub federation: Federation,
    pub holdout: Vec<NewClient>,
    pub plan: PartitionPlan,
    pub dataset: Arc<Dataset>,
}

fn data_root(opts: &RunOptions) -> PathBuf {
    opts.data_dir
        .clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

pub fn load_dataset(cfg: &RunConfig, data_dir: &Path) -> Result<Dataset> {
    let d = &cfg.dataset;
    let dir = |default: &str| data_dir.join(d.dir.as_deref().unwrap_or(default));
    match d.kind {
        DatasetKind::Blobs => synth_blobs(
            d.classes.unwrap_or(10),
            d.per_class.unwrap_or(100),
            d.shape.as_deref().unwrap_or(&[64]),
            d.spread.unwrap_or(0.35),
            cfg.seed,
        ),
        DatasetKind::Emnist => {
            let root = dir("emnist");
            let part = |split: &str| {
                load_idx(
                    &root.join(format!("emnist-balanced-{split}-images-idx3-ubyte")),
                    &root.join(format!("emnist-balanced-{split}-labels-idx1-ubyte")),
                    "emnist",
                )
            };
            let mut ds = Dataset::concat("emnist", &[part("train")?, part("test")?])?;
            if ds.classes() < 47 {
                ds = Dataset::new("emnist", ds.feature_shape().to_vec(), 47, flat_features(&ds), ds.labels().to_vec())?;
            }
            Ok(ds)
        }
        DatasetKind::Cifar10 => {
            let root = dir("cifar-10-batches-bin");
            let mut files: Vec<PathBuf> = (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect();
            files.push(root.join("test_batch.bin"));
            load_cifar_binary(&files, CifarLayout::Cifar10, "cifar10")
        }
        DatasetKind::Cifar100 => {
            let root = dir("cifar-100-binary");
            load_cifar_binary(&[root.join("train.bin"), root.join("test.bin")], CifarLayout::Cifar100Fine, "cifar100")
        }
        DatasetKind::TinyImagenet => Err(Error::Dataset("Tiny-ImageNet ingestion is not supported".into())),
    }
}

fn flat_features(ds: &Dataset) -> Vec<f32> {
    (0..ds.len()).flat_map(|i| ds.features(i).iter().copied()).collect()
}

fn geometry(cfg: &RunConfig) -> (Vec<usize>, usize) {
    cfg.dataset.kind.geometry().unwrap_or_else(|| {
        (
            cfg.dataset.shape.clone().unwrap_or_else(|| vec![64]),
            cfg.dataset.classes.unwrap_or(10),
        )
    })
}

fn resolve_arch(entry: &str, input: &[usize], classes: usize, base: Option<&Path>) -> Result<ArchitectureSpec> {
    if entry.ends_with(".toml") {
        let path = match base {
            Some(b) if Path::new(entry).is_relative() => b.join(entry),
            _ => PathBuf::from(entry),
        };
        let arch = ArchitectureSpec::load(&path)?;
        if arch.input_shape.iter().product::<usize>() != input.iter().product::<usize>() || arch.classes != classes {
            return Err(Error::Architecture(format!(
                "{} does not match the dataset geometry {input:?} / {classes} classes",
                path.display()
            )));
        }
        Ok(arch)
    } else {
        zoo::builtin(entry, input, classes)
    }
}

/// One architecture per client, assigned round-robin from `clients.archs`,
/// plus the optional global architecture.
pub fn build_architectures(
    cfg: &RunConfig,
    input: &[usize],
    classes: usize,
    base: Option<&Path>,
) -> Result<(Vec<Arc<ArchitectureSpec>>, Option<Arc<ArchitectureSpec>>)> {
    let mut distinct = Vec::new();
    for entry in &cfg.clients.archs {
        distinct.push(resolve_arch(entry, input, classes, base)?);
    }
    for (names, local) in [(&cfg.clients.local_layers, true), (&cfg.clients.frozen_layers, false)] {
        for name in names {
            let mut hit = false;
            for arch in distinct.iter_mut() {
                if arch.layers.iter().any(|l| &l.name == name) {
                    if local {
                        arch.set_local_only(name)?;
                    } else {
                        arch.set_frozen(name)?;
                    }
                    hit = true;
                }
            }
            if !hit {
                return Err(Error::Config(format!("no client architecture has a layer named {name:?}")));
            }
        }
    }
    let distinct: Vec<Arc<ArchitectureSpec>> = distinct.into_iter().map(Arc::new).collect();
    let per_client = (0..cfg.partition.clients).map(|i| distinct[i % distinct.len()].clone()).collect();
    let global = match &cfg.clients.global_arch {
        Some(g) => Some(Arc::new(resolve_arch(g, input, classes, base)?)),
        None => None,
    };
    Ok((per_client, global))
}

fn partition(cfg: &RunConfig, ds: &Dataset) -> Result<PartitionPlan> {
    let p = &cfg.partition;
    match p.scheme {
        SchemeKind::QuantitySkew => partition_quantity_skew(
            ds,
            p.clients,
            p.classes_per_client.unwrap_or(ds.classes()),
            p.strict,
            cfg.seed,
        ),
        SchemeKind::Dirichlet => partition_dirichlet(ds, p.clients, p.beta.unwrap_or(0.01), cfg.seed),
    }
}

fn holdout_count(cfg: &RunConfig) -> usize {
    let n = cfg.partition.clients;
    match &cfg.generalization {
        Some(g) if n > 1 => ((g.holdout * n as f64).ceil() as usize).clamp(1, n - 1),
        _ => 0,
    }
}

fn roster(cfg: &RunConfig, ds: &Dataset, base: Option<&Path>) -> Result<(PartitionPlan, Vec<NewClient>, Option<Arc<ArchitectureSpec>>)> {
    let plan = partition(cfg, ds)?;
    let (archs, global) = build_architectures(cfg, ds.feature_shape(), ds.classes(), base)?;
    let clients = archs
        .into_iter()
        .zip(plan.clients.iter().cloned())
        .map(|(arch, split)| NewClient { arch, split })
        .collect();
    Ok((plan, clients, global))
}

/// Load data, partition it and build the federation without running it.
pub fn prepare(cfg: &RunConfig, opts: &RunOptions) -> Result<Prepared> {
    let dataset = Arc::new(load_dataset(cfg, &data_root(opts))?);
    let (plan, mut clients, global_arch) = roster(cfg, &dataset, opts.config_dir.as_deref())?;
    let holdout = clients.split_off(clients.len() - holdout_count(cfg));
    let mut federation = Federation::new(FederationSetup {
        round: cfg.round_config(),
        hypernet: cfg.hypernet_config(),
        dataset: dataset.clone(),
        clients,
        global_arch,
    })?;
    if let Some(w) = opts.workers {
        federation.set_workers(w)?;
    }
    Ok(Prepared {
        federation,
        holdout,
        plan,
        dataset,
    })
}

/// Human-readable description of what `run` would do.
pub fn dry_run(cfg: &RunConfig, opts: &RunOptions) -> Result<String> {
    let (input, classes) = geometry(cfg);
    let (archs, global) = build_architectures(cfg, &input, classes, opts.config_dir.as_deref())?;
    let t = &cfg.training;
    let n = cfg.partition.clients;
    let mut out = String::new();
    let _ = writeln!(out, "run {} (seed {})", cfg.name, cfg.seed);
    let _ = writeln!(out, "dataset {:?}: input {input:?}, {classes} classes", cfg.dataset.kind);
    let _ = writeln!(out, "partition {:?} over {n} clients", cfg.partition.scheme);
    let held = holdout_count(cfg);
    let mut taus = std::collections::BTreeSet::new();
    for (i, a) in archs.iter().enumerate() {
        let k = flat_param_count(a);
        let tau = chunk_count(k, cfg.hypernet.chunk_size);
        taus.insert(tau);
        let tag = if i >= n - held { " (held out)" } else { "" };
        let _ = writeln!(out, "  client {i}: {} K={k} chunks={tau}{tag}", a.name);
    }
    let alg = t.algorithm;
    if alg.uses_hypernet() {
        let _ = writeln!(out, "hypernetwork: d={} h={} N={} heads={}", cfg.hypernet.embed_dim, cfg.hypernet.hidden_dim, cfg.hypernet.chunk_size, taus.len());
    }
    let participants = ((t.participation * (n - held) as f64).ceil() as usize).max(1);
    let _ = writeln!(out, "{} for {} rounds, {participants} clients per round", alg.as_str(), t.rounds);
    if alg.uses_global() {
        let k_g = match &global {
            Some(g) => flat_param_count(g),
            None => archs[..n - held].iter().map(|a| flat_param_count(a)).min().unwrap_or(0),
        };
        let _ = writeln!(out, "  phase A: deployed clients train the global model (K_g={k_g}, ratio {})", t.deploy_ratio);
        let _ = writeln!(out, "  phase B: personal training{}", if alg == crate::engine::Algorithm::MhPfedhngd { " with distillation" } else { "" });
    } else {
        let _ = writeln!(out, "  {} local epochs per participant", t.local_epochs);
    }
    if let Some(g) = &cfg.generalization {
        let _ = writeln!(out, "then {:?} generalization on {held} held-out clients for {} rounds", g.mode, g.rounds);
    }
    Ok(out)
}

fn out_dir(cfg: &RunConfig, opts: &RunOptions) -> PathBuf {
    opts.out_dir.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir))
}

fn absolutize(cfg: &mut RunConfig, base: Option<&Path>) {
    for entry in cfg.clients.archs.iter_mut().chain(cfg.clients.global_arch.iter_mut()) {
        if entry.ends_with(".toml") && Path::new(entry.as_str()).is_relative() {
            let joined = base.map(|b| b.join(&*entry)).unwrap_or_else(|| PathBuf::from(&*entry));
            let abs = fs::canonicalize(&joined).unwrap_or(joined);
            *entry = abs.to_string_lossy().into_owned();
        }
    }
}

struct Tracker {
    last_eval: Option<f64>,
    last_novel: Option<f64>,
}

impl Tracker {
    fn see(&mut self, m: &RoundMetrics) {
        if let Some(a) = m.mean_accuracy(Phase::Eval) {
            self.last_eval = Some(a);
        }
        if let Some(a) = m.mean_accuracy(Phase::EvalNovel) {
            self.last_novel = Some(a);
        }
    }
}

fn drive(
    cfg: &RunConfig,
    fed: &mut Federation,
    mut holdout: Vec<NewClient>,
    dir: &Path,
    opts: &RunOptions,
) -> Result<RunSummary> {
    let metrics_path = dir.join(METRICS);
    let checkpoint_path = dir.join(CHECKPOINT);
    let mut csv = OpenOptions::new().append(true).open(&metrics_path)?;
    let mut track = Tracker {
        last_eval: None,
        last_novel: None,
    };
    loop {
        if fed.is_finished() {
            match &cfg.generalization {
                Some(g) if !holdout.is_empty() && !fed.has_novel_clients() => {
                    fed.begin_generalization(g.mode, std::mem::take(&mut holdout), g.rounds)?;
                    continue;
                }
                _ => break,
            }
        }
        if opts.stop_after.is_some_and(|s| fed.completed_rounds() >= s) {
            fed.save(&checkpoint_path)?;
            return Ok(RunSummary {
                rounds_completed: fed.completed_rounds(),
                final_mean_accuracy: track.last_eval,
                novel_mean_accuracy: track.last_novel,
                metrics_path,
                checkpoint_path,
                interrupted: true,
            });
        }
        let m = fed.run_round()?;
        csv.write_all(m.to_csv().as_bytes())?;
        csv.flush()?;
        track.see(&m);
        let every = cfg.output.checkpoint_every;
        if every > 0 && fed.completed_rounds().is_multiple_of(every) {
            fed.save(&checkpoint_path)?;
        }
    }
    fed.save(&checkpoint_path)?;
    if track.last_eval.is_none() {
        let accs = fed.evaluate_clients()?;
        if !accs.is_empty() {
            track.last_eval = Some(accs.iter().map(|a| a.1).sum::<f64>() / accs.len() as f64);
        }
    }
    Ok(RunSummary {
        rounds_completed: fed.completed_rounds(),
        final_mean_accuracy: track.last_eval,
        novel_mean_accuracy: track.last_novel,
        metrics_path,
        checkpoint_path,
        interrupted: false,
    })
}

/// Execute a run and write its artifacts: resolved config, partition
/// plan, metrics CSV and checkpoint.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    absolutize(&mut cfg, opts.config_dir.as_deref());
    let dir = out_dir(&cfg, opts);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(RESOLVED), cfg.to_toml_string()?)?;
    let prepared = prepare(&cfg, opts)?;
    prepared.plan.save(&dir.join(PLAN))?;
    let mut csv = File::create(dir.join(METRICS))?;
    writeln!(csv, "{CSV_HEADER}")?;
    drop(csv);
    let mut fed = prepared.federation;
    drive(&cfg, &mut fed, prepared.holdout, &dir, opts)
}

/// Continue an interrupted run from its checkpoint. Metrics rows past the
/// checkpoint are discarded before new rows are appended.
pub fn resume(checkpoint: &Path, opts: &RunOptions) -> Result<RunSummary> {
    let dir = checkpoint
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let cfg = parse_config(&dir.join(RESOLVED))?;
    let dataset = Arc::new(load_dataset(&cfg, &data_root(opts))?);
    let mut fed = Federation::load(checkpoint, dataset.clone())?;
    if let Some(w) = opts.workers {
        fed.set_workers(w)?;
    }
    let (_, mut clients, _) = roster(&cfg, &dataset, None)?;
    let holdout = if fed.has_novel_clients() {
        Vec::new()
    } else {
        clients.split_off(clients.len() - holdout_count(&cfg))
    };

    let metrics_path = dir.join(METRICS);
    let done = fed.completed_rounds();
    let kept: Vec<String> = BufReader::new(File::open(&metrics_path)?)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .enumerate()
        .filter(|(i, line)| {
            *i == 0
                || line
                    .split(',')
                    .next()
                    .and_then(|r| r.parse::<usize>().ok())
                    .is_some_and(|r| r <= done)
        })
        .map(|(_, l)| l)
        .collect();
    fs::write(&metrics_path, kept.join("\n") + "\n")?;
    let opts = RunOptions {
        out_dir: Some(dir.clone()),
        ..opts.clone()
    };
    drive(&cfg, &mut fed, holdout, &dir, &opts)
}
