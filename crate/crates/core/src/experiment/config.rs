use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::engine::{Algorithm, RoundConfig};
use crate::error::{Error, Result};
use crate::hypernet::{FreezeMode, Grouping, HypernetConfig};
use crate::tensor::{AdamConfig, SgdConfig};

/// Keys that must be present after preset expansion.
pub const REQUIRED_KEYS: &[&str] = &[
    "dataset.kind",
    "partition.scheme",
    "partition.clients",
    "clients.archs",
    "training.algorithm",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Blobs,
    Emnist,
    Cifar10,
    Cifar100,
    TinyImagenet,
}

impl DatasetKind {
    /// Per-example shape and class count of the real datasets.
    pub fn geometry(self) -> Option<(Vec<usize>, usize)> {
        match self {
            DatasetKind::Blobs => None,
            DatasetKind::Emnist => Some((vec![1, 28, 28], 47)),
            DatasetKind::Cifar10 => Some((vec![3, 32, 32], 10)),
            DatasetKind::Cifar100 => Some((vec![3, 32, 32], 100)),
            DatasetKind::TinyImagenet => Some((vec![3, 64, 64], 200)),
        }
    }

    fn classes_per_client(self) -> usize {
        match self {
            DatasetKind::Blobs => 3,
            DatasetKind::Emnist => 6,
            DatasetKind::Cifar10 => 2,
            DatasetKind::Cifar100 => 10,
            DatasetKind::TinyImagenet => 20,
        }
    }

    /// Distillation temperature and cross-entropy weight.
    fn distillation(self) -> (f64, f64) {
        match self {
            DatasetKind::Emnist => (10.0, 0.9),
            DatasetKind::TinyImagenet => (24.0, 0.8),
            DatasetKind::Cifar10 | DatasetKind::Cifar100 => (15.0, 0.99),
            DatasetKind::Blobs => (10.0, 0.9),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory of the raw files, relative to the data directory.
    pub dir: Option<String>,
    pub classes: Option<usize>,
    pub per_class: Option<usize>,
    pub shape: Option<Vec<usize>>,
    pub spread: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    QuantitySkew,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub scheme: SchemeKind,
    pub clients: usize,
    pub classes_per_client: Option<usize>,
    pub beta: Option<f64>,
    #[serde(default = "yes")]
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientsConfig {
    /// Assigned round-robin by client id. Entries ending in `.toml` are
    /// architecture files, anything else a built-in name.
    pub archs: Vec<String>,
    pub global_arch: Option<String>,
    #[serde(default)]
    pub local_layers: Vec<String>,
    #[serde(default)]
    pub frozen_layers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub algorithm: Algorithm,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "one")]
    pub participation: f64,
    pub lambda: Option<f64>,
    pub temperature: Option<f64>,
    #[serde(default)]
    pub prune_fraction: f64,
    #[serde(default = "one")]
    pub deploy_ratio: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HypernetSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub chunk_size: usize,
    pub grouping: Grouping,
    pub use_heads: bool,
    pub shared_group_embeddings: bool,
    pub lr: f64,
}

impl Default for HypernetSection {
    fn default() -> Self {
        let d = HypernetConfig::default();
        Self {
            embed_dim: d.embed_dim,
            hidden_dim: d.hidden_dim,
            chunk_size: d.chunk_size,
            grouping: d.grouping,
            use_heads: d.use_heads,
            shared_group_embeddings: d.shared_group_embeddings,
            lr: d.adam.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralizationConfig {
    pub mode: FreezeMode,
    /// Share of clients kept out of training, taken from the highest ids.
    #[serde(default = "default_holdout")]
    pub holdout: f64,
    #[serde(default = "default_gen_rounds")]
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    /// Write a checkpoint every this many rounds; 0 only at the end.
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "runs".into(),
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub preset: Option<String>,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub clients: ClientsConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub hypernet: HypernetSection,
    pub generalization: Option<GeneralizationConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn yes() -> bool {
    true
}
fn one() -> f64 {
    1.0
}
fn default_rounds() -> usize {
    500
}
fn default_epochs() -> usize {
    2
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    SgdConfig::default().lr
}
fn default_momentum() -> f64 {
    SgdConfig::default().momentum
}
fn default_wd() -> f64 {
    SgdConfig::default().weight_decay
}
fn default_eval_every() -> usize {
    1
}
fn default_holdout() -> f64 {
    0.2
}
fn default_gen_rounds() -> usize {
    20
}
fn default_name() -> String {
    "run".into()
}

const FLEET: &[&str] = &["lenet", "vgg8", "resnet10", "resnet12", "resnet18"];

/// Expand a preset name into a partial config table.
///
/// `<dataset>-noniid<1|2>-<clients>[-hetero]` for the image datasets and
/// `blobs-desk` for the small synthetic scenario.
fn preset_table(name: &str) -> Result<Value> {
    let unknown = || Error::Config(format!("unknown preset {name:?}"));
    if name == "blobs-desk" {
        return Ok(toml::from_str(
            r#"
            [dataset]
            kind = "blobs"
            classes = 10
            per_class = 100
            shape = [64]
            spread = 0.35
            [partition]
            scheme = "quantity-skew"
            clients = 10
            classes_per_client = 3
            [clients]
            archs = ["tiny-mlp"]
            [training]
            algorithm = "mh-pfedhngd"
            rounds = 100
            local_epochs = 4
            lr = 0.02
            lambda = 0.9
            temperature = 1.0
            [hypernet]
            chunk_size = 128
            lr = 0.001
            "#,
        )
        .expect("static preset"));
    }
    let (body, hetero) = match name.strip_suffix("-hetero") {
        Some(b) => (b, true),
        None => (name, false),
    };
    let (dataset, rest) = body.rsplit_once("-noniid").ok_or_else(unknown)?;
    let (setting, clients) = rest.split_once('-').ok_or_else(unknown)?;
    let clients: usize = clients.parse().map_err(|_| unknown())?;
    let kind = match dataset {
        "emnist" => "emnist",
        "cifar10" => "cifar10",
        "cifar100" => "cifar100",
        "tiny-imagenet" => "tiny-imagenet",
        _ => return Err(unknown()),
    };
    let scheme = match setting {
        "1" => "quantity-skew",
        "2" => "dirichlet",
        _ => return Err(unknown()),
    };
    let archs: Vec<&str> = if hetero { FLEET.to_vec() } else { vec!["lenet"] };
    let text = format!(
        "[dataset]\nkind = {kind:?}\n[partition]\nscheme = {scheme:?}\nclients = {clients}\n\
         [clients]\narchs = {archs:?}\nglobal_arch = \"lenet\"\n[training]\nalgorithm = \"mh-pfedhngd\"\n"
    );
    Ok(toml::from_str(&text).expect("generated preset"))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn has_key(v: &Value, dotted: &str) -> bool {
    let mut cur = v;
    for part in dotted.split('.') {
        match cur.get(part) {
            Some(next) => cur = next,
            None => return false,
        }
    }
    true
}

/// Parse, expand the preset, fill defaults and validate.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let user: Value = text
        .parse::<toml::Table>()
        .map(Value::Table)
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut merged = match user.get("preset").and_then(Value::as_str) {
        Some(p) => preset_table(p)?,
        None => Value::Table(toml::Table::new()),
    };
    merge(&mut merged, user);
    let missing: Vec<&str> = REQUIRED_KEYS.iter().copied().filter(|k| !has_key(&merged, k)).collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!("missing required keys: {}", missing.join(", "))));
    }
    let raw = toml::to_string(&merged).map_err(|e| Error::Config(e.to_string()))?;
    let mut cfg: RunConfig = toml::from_str(&raw).map_err(|e| {
        // Re-run against the user's text so line numbers point into it.
        match toml::from_str::<RunConfig>(text) {
            Err(user_err) => Error::Config(user_err.to_string()),
            Ok(_) => Error::Config(e.to_string()),
        }
    })?;
    cfg.resolve()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    parse_config_str(&std::fs::read_to_string(path)?)
}

impl RunConfig {
    fn resolve(&mut self) -> Result<()> {
        let kind = self.dataset.kind;
        if kind == DatasetKind::Blobs {
            self.dataset.classes.get_or_insert(10);
            self.dataset.per_class.get_or_insert(100);
            self.dataset.shape.get_or_insert_with(|| vec![64]);
            self.dataset.spread.get_or_insert(0.35);
        }
        match self.partition.scheme {
            SchemeKind::QuantitySkew => {
                self.partition.classes_per_client.get_or_insert(kind.classes_per_client());
            }
            SchemeKind::Dirichlet => {
                self.partition.beta.get_or_insert(0.01);
            }
        }
        let (t, lambda) = kind.distillation();
        self.training.temperature.get_or_insert(t);
        self.training.lambda.get_or_insert(lambda);
        self.validate()
    }

    fn validate(&self) -> Result<()> {
        if self.partition.clients == 0 {
            return Err(Error::Config("partition.clients must be positive".into()));
        }
        if self.clients.archs.is_empty() {
            return Err(Error::Config("clients.archs must list at least one architecture".into()));
        }
        if let Some(g) = &self.generalization {
            if !(g.holdout > 0.0 && g.holdout < 1.0) {
                return Err(Error::Config(format!("generalization.holdout must be in (0, 1), got {}", g.holdout)));
            }
            if !self.training.algorithm.uses_hypernet() {
                return Err(Error::Config("generalization needs a hypernetwork algorithm".into()));
            }
        }
        self.round_config().validate()
    }

    pub fn round_config(&self) -> RoundConfig {
        let t = &self.training;
        RoundConfig {
            algorithm: t.algorithm,
            rounds: t.rounds,
            local_epochs: t.local_epochs,
            batch_size: t.batch_size,
            participation: t.participation,
            lambda: t.lambda.unwrap_or(1.0),
            temperature: t.temperature.unwrap_or(1.0),
            prune_fraction: t.prune_fraction,
            deploy_ratio: t.deploy_ratio,
            sgd: SgdConfig {
                lr: t.lr,
                momentum: t.momentum,
                weight_decay: t.weight_decay,
            },
            eval_every: t.eval_every,
            seed: self.seed,
        }
    }

    pub fn hypernet_config(&self) -> HypernetConfig {
        let h = &self.hypernet;
        HypernetConfig {
            embed_dim: h.embed_dim,
            hidden_dim: h.hidden_dim,
            chunk_size: h.chunk_size,
            grouping: h.grouping,
            use_heads: h.use_heads,
            shared_group_embeddings: h.shared_group_embeddings,
            adam: AdamConfig {
                lr: h.lr,
                ..AdamConfig::default()
            },
            seed: self.seed,
        }
    }

    /// Every field explicit.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
