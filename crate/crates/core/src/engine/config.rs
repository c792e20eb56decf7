use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::SgdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Hypernetwork-generated personal models.
    MhPfedhn,
    /// Adds a generated global model trained by deployed clients, without
    /// distillation.
    MhPfedhng,
    /// As above, and deployed clients distill from the global model.
    MhPfedhngd,
    #[serde(rename = "fedavg")]
    FedAvg,
    Local,
}

impl Algorithm {
    pub fn uses_hypernet(self) -> bool {
        matches!(self, Algorithm::MhPfedhn | Algorithm::MhPfedhng | Algorithm::MhPfedhngd)
    }

    pub fn uses_global(self) -> bool {
        matches!(self, Algorithm::MhPfedhng | Algorithm::MhPfedhngd)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::MhPfedhn => "mh-pfedhn",
            Algorithm::MhPfedhng => "mh-pfedhng",
            Algorithm::MhPfedhngd => "mh-pfedhngd",
            Algorithm::FedAvg => "fedavg",
            Algorithm::Local => "local",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Fraction of clients sampled per round.
    pub participation: f64,
    /// Weight of cross-entropy in the distillation objective.
    pub lambda: f64,
    pub temperature: f64,
    /// Share of delta entries kept on upload; 0 disables pruning.
    pub prune_fraction: f64,
    /// Share of clients that receive the global model.
    pub deploy_ratio: f64,
    pub sgd: SgdConfig,
    /// Evaluate every this many rounds (and after the last one).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::MhPfedhngd,
            rounds: 500,
            local_epochs: 2,
            batch_size: 64,
            participation: 1.0,
            lambda: 0.99,
            temperature: 15.0,
            prune_fraction: 0.0,
            deploy_ratio: 1.0,
            sgd: SgdConfig::default(),
            eval_every: 1,
            seed: 0,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad(format!("participation must be in (0, 1], got {}", self.participation));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must be in [0, 1], got {}", self.lambda));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..1.0).contains(&self.prune_fraction) {
            return bad(format!("prune fraction must be in [0, 1), got {}", self.prune_fraction));
        }
        if !(0.0..=1.0).contains(&self.deploy_ratio) {
            return bad(format!("deploy ratio must be in [0, 1], got {}", self.deploy_ratio));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if !(self.sgd.lr >= 0.0) {
            return bad(format!("learning rate must be non-negative, got {}", self.sgd.lr));
        }
        Ok(())
    }
}
