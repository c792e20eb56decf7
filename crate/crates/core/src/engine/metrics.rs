use std::fmt::Write as _;

pub const CSV_HEADER: &str = "round,phase,client_id,accuracy,loss,uplink_bytes,downlink_bytes";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Deployed clients training the global model.
    Global,
    /// Clients training their generated personal model.
    Personal,
    FedAvg,
    Local,
    /// Test metrics of a registered client.
    Eval,
    /// Test metrics of a client added for generalization.
    EvalNovel,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Global => "global",
            Phase::Personal => "personal",
            Phase::FedAvg => "fedavg",
            Phase::Local => "local",
            Phase::Eval => "eval",
            Phase::EvalNovel => "eval-novel",
        }
    }
}

/// One CSV line. Training rows carry last-epoch training metrics, eval
/// rows carry test metrics and no traffic.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub round: usize,
    pub phase: Phase,
    pub client: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
}

impl MetricRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.round,
            self.phase.as_str(),
            self.client,
            self.accuracy,
            self.loss,
            self.uplink_bytes,
            self.downlink_bytes
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct RoundMetrics {
    /// 1-based.
    pub round: usize,
    pub rows: Vec<MetricRow>,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    /// Wall-clock seconds per phase; not part of the CSV.
    pub phase_seconds: Vec<(Phase, f64)>,
}

impl RoundMetrics {
    /// Mean accuracy over rows of `phase`, if any.
    pub fn mean_accuracy(&self, phase: Phase) -> Option<f64> {
        let acc: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.phase == phase)
            .map(|r| r.accuracy)
            .collect();
        (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(out, "{}", r.to_csv_line());
        }
        out
    }
}
