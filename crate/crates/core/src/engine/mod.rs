//! Round orchestration.
//!
//! A [`Federation`] owns the clients, the dataset handle and the server
//! state for one algorithm. Each round samples participants, trains them
//! on a worker pool, and funnels every server-side mutation through one
//! sequential applier in ascending client id order, so results do not
//! depend on the number of workers.

mod client;
mod config;
mod federation;
mod metrics;
mod prune;

pub use client::{evaluate, train_local, ClientState, Teacher, TrainOutcome};
pub use config::{Algorithm, RoundConfig};
pub use federation::{weighted_average, Federation, FederationSetup, NewClient};
pub use metrics::{MetricRow, Phase, RoundMetrics, CSV_HEADER};
pub use prune::{keep_count, prune_delta, SparseDelta, INDEX_BYTES, VALUE_BYTES};
