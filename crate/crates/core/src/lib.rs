//! Model-heterogeneous personalized federated learning driven by a
//! server-side hypernetwork.
//!
//! The server keeps one hypernetwork whose shared feature extractor and
//! per-size heads emit flat parameter vectors for clients that run
//! different architectures. Clients train locally and send back parameter
//! deltas; the server turns each delta into a vector-Jacobian product and
//! updates itself with Adam. An optional lightweight global model, generated
//! by the same hypernetwork, doubles as a distillation teacher.
//!
//! Crate layout:
//!
//! * [`tensor`]: dense tensors with hand-written forward/backward kernels,
//!   losses and optimizers.
//! * [`model`]: declarative client architectures, canonical flat packing
//!   and local training.
//! * [`hypernet`]: the hypernetwork, head registry and its update rules.
//! * [`data`]: dataset loaders, a synthetic generator and non-IID partitions.
//! * [`engine`]: round orchestration for all algorithms and baselines.
//! * [`experiment`]: run configuration, presets and artifact handling.

pub mod data;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod hypernet;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
