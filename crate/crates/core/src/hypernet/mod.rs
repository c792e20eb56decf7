//! The server-side hypernetwork.
//!
//! A client with `K` parameters gets `tau = ceil(K / N)` embedding rows.
//! Each row goes through the shared feature extractor and then through its
//! own output channel of the head that the client's group owns; the `tau`
//! length-`N` slices are concatenated and truncated to `K`. Clients whose
//! grouping key matches (by default: equal `tau`) share one head object.
//!
//! Updates take a client's parameter delta, form the upstream gradient
//! `u = served - trained`, pull it back through the generator
//! (vector-Jacobian product) and apply Adam to the extractor, the client's
//! head and the client's embedding rows.

mod checkpoint;
mod generator;
mod registry;

pub use generator::{
    generate_params, hypernet_backward, DenseParam, EmbeddingMatrix, FeatureExtractor, HeadGroup,
    HypernetGrads,
};
pub use registry::{
    chunk_count, global_upstream, ClientId, EmbeddingKey, FreezeHandle, FreezeMode, GroupKey,
    Grouping, HypernetConfig, Hypernetwork, Registration,
};

#[cfg(test)]
mod tests;
