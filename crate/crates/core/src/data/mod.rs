//! Datasets, loaders and non-IID client partitions.

mod dataset;
mod loaders;
mod partition;

pub use dataset::Dataset;
pub use loaders::{load_cifar_binary, load_idx, read_idx, synth_blobs, CifarLayout, IdxArray};
pub use partition::{
    largest_remainder, partition_dirichlet, partition_quantity_skew, ClientSplit, PartitionPlan,
    PartitionScheme, TRAIN_FRACTION,
};
