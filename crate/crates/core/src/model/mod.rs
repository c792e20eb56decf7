//! Client architectures, the canonical flat packing that maps a
//! hypernetwork output onto real weights, and local training.

mod arch;
mod network;
mod params;
pub mod zoo;

pub use arch::{ArchitectureSpec, LayerFlags, LayerKind, LayerSpec, SlotRole, SlotSpec};
pub use network::{Distillation, Mode, Model, StepStats, Tape};
pub use params::{flat_param_count, pack, unpack, unpack_into, FlatParams};
