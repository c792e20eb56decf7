use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ArchitectureSpec, Model};
use crate::error::{Error, Result};

/// A model's generated parameters in canonical packing order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatParams(pub Vec<f64>);

impl FlatParams {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Elementwise `self - other`.
    pub fn delta_from(&self, other: &FlatParams) -> Result<FlatParams> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                expected: other.len(),
                actual: self.len(),
            });
        }
        Ok(FlatParams(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }
}

impl From<Vec<f64>> for FlatParams {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// K: element count of every packed slot. Frozen layers count, local-only
/// layers (and local-norm tensors) do not.
pub fn flat_param_count(arch: &ArchitectureSpec) -> usize {
    arch.layers
        .iter()
        .flat_map(|l| l.slots().into_iter().map(move |s| (l, s)))
        .filter(|(l, s)| l.slot_is_packed(s.role))
        .map(|(_, s)| s.len)
        .sum()
}

/// Layer order, then slot order within the layer, each tensor row-major.
pub fn pack(model: &Model) -> FlatParams {
    let mut out = Vec::with_capacity(flat_param_count(model.arch()));
    for (layer, tensors) in model.arch().layers.iter().zip(model.params()) {
        for (slot, t) in layer.slots().iter().zip(tensors) {
            if layer.slot_is_packed(slot.role) {
                out.extend_from_slice(t.data());
            }
        }
    }
    FlatParams(out)
}

/// Overwrite the packed slots of `model`; local-only tensors are untouched.
pub fn unpack_into(model: &mut Model, flat: &FlatParams) -> Result<()> {
    let expected = flat_param_count(model.arch());
    if flat.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            actual: flat.len(),
        });
    }
    let arch = model.arch().clone();
    let mut offset = 0;
    for (layer, tensors) in arch.layers.iter().zip(model.params_mut()) {
        for (slot, t) in layer.slots().iter().zip(tensors.iter_mut()) {
            if layer.slot_is_packed(slot.role) {
                t.data_mut()
                    .copy_from_slice(&flat.0[offset..offset + slot.len]);
                offset += slot.len;
            }
        }
    }
    Ok(())
}

/// Fresh model whose packed slots come from `flat`; the rest start at zero
/// (batchnorm at identity).
pub fn unpack(arch: &Arc<ArchitectureSpec>, flat: &FlatParams) -> Result<Model> {
    let mut model = Model::zeros(arch.clone());
    unpack_into(&mut model, flat)?;
    Ok(model)
}
