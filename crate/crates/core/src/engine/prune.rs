use crate::error::{Error, Result};
use crate::model::FlatParams;

/// Bytes per transmitted parameter value.
pub const VALUE_BYTES: u64 = 4;
/// Bytes per transmitted index of a sparse entry.
pub const INDEX_BYTES: u64 = 4;

/// `(index, value)` pairs of a pruned delta.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDelta {
    pub len: usize,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseDelta {
    pub fn to_dense(&self) -> FlatParams {
        let mut out = vec![0.0; self.len];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        FlatParams(out)
    }

    pub fn wire_bytes(&self) -> u64 {
        self.indices.len() as u64 * (INDEX_BYTES + VALUE_BYTES)
    }
}

/// `ceil(fraction * k)`, with products within rounding noise of an
/// integer taken as that integer.
pub fn keep_count(k: usize, fraction: f64) -> usize {
    let x = fraction * k as f64;
    let r = x.round();
    let n = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.ceil() };
    (n as usize).min(k)
}

/// Keep the `ceil(fraction * K)` entries of largest magnitude, lower index
/// first among equal magnitudes.
pub fn prune_delta(delta: &FlatParams, fraction: f64) -> Result<SparseDelta> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("prune fraction must be in (0, 1), got {fraction}")));
    }
    let v = delta.as_slice();
    let keep = keep_count(v.len(), fraction);
    let mut order: Vec<usize> = (0..v.len()).collect();
    let rank = |a: &usize, b: &usize| v[*b].abs().total_cmp(&v[*a].abs()).then(a.cmp(b));
    if keep < order.len() && keep > 0 {
        order.select_nth_unstable_by(keep - 1, rank);
    }
    order.truncate(keep);
    order.sort_unstable();
    Ok(SparseDelta {
        len: v.len(),
        values: order.iter().map(|&i| v[i]).collect(),
        indices: order,
    })
}
