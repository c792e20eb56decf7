use super::{ensure_finite, Tensor};
use crate::error::{Error, Result};

/// Saved state for [`dense_backward`].
#[derive(Debug, Clone)]
pub struct DenseCache {
    input: Tensor,
    weight: Tensor,
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// `out[m,n] = a[m,k] * b[k,n]`, accumulated into `out`.
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`.
pub(crate) fn matmul_at_b(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m,k] += a[m,n] * b[k,n]^T`.
pub(crate) fn matmul_a_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `y = x W + b` with `x: [batch, in]`, `W: [in, out]`, `b: [out]`.
pub fn dense_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(Tensor, DenseCache)> {
    if x.ndim() != 2 || weight.ndim() != 2 {
        return Err(Error::geometry("dense_forward", "input and weight must be 2-d"));
    }
    let (batch, fan_in) = (x.shape()[0], x.shape()[1]);
    let (w_in, fan_out) = (weight.shape()[0], weight.shape()[1]);
    if w_in != fan_in {
        return Err(Error::shape("dense_forward", &[fan_in, fan_out], weight.shape()));
    }
    bias.expect_shape("dense_forward", &[fan_out])?;

    let mut out = vec![0.0; batch * fan_out];
    for row in out.chunks_exact_mut(fan_out) {
        row.copy_from_slice(bias.data());
    }
    matmul(x.data(), weight.data(), &mut out, batch, fan_in, fan_out);
    ensure_finite(&out, "dense_forward")?;
    let y = Tensor::new(vec![batch, fan_out], out)?;
    Ok((
        y,
        DenseCache {
            input: x.clone(),
            weight: weight.clone(),
        },
    ))
}

pub fn dense_backward(grad_y: &Tensor, cache: &DenseCache) -> Result<DenseGrads> {
    let (batch, fan_in) = (cache.input.shape()[0], cache.input.shape()[1]);
    let fan_out = cache.weight.shape()[1];
    grad_y.expect_shape("dense_backward", &[batch, fan_out])?;

    let mut gx = vec![0.0; batch * fan_in];
    matmul_a_bt(grad_y.data(), cache.weight.data(), &mut gx, batch, fan_out, fan_in);
    let mut gw = vec![0.0; fan_in * fan_out];
    matmul_at_b(cache.input.data(), grad_y.data(), &mut gw, batch, fan_in, fan_out);
    let mut gb = vec![0.0; fan_out];
    for row in grad_y.data().chunks_exact(fan_out) {
        for (g, &r) in gb.iter_mut().zip(row) {
            *g += r;
        }
    }
    ensure_finite(&gx, "dense_backward")?;
    ensure_finite(&gw, "dense_backward")?;
    Ok(DenseGrads {
        input: Tensor::new(vec![batch, fan_in], gx)?,
        weight: Tensor::new(vec![fan_in, fan_out], gw)?,
        bias: Tensor::new(vec![fan_out], gb)?,
    })
}
