use super::{ensure_finite, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and fold them into the running
    /// averages with the given momentum.
    Train { momentum: f64 },
    /// Normalize with the running averages.
    Eval,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    shape: Vec<usize>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
    batch_stats: bool,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [b, c] => Ok((*b, *c, 1)),
        [b, c, rest @ ..] if !rest.is_empty() => Ok((*b, *c, rest.iter().product())),
        _ => Err(Error::geometry("batchnorm", "expected [batch, channels, ...]")),
    }
}

/// Per-channel normalization over the batch and all spatial positions.
///
/// Running variance is stored unbiased; negative running variances (which a
/// generated parameter vector can contain) are clamped to zero in eval mode.
pub fn batchnorm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &mut Tensor,
    running_var: &mut Tensor,
    mode: BatchNormMode,
) -> Result<(Tensor, BatchNormCache)> {
    let (b, c, s) = layout(x.shape())?;
    for t in [gamma, beta, &*running_mean, &*running_var] {
        t.expect_shape("batchnorm_forward", &[c])?;
    }
    let n = b * s;
    let data = x.data();
    let at = |bi: usize, ch: usize, si: usize| (bi * c + ch) * s + si;

    let (mean, var, batch_stats) = match mode {
        BatchNormMode::Train { momentum } => {
            if n < 2 {
                return Err(Error::geometry(
                    "batchnorm_forward",
                    "training mode needs more than one value per channel",
                ));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut acc = 0.0;
                for bi in 0..b {
                    for si in 0..s {
                        acc += data[at(bi, ch, si)];
                    }
                }
                mean[ch] = acc / n as f64;
                let mut sq = 0.0;
                for bi in 0..b {
                    for si in 0..s {
                        let d = data[at(bi, ch, si)] - mean[ch];
                        sq += d * d;
                    }
                }
                var[ch] = sq / n as f64;
            }
            let unbias = n as f64 / (n - 1) as f64;
            for ch in 0..c {
                let rm = &mut running_mean.data_mut()[ch];
                *rm = (1.0 - momentum) * *rm + momentum * mean[ch];
                let rv = &mut running_var.data_mut()[ch];
                *rv = (1.0 - momentum) * *rv + momentum * var[ch] * unbias;
            }
            (mean, var, true)
        }
        BatchNormMode::Eval => (
            running_mean.data().to_vec(),
            running_var.data().iter().map(|&v| v.max(0.0)).collect(),
            false,
        ),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ch in 0..c {
            for si in 0..s {
                let i = at(bi, ch, si);
                xhat[i] = (data[i] - mean[ch]) * inv_std[ch];
                out[i] = gamma.data()[ch] * xhat[i] + beta.data()[ch];
            }
        }
    }
    ensure_finite(&out, "batchnorm_forward")?;
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        BatchNormCache {
            shape: x.shape().to_vec(),
            xhat,
            inv_std,
            gamma: gamma.data().to_vec(),
            batch_stats,
        },
    ))
}

pub fn batchnorm_backward(grad_y: &Tensor, cache: &BatchNormCache) -> Result<BatchNormGrads> {
    grad_y.expect_shape("batchnorm_backward", &cache.shape)?;
    let (b, c, s) = layout(&cache.shape)?;
    let n = (b * s) as f64;
    let gy = grad_y.data();
    let at = |bi: usize, ch: usize, si: usize| (bi * c + ch) * s + si;

    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            for si in 0..s {
                let i = at(bi, ch, si);
                dbeta[ch] += gy[i];
                dgamma[ch] += gy[i] * cache.xhat[i];
            }
        }
    }
    let mut dx = vec![0.0; gy.len()];
    for bi in 0..b {
        for ch in 0..c {
            let scale = cache.gamma[ch] * cache.inv_std[ch];
            for si in 0..s {
                let i = at(bi, ch, si);
                dx[i] = if cache.batch_stats {
                    scale * (gy[i] - dbeta[ch] / n - cache.xhat[i] * dgamma[ch] / n)
                } else {
                    scale * gy[i]
                };
            }
        }
    }
    ensure_finite(&dx, "batchnorm_backward")?;
    Ok(BatchNormGrads {
        input: Tensor::new(cache.shape.clone(), dx)?,
        gamma: Tensor::new(vec![c], dgamma)?,
        beta: Tensor::new(vec![c], dbeta)?,
    })
}
