use serde::{Deserialize, Serialize};

use super::dense::{matmul, matmul_a_bt, matmul_at_b};
use super::{ensure_finite, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// Output spatial size for one axis, or `None` if the kernel does not fit.
    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || kernel == 0 || kernel > padded {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dCache {
    input_shape: [usize; 4],
    kernel: Tensor,
    geometry: ConvGeometry,
    out_hw: (usize, usize),
    /// Column buffers, one `[cin*kh*kw, oh*ow]` matrix per batch item.
    cols: Vec<Vec<f64>>,
    has_bias: bool,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
}

struct Dims {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn im2col(x: &[f64], d: &Dims, g: ConvGeometry) -> Vec<f64> {
    let spatial = d.oh * d.ow;
    let mut cols = vec![0.0; d.cin * d.kh * d.kw * spatial];
    let pad = g.padding as isize;
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oi in 0..d.oh {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    if ii < 0 || ii >= d.h as isize {
                        continue;
                    }
                    let src_row = &plane[ii as usize * d.w..(ii as usize + 1) * d.w];
                    for oj in 0..d.ow {
                        let jj = (oj * g.stride + kj) as isize - pad;
                        if jj >= 0 && jj < d.w as isize {
                            dst[oi * d.ow + oj] = src_row[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], d: &Dims, g: ConvGeometry, out: &mut [f64]) {
    let spatial = d.oh * d.ow;
    let pad = g.padding as isize;
    for c in 0..d.cin {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oi in 0..d.oh {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    if ii < 0 || ii >= d.h as isize {
                        continue;
                    }
                    for oj in 0..d.ow {
                        let jj = (oj * g.stride + kj) as isize - pad;
                        if jj >= 0 && jj < d.w as isize {
                            out[(c * d.h + ii as usize) * d.w + jj as usize] += src[oi * d.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [batch, cin, h, w]` with `kernel: [cout, cin, kh, kw]`.
pub fn conv2d_forward(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    geometry: ConvGeometry,
) -> Result<(Tensor, Conv2dCache)> {
    if x.ndim() != 4 || kernel.ndim() != 4 {
        return Err(Error::geometry("conv2d_forward", "input and kernel must be 4-d"));
    }
    let (batch, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kcin, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kcin != cin {
        return Err(Error::shape("conv2d_forward", &[cout, cin, kh, kw], kernel.shape()));
    }
    if let Some(b) = bias {
        b.expect_shape("conv2d_forward", &[cout])?;
    }
    let (oh, ow) = match (geometry.output_size(h, kh), geometry.output_size(w, kw)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::geometry(
                "conv2d_forward",
                format!("kernel {kh}x{kw} does not fit input {h}x{w} with {geometry:?}"),
            ))
        }
    };
    let dims = Dims { cin, h, w, kh, kw, oh, ow };
    let ckk = cin * kh * kw;
    let spatial = oh * ow;
    let mut out = vec![0.0; batch * cout * spatial];
    let mut cols_all = Vec::with_capacity(batch);
    for b in 0..batch {
        let xb = &x.data()[b * cin * h * w..(b + 1) * cin * h * w];
        let cols = im2col(xb, &dims, geometry);
        let yb = &mut out[b * cout * spatial..(b + 1) * cout * spatial];
        if let Some(bias) = bias {
            for (o, row) in yb.chunks_exact_mut(spatial).enumerate() {
                row.iter_mut().for_each(|v| *v = bias.data()[o]);
            }
        }
        matmul(kernel.data(), &cols, yb, cout, ckk, spatial);
        cols_all.push(cols);
    }
    ensure_finite(&out, "conv2d_forward")?;
    Ok((
        Tensor::new(vec![batch, cout, oh, ow], out)?,
        Conv2dCache {
            input_shape: [batch, cin, h, w],
            kernel: kernel.clone(),
            geometry,
            out_hw: (oh, ow),
            cols: cols_all,
            has_bias: bias.is_some(),
        },
    ))
}

pub fn conv2d_backward(grad_y: &Tensor, cache: &Conv2dCache) -> Result<Conv2dGrads> {
    let [batch, cin, h, w] = cache.input_shape;
    let ks = cache.kernel.shape();
    let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
    let (oh, ow) = cache.out_hw;
    grad_y.expect_shape("conv2d_backward", &[batch, cout, oh, ow])?;
    let dims = Dims { cin, h, w, kh, kw, oh, ow };
    let ckk = cin * kh * kw;
    let spatial = oh * ow;

    let mut gx = vec![0.0; batch * cin * h * w];
    let mut gk = vec![0.0; cout * ckk];
    let mut gb = vec![0.0; cout];
    let mut gcols = vec![0.0; ckk * spatial];
    for b in 0..batch {
        let gyb = &grad_y.data()[b * cout * spatial..(b + 1) * cout * spatial];
        matmul_a_bt(gyb, &cache.cols[b], &mut gk, cout, spatial, ckk);
        gcols.iter_mut().for_each(|v| *v = 0.0);
        matmul_at_b(cache.kernel.data(), gyb, &mut gcols, cout, ckk, spatial);
        col2im(&gcols, &dims, cache.geometry, &mut gx[b * cin * h * w..(b + 1) * cin * h * w]);
        for (o, row) in gyb.chunks_exact(spatial).enumerate() {
            gb[o] += row.iter().sum::<f64>();
        }
    }
    ensure_finite(&gx, "conv2d_backward")?;
    ensure_finite(&gk, "conv2d_backward")?;
    Ok(Conv2dGrads {
        input: Tensor::new(vec![batch, cin, h, w], gx)?,
        kernel: Tensor::new(ks.to_vec(), gk)?,
        bias: if cache.has_bias {
            Some(Tensor::new(vec![cout], gb)?)
        } else {
            None
        },
    })
}
