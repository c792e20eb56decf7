use super::Tensor;
use crate::error::{Error, Result};

/// Flat input index of the winning element for every output position.
#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AvgPoolCache {
    input_shape: Vec<usize>,
    kernel: usize,
}

fn spatial_dims(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if x.ndim() != 4 {
        return Err(Error::geometry(op, "expected [batch, channels, h, w]"));
    }
    let s = x.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

/// 2x2 max pooling with stride 2; odd trailing rows/cols are dropped.
pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, MaxPoolCache)> {
    let (b, c, h, w) = spatial_dims(x, "maxpool2_forward")?;
    if h < 2 || w < 2 {
        return Err(Error::geometry("maxpool2_forward", format!("input {h}x{w} smaller than 2x2")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    let data = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(vec![b, c, oh, ow], out)?,
        MaxPoolCache {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2_backward(grad_y: &Tensor, cache: &MaxPoolCache) -> Result<Tensor> {
    if grad_y.len() != cache.argmax.len() {
        return Err(Error::shape("maxpool2_backward", &[cache.argmax.len()], grad_y.shape()));
    }
    let mut gx = Tensor::zeros(&cache.input_shape);
    let gxd = gx.data_mut();
    for (&idx, &g) in cache.argmax.iter().zip(grad_y.data()) {
        gxd[idx] += g;
    }
    Ok(gx)
}

/// Non-overlapping `kernel x kernel` average pooling (stride = kernel).
pub fn avgpool_forward(x: &Tensor, kernel: usize) -> Result<(Tensor, AvgPoolCache)> {
    let (b, c, h, w) = spatial_dims(x, "avgpool_forward")?;
    if kernel == 0 || kernel > h || kernel > w {
        return Err(Error::geometry(
            "avgpool_forward",
            format!("kernel {kernel} does not fit input {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / kernel, w / kernel);
    let scale = 1.0 / (kernel * kernel) as f64;
    let mut out = vec![0.0; b * c * oh * ow];
    let data = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for di in 0..kernel {
                    let row = base + (i * kernel + di) * w + j * kernel;
                    acc += data[row..row + kernel].iter().sum::<f64>();
                }
                out[(plane * oh + i) * ow + j] = acc * scale;
            }
        }
    }
    Ok((
        Tensor::new(vec![b, c, oh, ow], out)?,
        AvgPoolCache {
            input_shape: x.shape().to_vec(),
            kernel,
        },
    ))
}

pub fn avgpool_backward(grad_y: &Tensor, cache: &AvgPoolCache) -> Result<Tensor> {
    let s = &cache.input_shape;
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let k = cache.kernel;
    let (oh, ow) = (h / k, w / k);
    grad_y.expect_shape("avgpool_backward", &[b, c, oh, ow])?;
    let scale = 1.0 / (k * k) as f64;
    let mut gx = Tensor::zeros(s);
    let gxd = gx.data_mut();
    for plane in 0..b * c {
        for i in 0..oh {
            for j in 0..ow {
                let g = grad_y.data()[(plane * oh + i) * ow + j] * scale;
                for di in 0..k {
                    let row = plane * h * w + (i * k + di) * w + j * k;
                    gxd[row..row + k].iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
    Ok(gx)
}
