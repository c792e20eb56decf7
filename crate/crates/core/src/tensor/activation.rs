use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ReluCache {
    mask: Vec<bool>,
    shape: Vec<usize>,
}

pub fn relu_forward(x: &Tensor) -> (Tensor, ReluCache) {
    let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
    let y = x.map(|v| if v > 0.0 { v } else { 0.0 });
    (
        y,
        ReluCache {
            mask,
            shape: x.shape().to_vec(),
        },
    )
}

pub fn relu_backward(grad_y: &Tensor, cache: &ReluCache) -> Result<Tensor> {
    grad_y.expect_shape("relu_backward", &cache.shape)?;
    let data = grad_y
        .data()
        .iter()
        .zip(&cache.mask)
        .map(|(&g, &m)| if m { g } else { 0.0 })
        .collect();
    Tensor::new(cache.shape.clone(), data)
}

pub fn residual_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("residual_add", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// The upstream gradient flows unchanged into both branches.
pub fn residual_add_backward(grad_y: &Tensor) -> (Tensor, Tensor) {
    (grad_y.clone(), grad_y.clone())
}
