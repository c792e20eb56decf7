use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ArchitectureSpec, LayerKind, LayerSpec, SlotRole};
use crate::error::{Error, Result};
use crate::tensor::{
    avgpool_backward, avgpool_forward, batchnorm_backward, batchnorm_forward, conv2d_backward,
    conv2d_forward, dense_backward, dense_forward, kd_loss, maxpool2_backward, maxpool2_forward,
    relu_backward, relu_forward, residual_add, softmax_cross_entropy, AvgPoolCache,
    BatchNormCache, BatchNormMode, Conv2dCache, ConvGeometry, DenseCache, MaxPoolCache, ReluCache,
    SgdState, Tensor,
};

const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A concrete instance of an [`ArchitectureSpec`]: one tensor per slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    arch: Arc<ArchitectureSpec>,
    params: Vec<Vec<Tensor>>,
}

/// Teacher signal for a distillation step. The objective is
/// `lambda * CE + (1 - lambda) * KD(T)`.
#[derive(Debug, Clone, Copy)]
pub struct Distillation<'a> {
    pub teacher_logits: &'a Tensor,
    pub lambda: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

enum LayerCache {
    Dense(DenseCache),
    Conv(Conv2dCache),
    Norm(BatchNormCache),
    Relu(ReluCache),
    MaxPool(MaxPoolCache),
    AvgPool(AvgPoolCache),
    Flatten(Vec<usize>),
    Residual(Box<ResidualCache>),
}

struct ResidualCache {
    conv1: Conv2dCache,
    bn1: BatchNormCache,
    relu1: ReluCache,
    conv2: Conv2dCache,
    bn2: BatchNormCache,
    projection: Option<(Conv2dCache, BatchNormCache)>,
    relu_out: ReluCache,
}

/// Activations saved by [`Model::forward`] for [`Model::backward`].
pub struct Tape {
    caches: Vec<LayerCache>,
}

fn fan_in_bound(shape: &[usize]) -> f64 {
    let fan_in: usize = match shape {
        [inputs, _] => *inputs,
        [_, cin, kh, kw] => cin * kh * kw,
        _ => 1,
    };
    1.0 / (fan_in.max(1) as f64).sqrt()
}

impl Model {
    /// Weights start at zero and batchnorm at the identity transform.
    pub fn zeros(arch: Arc<ArchitectureSpec>) -> Self {
        let params = arch
            .layers
            .iter()
            .map(|l| {
                l.slots()
                    .iter()
                    .map(|s| match s.role {
                        SlotRole::Gamma | SlotRole::RunningVar => Tensor::filled(&s.shape, 1.0),
                        _ => Tensor::zeros(&s.shape),
                    })
                    .collect()
            })
            .collect();
        Self { arch, params }
    }

    /// Uniform `±1/sqrt(fan_in)` for weights and the bias of the same layer.
    pub fn init(arch: Arc<ArchitectureSpec>, rng: &mut impl Rng) -> Self {
        let mut model = Self::zeros(arch);
        let arch = model.arch.clone();
        for (layer, tensors) in arch.layers.iter().zip(model.params.iter_mut()) {
            let mut bound = 0.0;
            for (slot, t) in layer.slots().iter().zip(tensors.iter_mut()) {
                match slot.role {
                    SlotRole::Weight => {
                        bound = fan_in_bound(&slot.shape);
                        t.data_mut()
                            .iter_mut()
                            .for_each(|v| *v = rng.random_range(-bound..bound));
                    }
                    SlotRole::Bias => t
                        .data_mut()
                        .iter_mut()
                        .for_each(|v| *v = rng.random_range(-bound..bound)),
                    _ => {}
                }
            }
        }
        model
    }

    pub fn arch(&self) -> &Arc<ArchitectureSpec> {
        &self.arch
    }

    pub fn params(&self) -> &[Vec<Tensor>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<Tensor>] {
        &mut self.params
    }

    fn norm_mode(layer: &LayerSpec, mode: Mode) -> BatchNormMode {
        match mode {
            Mode::Train if !layer.flags.frozen => BatchNormMode::Train {
                momentum: BN_MOMENTUM,
            },
            _ => BatchNormMode::Eval,
        }
    }

    /// Logits for a batch `[batch, ...input_shape]`. Train mode updates
    /// batchnorm running statistics of non-frozen layers.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tape)> {
        let arch = self.arch.clone();
        let per_sample: usize = arch.input_shape.iter().product();
        if x.ndim() == 0 || x.len() != x.shape()[0] * per_sample {
            let mut want = vec![x.shape().first().copied().unwrap_or(0)];
            want.extend(&arch.input_shape);
            return Err(Error::shape("model_forward", &want, x.shape()));
        }
        let mut shape = vec![x.shape()[0]];
        shape.extend(&arch.input_shape);
        let mut h = x.clone().reshape(&shape)?;
        let mut caches = Vec::with_capacity(arch.layers.len());

        for (layer, tensors) in arch.layers.iter().zip(self.params.iter_mut()) {
            let (out, cache) = match layer.kind {
                LayerKind::Dense { .. } => {
                    let (y, c) = dense_forward(&h, &tensors[0], &tensors[1])?;
                    (y, LayerCache::Dense(c))
                }
                LayerKind::Conv2d {
                    stride, padding, bias, ..
                } => {
                    let b = if bias { Some(&tensors[1]) } else { None };
                    let (y, c) = conv2d_forward(&h, &tensors[0], b, ConvGeometry::new(stride, padding))?;
                    (y, LayerCache::Conv(c))
                }
                LayerKind::BatchNorm { .. } => {
                    let (y, c) = norm_forward(&h, &mut tensors[0..4], Self::norm_mode(layer, mode))?;
                    (y, LayerCache::Norm(c))
                }
                LayerKind::Relu => {
                    let (y, c) = relu_forward(&h);
                    (y, LayerCache::Relu(c))
                }
                LayerKind::MaxPool => {
                    let (y, c) = maxpool2_forward(&h)?;
                    (y, LayerCache::MaxPool(c))
                }
                LayerKind::AvgPool { kernel } => {
                    let (y, c) = avgpool_forward(&h, kernel)?;
                    (y, LayerCache::AvgPool(c))
                }
                LayerKind::Flatten => {
                    let in_shape = h.shape().to_vec();
                    let batch = in_shape[0];
                    let rest = h.len() / batch.max(1);
                    (h.reshape(&[batch, rest])?, LayerCache::Flatten(in_shape))
                }
                LayerKind::ResidualBlock { stride, .. } => {
                    let (y, c) = residual_forward(&h, tensors, stride, Self::norm_mode(layer, mode))?;
                    (y, LayerCache::Residual(Box::new(c)))
                }
            };
            h = out;
            caches.push(cache);
        }
        Ok((h, Tape { caches }))
    }

    /// Gradients for every slot given `d loss / d logits`. Running-statistic
    /// slots always get zeros.
    pub fn backward(&self, tape: &Tape, grad_logits: &Tensor) -> Result<Vec<Vec<Tensor>>> {
        let mut grads: Vec<Vec<Tensor>> = self
            .params
            .iter()
            .map(|ts| ts.iter().map(|t| Tensor::zeros(t.shape())).collect())
            .collect();
        let mut g = grad_logits.clone();
        for (i, cache) in tape.caches.iter().enumerate().rev() {
            g = match cache {
                LayerCache::Dense(c) => {
                    let d = dense_backward(&g, c)?;
                    grads[i][0] = d.weight;
                    grads[i][1] = d.bias;
                    d.input
                }
                LayerCache::Conv(c) => {
                    let d = conv2d_backward(&g, c)?;
                    grads[i][0] = d.kernel;
                    if let Some(b) = d.bias {
                        grads[i][1] = b;
                    }
                    d.input
                }
                LayerCache::Norm(c) => {
                    let d = batchnorm_backward(&g, c)?;
                    grads[i][0] = d.gamma;
                    grads[i][1] = d.beta;
                    d.input
                }
                LayerCache::Relu(c) => relu_backward(&g, c)?,
                LayerCache::MaxPool(c) => maxpool2_backward(&g, c)?,
                LayerCache::AvgPool(c) => avgpool_backward(&g, c)?,
                LayerCache::Flatten(shape) => g.reshape(shape)?,
                LayerCache::Residual(c) => residual_backward(&g, c, &mut grads[i])?,
            };
        }
        Ok(grads)
    }

    /// One SGD step on a batch. Frozen layers and running statistics are
    /// left untouched; local-only layers train like any other.
    pub fn train_step(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        sgd: &mut SgdState,
        distill: Option<Distillation<'_>>,
    ) -> Result<StepStats> {
        let (logits, tape) = self.forward(x, Mode::Train)?;
        let (ce, ce_grad) = softmax_cross_entropy(&logits, labels)?;
        let correct = count_correct(&logits, labels);
        let (loss, grad) = match distill {
            None => (ce, ce_grad),
            Some(d) => {
                let (kd, kd_grad) = kd_loss(&logits, d.teacher_logits, d.temperature)?;
                let mix = 1.0 - d.lambda;
                let grad_data = ce_grad
                    .data()
                    .iter()
                    .zip(kd_grad.data())
                    .map(|(c, k)| d.lambda * c + mix * k)
                    .collect();
                (
                    d.lambda * ce + mix * kd,
                    Tensor::new(ce_grad.shape().to_vec(), grad_data)?,
                )
            }
        };
        let grads = self.backward(&tape, &grad)?;

        let arch = self.arch.clone();
        let mut slot_id = 0;
        for ((layer, tensors), layer_grads) in arch.layers.iter().zip(self.params.iter_mut()).zip(&grads) {
            for ((slot, t), g) in layer.slots().iter().zip(tensors.iter_mut()).zip(layer_grads) {
                if !layer.flags.frozen && slot.role.trainable() {
                    sgd.step(slot_id, t, g)?;
                }
                slot_id += 1;
            }
        }
        Ok(StepStats {
            loss,
            correct,
            count: labels.len(),
        })
    }

    /// Eval-mode batch metrics; `loss` is the batch mean.
    pub fn evaluate_batch(&mut self, x: &Tensor, labels: &[usize]) -> Result<StepStats> {
        let (logits, _) = self.forward(x, Mode::Eval)?;
        let (loss, _) = softmax_cross_entropy(&logits, labels)?;
        Ok(StepStats {
            loss,
            correct: count_correct(&logits, labels),
            count: labels.len(),
        })
    }

    pub fn logits(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, Mode::Eval)?.0)
    }
}

/// Top-1 hits; ties resolve to the lowest class index.
pub(crate) fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best == label
        })
        .count()
}

fn norm_forward(x: &Tensor, slots: &mut [Tensor], mode: BatchNormMode) -> Result<(Tensor, BatchNormCache)> {
    let (affine, stats) = slots.split_at_mut(2);
    let (mean, var) = stats.split_at_mut(1);
    batchnorm_forward(x, &affine[0], &affine[1], &mut mean[0], &mut var[0], mode)
}

fn residual_forward(
    x: &Tensor,
    t: &mut [Tensor],
    stride: usize,
    mode: BatchNormMode,
) -> Result<(Tensor, ResidualCache)> {
    let (c1, conv1) = conv2d_forward(x, &t[0], None, ConvGeometry::new(stride, 1))?;
    let (b1, bn1) = norm_forward(&c1, &mut t[1..5], mode)?;
    let (r1, relu1) = relu_forward(&b1);
    let (c2, conv2) = conv2d_forward(&r1, &t[5], None, ConvGeometry::new(1, 1))?;
    let (b2, bn2) = norm_forward(&c2, &mut t[6..10], mode)?;
    let (shortcut, projection) = if t.len() > 10 {
        let (cp, convp) = conv2d_forward(x, &t[10], None, ConvGeometry::new(stride, 0))?;
        let (bp, bnp) = norm_forward(&cp, &mut t[11..15], mode)?;
        (bp, Some((convp, bnp)))
    } else {
        (x.clone(), None)
    };
    let sum = residual_add(&b2, &shortcut)?;
    let (out, relu_out) = relu_forward(&sum);
    Ok((
        out,
        ResidualCache {
            conv1,
            bn1,
            relu1,
            conv2,
            bn2,
            projection,
            relu_out,
        },
    ))
}

fn residual_backward(g: &Tensor, c: &ResidualCache, grads: &mut [Tensor]) -> Result<Tensor> {
    let g_sum = relu_backward(g, &c.relu_out)?;
    // main branch
    let d_bn2 = batchnorm_backward(&g_sum, &c.bn2)?;
    grads[6] = d_bn2.gamma;
    grads[7] = d_bn2.beta;
    let d_conv2 = conv2d_backward(&d_bn2.input, &c.conv2)?;
    grads[5] = d_conv2.kernel;
    let g_r1 = relu_backward(&d_conv2.input, &c.relu1)?;
    let d_bn1 = batchnorm_backward(&g_r1, &c.bn1)?;
    grads[1] = d_bn1.gamma;
    grads[2] = d_bn1.beta;
    let d_conv1 = conv2d_backward(&d_bn1.input, &c.conv1)?;
    grads[0] = d_conv1.kernel;
    let mut gx = d_conv1.input;
    // skip branch
    let g_skip = match &c.projection {
        Some((convp, bnp)) => {
            let d_bnp = batchnorm_backward(&g_sum, bnp)?;
            grads[11] = d_bnp.gamma;
            grads[12] = d_bnp.beta;
            let d_convp = conv2d_backward(&d_bnp.input, convp)?;
            grads[10] = d_convp.kernel;
            d_convp.input
        }
        None => g_sum,
    };
    gx.axpy(1.0, &g_skip)?;
    Ok(gx)
}
