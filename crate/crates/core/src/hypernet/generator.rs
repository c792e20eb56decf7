use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FlatParams;
use crate::tensor::{dense_backward, dense_forward, ensure_finite, relu_backward, relu_forward, AdamState, Tensor};

/// A fully connected layer with its own Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParam {
    /// `[in, out]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub(crate) adam_w: AdamState,
    pub(crate) adam_b: AdamState,
}

impl DenseParam {
    pub fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = Tensor::from_fn(&[inputs, outputs], |_| rng.random_range(-bound..bound));
        let bias = Tensor::from_fn(&[outputs], |_| rng.random_range(-bound..bound));
        Self::from_tensors(weight, bias)
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Self {
        let (nw, nb) = (weight.len(), bias.len());
        Self {
            weight,
            bias,
            adam_w: AdamState::new(nw),
            adam_b: AdamState::new(nb),
        }
    }
}

/// Shared trunk: three dense layers with ReLU between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub layers: Vec<DenseParam>,
    pub trainable: bool,
}

impl FeatureExtractor {
    pub fn init(embed_dim: usize, hidden: usize, out: usize, rng: &mut impl Rng) -> Self {
        Self {
            layers: vec![
                DenseParam::init(embed_dim, hidden, rng),
                DenseParam::init(hidden, hidden, rng),
                DenseParam::init(hidden, out, rng),
            ],
            trainable: true,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.bias.len()).unwrap_or(0)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map(|l| l.weight.shape()[0]).unwrap_or(0)
    }
}

/// `tau` output channels, each a dense map from extractor features to a
/// length-`N` slice. Weight layout is `[tau, N, h]` so that output row `n`
/// of channel `j` is contiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadGroup {
    pub tau: usize,
    pub chunk: usize,
    pub hidden: usize,
    pub weight: Tensor,
    pub bias: Tensor,
    pub trainable: bool,
    pub(crate) adam_w: AdamState,
    pub(crate) adam_b: AdamState,
}

impl HeadGroup {
    pub fn init(tau: usize, hidden: usize, chunk: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden.max(1) as f64).sqrt();
        let weight = Tensor::from_fn(&[tau, chunk, hidden], |_| rng.random_range(-bound..bound));
        let bias = Tensor::from_fn(&[tau, chunk], |_| rng.random_range(-bound..bound));
        Self::from_tensors(tau, weight, bias)
    }

    /// Head-less variant: chunk `j` is the extractor output itself.
    pub fn passthrough(tau: usize, chunk: usize) -> Self {
        Self::from_tensors(tau, Tensor::zeros(&[tau, chunk, 0]), Tensor::zeros(&[tau, 0]))
    }

    pub fn from_tensors(tau: usize, weight: Tensor, bias: Tensor) -> Self {
        let (chunk, hidden) = match weight.shape() {
            [_, n, h] => (*n, *h),
            _ => (0, 0),
        };
        let (nw, nb) = (weight.len(), bias.len());
        Self {
            tau,
            chunk,
            hidden,
            weight,
            bias,
            trainable: true,
            adam_w: AdamState::new(nw),
            adam_b: AdamState::new(nb),
        }
    }

    pub fn has_params(&self) -> bool {
        self.hidden > 0
    }

    /// Weight row producing output `n` of channel `j`.
    pub fn weight_row_mut(&mut self, channel: usize, n: usize) -> &mut [f64] {
        let h = self.hidden;
        let start = (channel * self.chunk + n) * h;
        &mut self.weight.data_mut()[start..start + h]
    }
}

/// `tau` learnable rows of dimension `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    /// `[tau, d]`
    pub values: Tensor,
    pub trainable: bool,
    pub(crate) adam: AdamState,
}

impl EmbeddingMatrix {
    /// Rows drawn i.i.d. from `N(0, 1/d)`.
    pub fn init(rows: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        Self::from_tensor(Tensor::from_fn(&[rows, dim], |_| normal.sample(rng)))
    }

    pub fn from_tensor(values: Tensor) -> Self {
        let n = values.len();
        Self {
            values,
            trainable: true,
            adam: AdamState::new(n),
        }
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Gradients of `<generate(v), u>`.
#[derive(Debug, Clone)]
pub struct HypernetGrads {
    /// `(weight, bias)` per extractor layer.
    pub extractor: Vec<(Tensor, Tensor)>,
    /// `(weight, bias)` of the head, `None` for a head-less group.
    pub head: Option<(Tensor, Tensor)>,
    pub embedding: Tensor,
}

fn check_rows(group: &HeadGroup, embedding: &EmbeddingMatrix, extractor: &FeatureExtractor, k: usize) -> Result<()> {
    if embedding.rows() != group.tau {
        return Err(Error::InvalidArgument(format!(
            "embedding has {} rows but the head group has {} channels",
            embedding.rows(),
            group.tau
        )));
    }
    if embedding.dim() != extractor.input_dim() {
        return Err(Error::shape("hypernet", &[extractor.input_dim()], &[embedding.dim()]));
    }
    if k == 0 || k > group.tau * group.chunk {
        return Err(Error::InvalidArgument(format!(
            "parameter count {k} does not fit {} chunks of {}",
            group.tau, group.chunk
        )));
    }
    if group.has_params() && group.hidden != extractor.output_dim() {
        return Err(Error::shape("hypernet", &[extractor.output_dim()], &[group.hidden]));
    }
    if !group.has_params() && extractor.output_dim() != group.chunk {
        return Err(Error::shape("hypernet", &[group.chunk], &[extractor.output_dim()]));
    }
    Ok(())
}

fn chunk_len(k: usize, chunk: usize, j: usize) -> usize {
    (k - j * chunk).min(chunk)
}

/// `concat_j head_j(extractor(v_j))[..K]`.
pub fn generate_params(
    extractor: &FeatureExtractor,
    group: &HeadGroup,
    embedding: &EmbeddingMatrix,
    k: usize,
) -> Result<FlatParams> {
    check_rows(group, embedding, extractor, k)?;
    let features = extractor_forward(extractor, &embedding.values)?.0;
    let fdim = features.shape()[1];
    let mut out = Vec::with_capacity(k);
    for j in 0..group.tau {
        if j * group.chunk >= k {
            break;
        }
        let f = &features.data()[j * fdim..(j + 1) * fdim];
        let len = chunk_len(k, group.chunk, j);
        if group.has_params() {
            let h = group.hidden;
            let w = &group.weight.data()[j * group.chunk * h..];
            let b = &group.bias.data()[j * group.chunk..];
            for n in 0..len {
                let row = &w[n * h..(n + 1) * h];
                out.push(b[n] + row.iter().zip(f).map(|(a, x)| a * x).sum::<f64>());
            }
        } else {
            out.extend_from_slice(&f[..len]);
        }
    }
    ensure_finite(&out, "generate_params")?;
    Ok(FlatParams(out))
}

struct ExtractorTape {
    dense: Vec<crate::tensor::DenseCache>,
    relu: Vec<crate::tensor::ReluCache>,
}

fn extractor_forward(extractor: &FeatureExtractor, x: &Tensor) -> Result<(Tensor, ExtractorTape)> {
    let mut tape = ExtractorTape {
        dense: Vec::new(),
        relu: Vec::new(),
    };
    let mut h = x.clone();
    let last = extractor.layers.len() - 1;
    for (i, layer) in extractor.layers.iter().enumerate() {
        let (y, c) = dense_forward(&h, &layer.weight, &layer.bias)?;
        tape.dense.push(c);
        h = if i < last {
            let (r, rc) = relu_forward(&y);
            tape.relu.push(rc);
            r
        } else {
            y
        };
    }
    Ok((h, tape))
}

/// Exact gradient of `s = <generate_params(v, group, K), u>` with respect
/// to the extractor, this group's head and the embedding rows. Head outputs
/// past `K` in the last chunk get zero gradient.
pub fn hypernet_backward(
    extractor: &FeatureExtractor,
    group: &HeadGroup,
    embedding: &EmbeddingMatrix,
    k: usize,
    upstream: &[f64],
) -> Result<HypernetGrads> {
    check_rows(group, embedding, extractor, k)?;
    if upstream.len() != k {
        return Err(Error::LengthMismatch {
            expected: k,
            actual: upstream.len(),
        });
    }
    ensure_finite(upstream, "hypernet_backward")?;
    let (features, tape) = extractor_forward(extractor, &embedding.values)?;
    let fdim = features.shape()[1];
    let tau = group.tau;
    let mut grad_features = vec![0.0; tau * fdim];

    let head = if group.has_params() {
        let (n_out, h) = (group.chunk, group.hidden);
        let mut gw = vec![0.0; tau * n_out * h];
        let mut gb = vec![0.0; tau * n_out];
        for j in 0..tau {
            if j * n_out >= k {
                break;
            }
            let f = &features.data()[j * fdim..(j + 1) * fdim];
            let gf = &mut grad_features[j * fdim..(j + 1) * fdim];
            for n in 0..chunk_len(k, n_out, j) {
                let u = upstream[j * n_out + n];
                if u == 0.0 {
                    continue;
                }
                gb[j * n_out + n] = u;
                let row = (j * n_out + n) * h;
                let w = &group.weight.data()[row..row + h];
                for (g, &fv) in gw[row..row + h].iter_mut().zip(f) {
                    *g = u * fv;
                }
                for (g, &wv) in gf.iter_mut().zip(w) {
                    *g += u * wv;
                }
            }
        }
        Some((
            Tensor::new(vec![tau, n_out, h], gw)?,
            Tensor::new(vec![tau, n_out], gb)?,
        ))
    } else {
        for j in 0..tau {
            if j * group.chunk >= k {
                break;
            }
            let len = chunk_len(k, group.chunk, j);
            grad_features[j * fdim..j * fdim + len]
                .copy_from_slice(&upstream[j * group.chunk..j * group.chunk + len]);
        }
        None
    };

    let mut g = Tensor::new(vec![tau, fdim], grad_features)?;
    let mut extractor_grads = Vec::with_capacity(extractor.layers.len());
    for i in (0..extractor.layers.len()).rev() {
        if i < extractor.layers.len() - 1 {
            g = relu_backward(&g, &tape.relu[i])?;
        }
        let d = dense_backward(&g, &tape.dense[i])?;
        extractor_grads.push((d.weight, d.bias));
        g = d.input;
    }
    extractor_grads.reverse();
    Ok(HypernetGrads {
        extractor: extractor_grads,
        head,
        embedding: g,
    })
}
