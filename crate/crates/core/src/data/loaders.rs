use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Raw unsigned-byte IDX array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parse an IDX file. Only the unsigned byte element type (0x08) is
/// accepted.
pub fn read_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Dataset("bad IDX magic".into()));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Dataset(format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if ndim == 0 || bytes.len() < header {
        return Err(Error::Dataset("truncated IDX header".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let len: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() != len {
        return Err(Error::Dataset(format!(
            "IDX body has {} bytes, header promises {len}",
            body.len()
        )));
    }
    Ok(IdxArray {
        dims,
        data: body.to_vec(),
    })
}

/// Images scaled to `[0, 1]`, shape `[1, rows, cols]`. The class count is
/// one past the largest label.
pub fn load_idx(images: &Path, labels: &Path, name: &str) -> Result<Dataset> {
    let img = read_idx(&std::fs::read(images)?)?;
    let lab = read_idx(&std::fs::read(labels)?)?;
    if img.dims.len() != 3 || lab.dims.len() != 1 {
        return Err(Error::Dataset("expected [N, rows, cols] images and [N] labels".into()));
    }
    if img.dims[0] != lab.dims[0] {
        return Err(Error::Dataset(format!(
            "{} images but {} labels",
            img.dims[0], lab.dims[0]
        )));
    }
    if img.dims[0] == 0 {
        return Err(Error::Dataset("IDX file holds no items".into()));
    }
    let labels: Vec<usize> = lab.data.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let features = img.data.iter().map(|&p| p as f32 / 255.0).collect();
    Dataset::new(name, vec![1, img.dims[1], img.dims[2]], classes, features, labels)
}

/// Label layout of a CIFAR binary batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarLayout {
    Cifar10,
    Cifar100Coarse,
    Cifar100Fine,
}

impl CifarLayout {
    fn label_bytes(self) -> usize {
        match self {
            CifarLayout::Cifar10 => 1,
            _ => 2,
        }
    }

    fn classes(self) -> usize {
        match self {
            CifarLayout::Cifar10 => 10,
            CifarLayout::Cifar100Coarse => 20,
            CifarLayout::Cifar100Fine => 100,
        }
    }
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Concatenate CIFAR binary batch files into one `[3, 32, 32]` dataset.
pub fn load_cifar_binary(paths: &[impl AsRef<Path>], layout: CifarLayout, name: &str) -> Result<Dataset> {
    let row = layout.label_bytes() + CIFAR_PIXELS;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path)?;
        if bytes.is_empty() || bytes.len() % row != 0 {
            return Err(Error::Dataset(format!(
                "{}: {} bytes is not a whole number of {row}-byte records",
                path.as_ref().display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(row) {
            let label = match layout {
                CifarLayout::Cifar10 | CifarLayout::Cifar100Coarse => rec[0],
                CifarLayout::Cifar100Fine => rec[1],
            };
            labels.push(label as usize);
            features.extend(rec[layout.label_bytes()..].iter().map(|&p| p as f32 / 255.0));
        }
    }
    Dataset::new(name, vec![3, 32, 32], layout.classes(), features, labels)
}

/// Gaussian clusters around unit-norm class means. `spread` is the
/// per-coordinate standard deviation.
pub fn synth_blobs(classes: usize, per_class: usize, shape: &[usize], spread: f64, seed: u64) -> Result<Dataset> {
    let dim: usize = shape.iter().product();
    if classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::Dataset("blobs need classes, samples and features".into()));
    }
    if !(spread >= 0.0) {
        return Err(Error::InvalidArgument(format!("spread must be non-negative, got {spread}")));
    }
    let mut rng = stream_rng(seed, Stream::Data, &[0]);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut features = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for i in 0..classes * per_class {
        let c = i % classes;
        for &m in &means[c] {
            let z: f64 = rng.sample(StandardNormal);
            features.push((m + spread * z) as f32);
        }
        labels.push(c);
    }
    Dataset::new(format!("blobs-{classes}"), shape.to_vec(), classes, features, labels)
}
