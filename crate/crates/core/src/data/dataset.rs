use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labelled examples with a fixed per-example feature shape. Features are
/// kept as `f32` to halve memory and widened to `f64` per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    feature_shape: Vec<usize>,
    classes: usize,
    features: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        feature_shape: Vec<usize>,
        classes: usize,
        features: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let width: usize = feature_shape.iter().product();
        if labels.is_empty() {
            return Err(Error::Dataset("dataset has no examples".into()));
        }
        if width == 0 || features.len() != width * labels.len() {
            return Err(Error::Dataset(format!(
                "{} feature values for {} examples of width {width}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            name: name.into(),
            feature_shape,
            classes,
            features,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn feature_len(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self, index: usize) -> &[f32] {
        let w = self.feature_len();
        &self.features[index * w..(index + 1) * w]
    }

    /// Examples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of each class in ascending order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Examples of `parts` in order. Shapes must agree; the class count is
    /// the largest of the parts.
    pub fn concat(name: impl Into<String>, parts: &[Dataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Dataset("nothing to concatenate".into()))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.feature_shape != first.feature_shape {
                return Err(Error::shape("concat", &first.feature_shape, &p.feature_shape));
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        let classes = parts.iter().map(|p| p.classes).max().unwrap_or(0);
        Self::new(name, first.feature_shape.clone(), classes, features, labels)
    }

    /// `[B, feature_len]` batch and its labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let w = self.feature_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dataset(format!("index {i} out of range for {} examples", self.len())));
            }
            data.extend(self.features(i).iter().map(|&v| v as f64));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![indices.len(), w], data)?, labels))
    }
}
