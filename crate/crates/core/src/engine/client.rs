use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ClientSplit, Dataset};
use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, Distillation, Model, StepStats};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{SgdConfig, SgdState};

const EVAL_BATCH: usize = 256;

/// Everything one client keeps between rounds. Layers marked local-only
/// live in `model` and are never packed, so they persist across rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub id: usize,
    pub split: ClientSplit,
    pub model: Model,
}

impl ClientState {
    pub fn arch(&self) -> &Arc<ArchitectureSpec> {
        self.model.arch()
    }

    /// Training sample count.
    pub fn samples(&self) -> usize {
        self.split.train.len()
    }
}

/// Frozen model whose eval-mode logits supervise distillation.
#[derive(Debug, Clone, Copy)]
pub struct Teacher<'a> {
    pub model: &'a Model,
    pub lambda: f64,
    pub temperature: f64,
}

/// Last-epoch training metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrainOutcome {
    pub accuracy: f64,
    pub loss: f64,
    pub samples: usize,
}

impl TrainOutcome {
    fn from_stats(s: &[StepStats]) -> Self {
        let count: usize = s.iter().map(|b| b.count).sum();
        if count == 0 {
            return Self {
                accuracy: f64::NAN,
                loss: f64::NAN,
                samples: 0,
            };
        }
        let correct: usize = s.iter().map(|b| b.correct).sum();
        let loss: f64 = s.iter().map(|b| b.loss * b.count as f64).sum();
        Self {
            accuracy: correct as f64 / count as f64,
            loss: loss / count as f64,
            samples: count,
        }
    }
}

/// Batches of a shuffled index list. A trailing batch of one joins the
/// batch before it, since batch statistics need two samples.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("nonempty") = &order[start..];
    }
    out
}

/// `epochs` passes of minibatch SGD with a fresh optimizer state. Epoch
/// `e` is shuffled by the stream tagged `tags ++ [e]`.
pub fn train_local(
    model: &mut Model,
    ds: &Dataset,
    indices: &[usize],
    epochs: usize,
    batch_size: usize,
    sgd: SgdConfig,
    seed: u64,
    tags: &[u64],
    teacher: Option<Teacher<'_>>,
) -> Result<TrainOutcome> {
    if indices.is_empty() {
        return Err(Error::Dataset("client has no training samples".into()));
    }
    let mut state = SgdState::new(sgd);
    let mut teacher_model = teacher.map(|t| t.model.clone());
    let mut last = Vec::new();
    for epoch in 0..epochs {
        let mut order = indices.to_vec();
        let mut epoch_tags = tags.to_vec();
        epoch_tags.push(epoch as u64);
        order.shuffle(&mut stream_rng(seed, Stream::Batching, &epoch_tags));
        last.clear();
        for batch in batches(&order, batch_size) {
            let (x, y) = ds.batch(batch)?;
            let stats = match (&mut teacher_model, teacher) {
                (Some(tm), Some(t)) => {
                    let teacher_logits = tm.logits(&x)?;
                    let d = Distillation {
                        teacher_logits: &teacher_logits,
                        lambda: t.lambda,
                        temperature: t.temperature,
                    };
                    model.train_step(&x, &y, &mut state, Some(d))?
                }
                _ => model.train_step(&x, &y, &mut state, None)?,
            };
            last.push(stats);
        }
    }
    Ok(TrainOutcome::from_stats(&last))
}

/// Eval-mode top-1 accuracy and mean loss over `indices`.
pub fn evaluate(model: &mut Model, ds: &Dataset, indices: &[usize]) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    let mut stats = Vec::new();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, y) = ds.batch(chunk)?;
        stats.push(model.evaluate_batch(&x, &y)?);
    }
    let o = TrainOutcome::from_stats(&stats);
    Ok((o.accuracy, o.loss))
}
