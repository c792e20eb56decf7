use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Share of each client's samples used for training.
pub const TRAIN_FRACTION: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum PartitionScheme {
    QuantitySkew { classes_per_client: usize, strict: bool },
    Dirichlet { beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    #[serde(flatten)]
    pub scheme: PartitionScheme,
    pub seed: u64,
    pub clients: Vec<ClientSplit>,
}

impl PartitionPlan {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("partition plan: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Labels present in a client's shard.
    pub fn label_set(&self, ds: &Dataset, client: usize) -> Vec<usize> {
        let c = &self.clients[client];
        let mut labels: Vec<usize> = c.train.iter().chain(&c.test).map(|&i| ds.labels()[i]).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }
}

/// Split `total` into integer parts proportional to `weights`. Leftover
/// units go to the largest fractional parts, lower index first on ties.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || !(sum > 0.0) {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Stratified train/test split of one client's indices.
fn split_client(ds: &Dataset, mut indices: Vec<usize>, seed: u64, client: usize) -> ClientSplit {
    let mut rng = stream_rng(seed, Stream::Partition, &[9, client as u64]);
    indices.sort_unstable();
    let mut by_class = vec![Vec::new(); ds.classes()];
    for &i in &indices {
        by_class[ds.labels()[i]].push(i);
    }
    let present: Vec<usize> = (0..ds.classes()).filter(|&c| !by_class[c].is_empty()).collect();
    let target = (TRAIN_FRACTION * indices.len() as f64).round() as usize;
    let sizes: Vec<f64> = present.iter().map(|&c| by_class[c].len() as f64).collect();
    let train_counts = largest_remainder(target, &sizes);
    let mut split = ClientSplit {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (&c, &n_train) in present.iter().zip(&train_counts) {
        let members = &mut by_class[c];
        members.shuffle(&mut rng);
        let n_train = n_train.min(members.len());
        split.train.extend_from_slice(&members[..n_train]);
        split.test.extend_from_slice(&members[n_train..]);
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    split
}

fn finish(ds: &Dataset, scheme: PartitionScheme, seed: u64, shards: Vec<Vec<usize>>) -> PartitionPlan {
    let clients = shards
        .into_iter()
        .enumerate()
        .map(|(i, s)| split_client(ds, s, seed, i))
        .collect();
    PartitionPlan { scheme, seed, clients }
}

/// Each client picks `classes_per_client` classes at random; every class is
/// divided among the clients that picked it in proportion to
/// `alpha ~ U(0.4, 0.6)`. Classes nobody picked are handed out round-robin
/// by swapping them in for a class some other client also holds, so every
/// label set keeps its cardinality. Without enough slots to cover every
/// class, `strict` turns this into an error; otherwise the uncovered
/// classes are dropped.
pub fn partition_quantity_skew(
    ds: &Dataset,
    n_clients: usize,
    classes_per_client: usize,
    strict: bool,
    seed: u64,
) -> Result<PartitionPlan> {
    let classes = ds.classes();
    if n_clients == 0 {
        return Err(Error::NoClients);
    }
    if classes_per_client == 0 || classes_per_client > classes {
        return Err(Error::InvalidArgument(format!(
            "classes per client must be in 1..={classes}, got {classes_per_client}"
        )));
    }
    if strict && n_clients * classes_per_client < classes {
        return Err(Error::InvalidArgument(format!(
            "{n_clients} clients x {classes_per_client} classes cannot cover {classes} classes"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Partition, &[1]);
    let mut chosen: Vec<Vec<usize>> = (0..n_clients)
        .map(|_| {
            let mut s = index::sample(&mut rng, classes, classes_per_client).into_vec();
            s.sort_unstable();
            s
        })
        .collect();

    let mut owners = vec![0usize; classes];
    for set in &chosen {
        for &c in set {
            owners[c] += 1;
        }
    }
    let mut cursor = 0;
    for orphan in 0..classes {
        if owners[orphan] > 0 {
            continue;
        }
        for step in 0..n_clients {
            let i = (cursor + step) % n_clients;
            if let Some(pos) = chosen[i].iter().position(|&c| owners[c] >= 2) {
                owners[chosen[i][pos]] -= 1;
                owners[orphan] += 1;
                chosen[i][pos] = orphan;
                chosen[i].sort_unstable();
                cursor = i + 1;
                break;
            }
        }
    }

    let alpha: Vec<Vec<f64>> = chosen
        .iter()
        .map(|set| set.iter().map(|_| rng.random_range(0.4..0.6)).collect())
        .collect();
    let mut shards = vec![Vec::new(); n_clients];
    for (c, mut members) in ds.class_indices().into_iter().enumerate() {
        let holders: Vec<(usize, f64)> = chosen
            .iter()
            .enumerate()
            .filter_map(|(i, set)| set.iter().position(|&x| x == c).map(|p| (i, alpha[i][p])))
            .collect();
        if holders.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let weights: Vec<f64> = holders.iter().map(|h| h.1).collect();
        let mut start = 0;
        for ((client, _), n) in holders.iter().zip(largest_remainder(members.len(), &weights)) {
            shards[*client].extend_from_slice(&members[start..start + n]);
            start += n;
        }
    }
    Ok(finish(
        ds,
        PartitionScheme::QuantitySkew {
            classes_per_client,
            strict,
        },
        seed,
        shards,
    ))
}

/// Per class, client shares `p ~ Dir(beta)`. Sampling happens in log space
/// so that tiny `beta` does not underflow every Gamma draw to zero. A
/// client left empty takes one sample from the currently largest client.
pub fn partition_dirichlet(ds: &Dataset, n_clients: usize, beta: f64, seed: u64) -> Result<PartitionPlan> {
    if n_clients == 0 {
        return Err(Error::NoClients);
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!("Dirichlet concentration must be positive, got {beta}")));
    }
    let gamma = Gamma::new(beta + 1.0, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = stream_rng(seed, Stream::Partition, &[2]);
    let mut shards = vec![Vec::new(); n_clients];
    for mut members in ds.class_indices() {
        // Gamma(b) = Gamma(b + 1) * U^(1/b)
        let logs: Vec<f64> = (0..n_clients)
            .map(|_| {
                let g: f64 = gamma.sample(&mut rng);
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                g.ln() + u.ln() / beta
            })
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let p: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
        members.shuffle(&mut rng);
        let mut start = 0;
        for (client, n) in largest_remainder(members.len(), &p).into_iter().enumerate() {
            shards[client].extend_from_slice(&members[start..start + n]);
            start += n;
        }
    }
    for i in 0..n_clients {
        if !shards[i].is_empty() {
            continue;
        }
        let donor = (0..n_clients)
            .max_by_key(|&j| (shards[j].len(), std::cmp::Reverse(j)))
            .expect("clients");
        if shards[donor].len() < 2 {
            break;
        }
        let taken = shards[donor].pop().expect("nonempty donor");
        shards[i].push(taken);
    }
    Ok(finish(ds, PartitionScheme::Dirichlet { beta }, seed, shards))
}
