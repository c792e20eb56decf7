use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generator::{generate_params, hypernet_backward, EmbeddingMatrix, FeatureExtractor, HeadGroup, HypernetGrads};
use crate::error::{Error, Result};
use crate::model::FlatParams;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{adam_step, AdamConfig};

pub type ClientId = usize;

/// `ceil(k / n)`.
pub fn chunk_count(k: usize, n: usize) -> usize {
    k.div_ceil(n)
}

/// How clients are mapped onto shared heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    /// Equal chunk count shares a head.
    #[default]
    ChunkCount,
    /// Equal parameter count shares a head.
    ExactCount,
    /// Every client has its own head.
    PerClient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GroupKey {
    Chunks(usize),
    Exact(usize),
    Client(ClientId),
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EmbeddingKey {
    Client(ClientId),
    Group(GroupKey),
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypernetConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Output length `N` of one head channel.
    pub chunk_size: usize,
    pub grouping: Grouping,
    /// `false` drops the heads; the extractor then emits `N` values per row.
    pub use_heads: bool,
    /// Clients of one group share one embedding matrix.
    pub shared_group_embeddings: bool,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for HypernetConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden_dim: 100,
            chunk_size: 3072,
            grouping: Grouping::ChunkCount,
            use_heads: true,
            shared_group_embeddings: false,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeMode {
    /// Only embeddings of clients registered afterwards train. A newcomer
    /// must map onto an existing head.
    EmbeddingsOnly,
    /// Newcomers may create heads; those heads and their embeddings train.
    NewHead,
}

/// What a freeze call locked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeHandle {
    pub mode: FreezeMode,
    pub frozen_groups: Vec<GroupKey>,
    pub frozen_embeddings: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Registration {
    pub key: GroupKey,
    pub tau: usize,
    pub created_group: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Slot {
    k: usize,
    key: GroupKey,
    embedding: EmbeddingKey,
}

/// Registry of clients, head groups and embeddings around one shared
/// extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypernetwork {
    config: HypernetConfig,
    extractor: FeatureExtractor,
    groups: BTreeMap<GroupKey, HeadGroup>,
    embeddings: BTreeMap<EmbeddingKey, EmbeddingMatrix>,
    clients: BTreeMap<ClientId, Slot>,
    global: Option<Slot>,
    freeze: Option<FreezeMode>,
    served: BTreeSet<ClientId>,
}

fn key_tags(key: GroupKey) -> [u64; 2] {
    match key {
        GroupKey::Chunks(t) => [0, t as u64],
        GroupKey::Exact(k) => [1, k as u64],
        GroupKey::Client(c) => [2, c as u64],
        GroupKey::Global => [3, 0],
    }
}

fn embedding_tags(key: EmbeddingKey) -> [u64; 3] {
    match key {
        EmbeddingKey::Client(c) => [0, c as u64, 0],
        EmbeddingKey::Group(g) => {
            let [a, b] = key_tags(g);
            [1 + a, b, 1]
        }
        EmbeddingKey::Global => [9, 0, 2],
    }
}

/// `u = -sum_i (m_i / M) delta_i` for the global slot.
pub fn global_upstream(deltas: &[(&FlatParams, f64)]) -> Result<Vec<f64>> {
    let Some((first, _)) = deltas.first() else {
        return Err(Error::NoClients);
    };
    let total: f64 = deltas.iter().map(|(_, m)| *m).sum();
    if !(total > 0.0) || deltas.iter().any(|(_, m)| *m < 0.0) {
        return Err(Error::InvalidArgument("sample weights must be non-negative with a positive sum".into()));
    }
    let mut u = vec![0.0; first.len()];
    for (delta, m) in deltas {
        if delta.len() != u.len() {
            return Err(Error::LengthMismatch {
                expected: u.len(),
                actual: delta.len(),
            });
        }
        let w = m / total;
        for (acc, d) in u.iter_mut().zip(delta.as_slice()) {
            *acc -= w * d;
        }
    }
    Ok(u)
}

fn digest(parts: &[&[f64]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        for v in *p {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Hypernetwork {
    pub fn new(config: HypernetConfig) -> Result<Self> {
        if config.embed_dim == 0 || config.hidden_dim == 0 || config.chunk_size == 0 {
            return Err(Error::InvalidArgument("hypernetwork dimensions must be positive".into()));
        }
        let mut rng = stream_rng(config.seed, Stream::Init, &[100]);
        let out = if config.use_heads { config.hidden_dim } else { config.chunk_size };
        let extractor = FeatureExtractor::init(config.embed_dim, config.hidden_dim, out, &mut rng);
        Ok(Self {
            config,
            extractor,
            groups: BTreeMap::new(),
            embeddings: BTreeMap::new(),
            clients: BTreeMap::new(),
            global: None,
            freeze: None,
            served: BTreeSet::new(),
        })
    }

    pub fn config(&self) -> &HypernetConfig {
        &self.config
    }

    fn key_for(&self, id: Option<ClientId>, k: usize) -> GroupKey {
        match (self.config.grouping, id) {
            (Grouping::ChunkCount, _) => GroupKey::Chunks(chunk_count(k, self.config.chunk_size)),
            (Grouping::ExactCount, _) => GroupKey::Exact(k),
            (Grouping::PerClient, Some(id)) => GroupKey::Client(id),
            (Grouping::PerClient, None) => GroupKey::Global,
        }
    }

    fn ensure_group(&mut self, key: GroupKey, tau: usize) -> Result<bool> {
        if let Some(g) = self.groups.get(&key) {
            if g.tau != tau {
                return Err(Error::InvalidArgument(format!(
                    "group {key:?} has {} channels, needed {tau}",
                    g.tau
                )));
            }
            return Ok(false);
        }
        if self.freeze == Some(FreezeMode::EmbeddingsOnly) {
            return Err(Error::InvalidArgument(format!(
                "no existing head for {key:?} while heads are frozen"
            )));
        }
        let group = if self.config.use_heads {
            let mut tags = vec![200];
            tags.extend_from_slice(&key_tags(key));
            let mut rng = stream_rng(self.config.seed, Stream::Init, &tags);
            HeadGroup::init(tau, self.config.hidden_dim, self.config.chunk_size, &mut rng)
        } else {
            HeadGroup::passthrough(tau, self.config.chunk_size)
        };
        self.groups.insert(key, group);
        Ok(true)
    }

    fn ensure_embedding(&mut self, key: EmbeddingKey, tau: usize) -> Result<()> {
        if let Some(e) = self.embeddings.get(&key) {
            if e.rows() != tau {
                return Err(Error::InvalidArgument(format!("embedding {key:?} has {} rows, needed {tau}", e.rows())));
            }
            return Ok(());
        }
        let mut tags = vec![300];
        tags.extend_from_slice(&embedding_tags(key));
        let mut rng = stream_rng(self.config.seed, Stream::Init, &tags);
        self.embeddings
            .insert(key, EmbeddingMatrix::init(tau, self.config.embed_dim, &mut rng));
        Ok(())
    }

    /// Add a client with `k` flat parameters. Re-registering with the same
    /// `k` is a no-op.
    pub fn register_client(&mut self, id: ClientId, k: usize) -> Result<Registration> {
        if k == 0 {
            return Err(Error::InvalidArgument(format!("client {id} has no generated parameters")));
        }
        let tau = chunk_count(k, self.config.chunk_size);
        if let Some(slot) = self.clients.get(&id) {
            if slot.k != k {
                return Err(Error::InvalidArgument(format!(
                    "client {id} already registered with {} parameters",
                    slot.k
                )));
            }
            return Ok(Registration {
                key: slot.key,
                tau,
                created_group: false,
            });
        }
        let key = self.key_for(Some(id), k);
        let created_group = self.ensure_group(key, tau)?;
        let embedding = if self.config.shared_group_embeddings {
            EmbeddingKey::Group(key)
        } else {
            EmbeddingKey::Client(id)
        };
        self.ensure_embedding(embedding, tau)?;
        self.clients.insert(id, Slot { k, key, embedding });
        Ok(Registration { key, tau, created_group })
    }

    /// Configure the global slot. `k_global` defaults to the smallest
    /// registered `K`; in that case the slot reuses the head of the
    /// smallest client (lowest id on ties).
    pub fn register_global(&mut self, k_global: Option<usize>) -> Result<Registration> {
        let min_slot = self
            .clients
            .iter()
            .min_by_key(|(id, s)| (s.k, **id))
            .map(|(_, s)| *s)
            .ok_or(Error::NoClients)?;
        let k = k_global.unwrap_or(min_slot.k);
        if k == 0 {
            return Err(Error::InvalidArgument("global model has no parameters".into()));
        }
        let tau = chunk_count(k, self.config.chunk_size);
        let key = if k == min_slot.k {
            min_slot.key
        } else {
            self.key_for(None, k)
        };
        let created_group = self.ensure_group(key, tau)?;
        if self.global.is_some_and(|g| g.k != k) {
            self.embeddings.remove(&EmbeddingKey::Global);
        }
        self.ensure_embedding(EmbeddingKey::Global, tau)?;
        self.global = Some(Slot {
            k,
            key,
            embedding: EmbeddingKey::Global,
        });
        Ok(Registration { key, tau, created_group })
    }

    fn slot(&self, id: ClientId) -> Result<Slot> {
        self.clients.get(&id).copied().ok_or(Error::UnknownClient(id))
    }

    fn global_slot(&self) -> Result<Slot> {
        self.global
            .ok_or_else(|| Error::InvalidArgument("global slot is not configured".into()))
    }

    fn generate_slot(&self, slot: Slot) -> Result<FlatParams> {
        generate_params(
            &self.extractor,
            &self.groups[&slot.key],
            &self.embeddings[&slot.embedding],
            slot.k,
        )
    }

    pub fn generate(&self, id: ClientId) -> Result<FlatParams> {
        self.generate_slot(self.slot(id)?)
    }

    pub fn generate_global(&self) -> Result<FlatParams> {
        self.generate_slot(self.global_slot()?)
    }

    /// Open a round: exactly these clients may submit personal updates.
    pub fn begin_round(&mut self, participants: &[ClientId]) -> Result<()> {
        for &id in participants {
            self.slot(id)?;
        }
        self.served = participants.iter().copied().collect();
        Ok(())
    }

    /// Gradient of `<generate(id), upstream>` at the current parameters.
    pub fn client_grads(&self, id: ClientId, upstream: &[f64]) -> Result<HypernetGrads> {
        let slot = self.slot(id)?;
        self.slot_grads(slot, upstream)
    }

    fn slot_grads(&self, slot: Slot, upstream: &[f64]) -> Result<HypernetGrads> {
        hypernet_backward(
            &self.extractor,
            &self.groups[&slot.key],
            &self.embeddings[&slot.embedding],
            slot.k,
            upstream,
        )
    }

    fn apply_grads(&mut self, slot: Slot, grads: HypernetGrads) -> Result<()> {
        let cfg = self.config.adam;
        if self.extractor.trainable {
            for (layer, (gw, gb)) in self.extractor.layers.iter_mut().zip(&grads.extractor) {
                adam_step(layer.weight.data_mut(), gw.data(), &mut layer.adam_w, &cfg)?;
                adam_step(layer.bias.data_mut(), gb.data(), &mut layer.adam_b, &cfg)?;
            }
        }
        let group = self.groups.get_mut(&slot.key).expect("registered group");
        if let (true, Some((gw, gb))) = (group.trainable, &grads.head) {
            adam_step(group.weight.data_mut(), gw.data(), &mut group.adam_w, &cfg)?;
            adam_step(group.bias.data_mut(), gb.data(), &mut group.adam_b, &cfg)?;
        }
        let emb = self.embeddings.get_mut(&slot.embedding).expect("registered embedding");
        if emb.trainable {
            adam_step(emb.values.data_mut(), grads.embedding.data(), &mut emb.adam, &cfg)?;
        }
        Ok(())
    }

    /// Consume a client's `delta = trained - served` and take one Adam step
    /// on the gradient of `<theta, served - trained>`.
    pub fn apply_personal_update(&mut self, id: ClientId, delta: &FlatParams) -> Result<()> {
        let slot = self.slot(id)?;
        if !self.served.contains(&id) {
            return Err(Error::StaleUpdate(id));
        }
        if delta.len() != slot.k {
            return Err(Error::LengthMismatch {
                expected: slot.k,
                actual: delta.len(),
            });
        }
        let upstream: Vec<f64> = delta.as_slice().iter().map(|d| -d).collect();
        let grads = self.slot_grads(slot, &upstream)?;
        self.apply_grads(slot, grads)?;
        self.served.remove(&id);
        Ok(())
    }

    /// Sample-weighted global update from `(delta, sample_count)` pairs.
    pub fn apply_global_update(&mut self, deltas: &[(&FlatParams, f64)]) -> Result<()> {
        let slot = self.global_slot()?;
        let upstream = global_upstream(deltas)?;
        if upstream.len() != slot.k {
            return Err(Error::LengthMismatch {
                expected: slot.k,
                actual: upstream.len(),
            });
        }
        let grads = self.slot_grads(slot, &upstream)?;
        self.apply_grads(slot, grads)
    }

    /// Lock everything that exists now; see [`FreezeMode`].
    pub fn freeze(&mut self, mode: FreezeMode) -> FreezeHandle {
        self.extractor.trainable = false;
        for g in self.groups.values_mut() {
            g.trainable = false;
        }
        for e in self.embeddings.values_mut() {
            e.trainable = false;
        }
        self.freeze = Some(mode);
        FreezeHandle {
            mode,
            frozen_groups: self.groups.keys().copied().collect(),
            frozen_embeddings: self.embeddings.len(),
        }
    }

    pub fn freeze_mode(&self) -> Option<FreezeMode> {
        self.freeze
    }

    pub fn client_k(&self, id: ClientId) -> Option<usize> {
        self.clients.get(&id).map(|s| s.k)
    }

    pub fn global_k(&self) -> Option<usize> {
        self.global.map(|s| s.k)
    }

    pub fn clients(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.clients.keys().copied()
    }

    pub fn group_key(&self, id: ClientId) -> Option<GroupKey> {
        self.clients.get(&id).map(|s| s.key)
    }

    pub fn global_group_key(&self) -> Option<GroupKey> {
        self.global.map(|s| s.key)
    }

    pub fn group(&self, key: GroupKey) -> Option<&HeadGroup> {
        self.groups.get(&key)
    }

    pub fn group_mut(&mut self, key: GroupKey) -> Option<&mut HeadGroup> {
        self.groups.get_mut(&key)
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_keys(&self) -> impl Iterator<Item = GroupKey> + '_ {
        self.groups.keys().copied()
    }

    pub fn embedding(&self, id: ClientId) -> Option<&EmbeddingMatrix> {
        self.clients.get(&id).map(|s| &self.embeddings[&s.embedding])
    }

    pub fn embedding_mut(&mut self, id: ClientId) -> Option<&mut EmbeddingMatrix> {
        let key = self.clients.get(&id)?.embedding;
        self.embeddings.get_mut(&key)
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn extractor_mut(&mut self) -> &mut FeatureExtractor {
        &mut self.extractor
    }

    pub fn extractor_checksum(&self) -> String {
        let parts: Vec<&[f64]> = self
            .extractor
            .layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.data()])
            .collect();
        digest(&parts)
    }

    pub fn head_checksum(&self, key: GroupKey) -> Option<String> {
        self.groups.get(&key).map(|g| digest(&[g.weight.data(), g.bias.data()]))
    }

    /// Extractor and every head.
    pub fn phi_checksum(&self) -> String {
        let mut parts: Vec<&[f64]> = self
            .extractor
            .layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.data()])
            .collect();
        for g in self.groups.values() {
            parts.push(g.weight.data());
            parts.push(g.bias.data());
        }
        digest(&parts)
    }

    pub fn embedding_checksum(&self, id: ClientId) -> Option<String> {
        self.embedding(id).map(|e| digest(&[e.values.data()]))
    }

    /// Number of scalars in the extractor and heads.
    pub fn phi_len(&self) -> usize {
        let ex: usize = self.extractor.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum();
        ex + self.groups.values().map(|g| g.weight.len() + g.bias.len()).sum::<usize>()
    }
}
