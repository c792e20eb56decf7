use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use super::client::{evaluate, train_local, ClientState, Teacher, TrainOutcome};
use super::config::{Algorithm, RoundConfig};
use super::metrics::{MetricRow, Phase, RoundMetrics};
use super::prune::{prune_delta, VALUE_BYTES};
use crate::data::{ClientSplit, Dataset};
use crate::error::{Error, Result};
use crate::hypernet::{chunk_count, FreezeHandle, FreezeMode, HypernetConfig, Hypernetwork};
use crate::model::{flat_param_count, pack, unpack, unpack_into, ArchitectureSpec, FlatParams, Model};
use crate::rng::{stream_rng, Stream};

const TAG_PERSONAL: u64 = 0;
const TAG_GLOBAL: u64 = 1;
const TAG_TRAIN: u64 = 2;
const INIT_TAG: u64 = 1;

const MAGIC: &[u8; 4] = b"HFFD";
const VERSION: u32 = 1;

/// A client to be added: its architecture and data shard.
#[derive(Debug, Clone)]
pub struct NewClient {
    pub arch: Arc<ArchitectureSpec>,
    pub split: ClientSplit,
}

pub struct FederationSetup {
    pub round: RoundConfig,
    pub hypernet: HypernetConfig,
    pub dataset: Arc<Dataset>,
    pub clients: Vec<NewClient>,
    /// Architecture of the generated global model. Defaults to the client
    /// with the fewest parameters.
    pub global_arch: Option<Arc<ArchitectureSpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Server {
    Hypernet {
        hn: Box<Hypernetwork>,
        global_arch: Option<Arc<ArchitectureSpec>>,
    },
    FedAvg {
        global: Model,
    },
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct State {
    config: RoundConfig,
    completed: usize,
    server: Server,
    clients: Vec<ClientState>,
    /// Clients eligible for sampling.
    active: Vec<usize>,
    novel: BTreeSet<usize>,
    deployed: BTreeSet<usize>,
    dataset_len: usize,
}

/// `sum_i (m_i / M) w_i`, accumulated in input order.
pub fn weighted_average(items: &[(&FlatParams, f64)]) -> Result<FlatParams> {
    let Some((first, _)) = items.first() else {
        return Err(Error::NoClients);
    };
    let total: f64 = items.iter().map(|(_, m)| *m).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("sample weights must have a positive sum".into()));
    }
    // -0.0 is the additive identity for every f64, so a single client's
    // weights come back bit for bit.
    let mut acc = vec![-0.0; first.len()];
    for (w, m) in items {
        if w.len() != acc.len() {
            return Err(Error::LengthMismatch {
                expected: acc.len(),
                actual: w.len(),
            });
        }
        let share = m / total;
        for (a, v) in acc.iter_mut().zip(w.as_slice()) {
            *a += share * v;
        }
    }
    Ok(FlatParams(acc))
}

fn check_arch(arch: &ArchitectureSpec, ds: &Dataset) -> Result<()> {
    let width: usize = arch.input_shape.iter().product();
    if width != ds.feature_len() || arch.classes != ds.classes() {
        return Err(Error::Architecture(format!(
            "{} expects {:?} inputs and {} classes, dataset has {:?} and {}",
            arch.name,
            arch.input_shape,
            arch.classes,
            ds.feature_shape(),
            ds.classes()
        )));
    }
    Ok(())
}

fn init_model(arch: &Arc<ArchitectureSpec>, seed: u64) -> Model {
    Model::init(arch.clone(), &mut stream_rng(seed, Stream::Init, &[INIT_TAG]))
}

/// Server, clients and round counter of one run.
pub struct Federation {
    state: State,
    dataset: Arc<Dataset>,
    pool: Option<Arc<ThreadPool>>,
}

impl Federation {
    pub fn new(setup: FederationSetup) -> Result<Self> {
        let FederationSetup {
            round: config,
            mut hypernet,
            dataset,
            clients: newcomers,
            global_arch,
        } = setup;
        config.validate()?;
        if newcomers.is_empty() {
            return Err(Error::NoClients);
        }
        let mut clients = Vec::with_capacity(newcomers.len());
        for (id, c) in newcomers.into_iter().enumerate() {
            check_arch(&c.arch, &dataset)?;
            if c.split.train.is_empty() {
                return Err(Error::Dataset(format!("client {id} has no training samples")));
            }
            clients.push(ClientState {
                id,
                model: init_model(&c.arch, config.seed),
                split: c.split,
            });
        }
        let n = clients.len();
        let server = match config.algorithm {
            Algorithm::FedAvg => {
                let arch = clients[0].arch().clone();
                if clients.iter().any(|c| **c.arch() != *arch) {
                    return Err(Error::Config("FedAvg needs every client on the same architecture".into()));
                }
                Server::FedAvg {
                    global: init_model(&arch, config.seed),
                }
            }
            Algorithm::Local => Server::Local,
            alg => {
                hypernet.seed = config.seed;
                let mut hn = Hypernetwork::new(hypernet)?;
                for c in &clients {
                    register(&mut hn, c)?;
                }
                let global_arch = if alg.uses_global() {
                    let arch = match global_arch {
                        Some(a) => {
                            check_arch(&a, &dataset)?;
                            a
                        }
                        None => clients
                            .iter()
                            .min_by_key(|c| (flat_param_count(c.arch()), c.id))
                            .map(|c| c.arch().clone())
                            .expect("clients"),
                    };
                    hn.register_global(Some(flat_param_count(&arch)))?;
                    Some(arch)
                } else {
                    None
                };
                Server::Hypernet {
                    hn: Box::new(hn),
                    global_arch,
                }
            }
        };
        let deployed = if config.algorithm.uses_global() {
            let count = (config.deploy_ratio * n as f64).ceil() as usize;
            let mut rng = stream_rng(config.seed, Stream::Deployment, &[]);
            index::sample(&mut rng, n, count.min(n)).into_iter().collect()
        } else {
            BTreeSet::new()
        };
        Ok(Self {
            state: State {
                config,
                completed: 0,
                server,
                active: (0..n).collect(),
                clients,
                novel: BTreeSet::new(),
                deployed,
                dataset_len: dataset.len(),
            },
            dataset,
            pool: None,
        })
    }

    /// Train clients on a dedicated pool of `workers` threads.
    pub fn set_workers(&mut self, workers: usize) -> Result<()> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        self.pool = Some(Arc::new(pool));
        Ok(())
    }

    fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    pub fn config(&self) -> &RoundConfig {
        &self.state.config
    }

    pub fn completed_rounds(&self) -> usize {
        self.state.completed
    }

    pub fn is_finished(&self) -> bool {
        self.state.completed >= self.state.config.rounds
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.state.clients
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn hypernetwork(&self) -> Option<&Hypernetwork> {
        match &self.state.server {
            Server::Hypernet { hn, .. } => Some(hn),
            _ => None,
        }
    }

    pub fn global_arch(&self) -> Option<&Arc<ArchitectureSpec>> {
        match &self.state.server {
            Server::Hypernet { global_arch, .. } => global_arch.as_ref(),
            _ => None,
        }
    }

    /// FedAvg's shared model.
    pub fn global_model(&self) -> Option<&Model> {
        match &self.state.server {
            Server::FedAvg { global } => Some(global),
            _ => None,
        }
    }

    pub fn deployed(&self) -> &BTreeSet<usize> {
        &self.state.deployed
    }

    /// Clients sampled in 0-based round `round`, ascending.
    pub fn participants(&self, round: usize) -> Vec<usize> {
        let pool = &self.state.active;
        let m = ((self.state.config.participation * pool.len() as f64).ceil() as usize).clamp(1, pool.len());
        let mut rng = stream_rng(self.state.config.seed, Stream::Sampling, &[round as u64]);
        let mut ids: Vec<usize> = index::sample(&mut rng, pool.len(), m).into_iter().map(|i| pool[i]).collect();
        ids.sort_unstable();
        ids
    }

    fn upload(&self, delta: FlatParams) -> Result<(FlatParams, u64)> {
        let f = self.state.config.prune_fraction;
        if f > 0.0 {
            let sparse = prune_delta(&delta, f)?;
            let bytes = sparse.wire_bytes();
            Ok((sparse.to_dense(), bytes))
        } else {
            let bytes = delta.len() as u64 * VALUE_BYTES;
            Ok((delta, bytes))
        }
    }

    /// Run one round and, when due, evaluate every client.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let r = self.state.completed;
        let participants = self.participants(r);
        let mut metrics = RoundMetrics {
            round: r + 1,
            ..RoundMetrics::default()
        };
        match self.state.config.algorithm {
            Algorithm::FedAvg => self.fedavg_round(r, &participants, &mut metrics)?,
            Algorithm::Local => self.local_round(r, &participants, &mut metrics)?,
            _ => self.hypernet_round(r, &participants, &mut metrics)?,
        }
        self.state.completed += 1;
        let done = self.state.completed;
        if done.is_multiple_of(self.state.config.eval_every) || done == self.state.config.rounds {
            let start = Instant::now();
            metrics.rows.extend(self.evaluate_all(done)?);
            metrics.phase_seconds.push((Phase::Eval, start.elapsed().as_secs_f64()));
        }
        for row in &metrics.rows {
            metrics.uplink_bytes += row.uplink_bytes;
            metrics.downlink_bytes += row.downlink_bytes;
        }
        if let Some(acc) = metrics.mean_accuracy(Phase::Eval) {
            log::info!("round {}: mean test accuracy {:.4}", metrics.round, acc);
        }
        Ok(metrics)
    }

    /// Run the remaining configured rounds, handing each round to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&RoundMetrics) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            let m = self.run_round()?;
            sink(&m)?;
        }
        Ok(())
    }

    fn train_parallel(
        &mut self,
        participants: &[usize],
        served: &BTreeMap<usize, FlatParams>,
        teacher: Option<&Model>,
        tag: u64,
        round: usize,
    ) -> Result<Vec<(usize, TrainOutcome, FlatParams)>> {
        let cfg = self.state.config.clone();
        let ds = self.dataset.clone();
        let deployed = self.state.deployed.clone();
        let wanted: BTreeSet<usize> = participants.iter().copied().collect();
        let clients = &mut self.state.clients;
        let pool = self.pool.clone();
        let mut job = move || {
            clients
                .par_iter_mut()
                .filter(|c| wanted.contains(&c.id))
                .map(|c| {
                    if let Some(theta) = served.get(&c.id) {
                        unpack_into(&mut c.model, theta)?;
                    }
                    let t = teacher.filter(|_| deployed.contains(&c.id)).map(|model| Teacher {
                        model,
                        lambda: cfg.lambda,
                        temperature: cfg.temperature,
                    });
                    let out = train_local(
                        &mut c.model,
                        &ds,
                        &c.split.train,
                        cfg.local_epochs,
                        cfg.batch_size,
                        cfg.sgd,
                        cfg.seed,
                        &[round as u64, c.id as u64, tag],
                        t,
                    )?;
                    Ok((c.id, out, pack(&c.model)))
                })
                .collect::<Result<Vec<_>>>()
        };
        match pool {
            Some(p) => p.install(job),
            None => job(),
        }
    }

    fn hypernet_round(&mut self, r: usize, participants: &[usize], metrics: &mut RoundMetrics) -> Result<()> {
        let alg = self.state.config.algorithm;
        let mut teacher = None;
        {
            let Server::Hypernet { hn, .. } = &mut self.state.server else {
                unreachable!("hypernetwork algorithm without a hypernetwork");
            };
            hn.begin_round(participants)?;
        }

        if alg.uses_global() {
            let start = Instant::now();
            let deployed_now: Vec<usize> = participants
                .iter()
                .copied()
                .filter(|i| self.state.deployed.contains(i))
                .collect();
            if !deployed_now.is_empty() {
                let (w_g, arch) = match &self.state.server {
                    Server::Hypernet {
                        hn,
                        global_arch: Some(a),
                    } => (hn.generate_global()?, a.clone()),
                    _ => unreachable!("global slot configured at setup"),
                };
                let global_model = unpack(&arch, &w_g)?;
                let cfg = self.state.config.clone();
                let ds = self.dataset.clone();
                let clients = &self.state.clients;
                let trained = self.install(|| {
                    deployed_now
                        .par_iter()
                        .map(|&id| {
                            let c = &clients[id];
                            let mut m = global_model.clone();
                            let out = train_local(
                                &mut m,
                                &ds,
                                &c.split.train,
                                cfg.local_epochs,
                                cfg.batch_size,
                                cfg.sgd,
                                cfg.seed,
                                &[r as u64, id as u64, TAG_GLOBAL],
                                None,
                            )?;
                            Ok((id, out, pack(&m)))
                        })
                        .collect::<Result<Vec<_>>>()
                })?;
                let mut uploads = Vec::with_capacity(trained.len());
                for (id, out, w) in trained {
                    let (delta, up) = self.upload(w.delta_from(&w_g)?)?;
                    metrics.rows.push(MetricRow {
                        round: r + 1,
                        phase: Phase::Global,
                        client: id,
                        accuracy: out.accuracy,
                        loss: out.loss,
                        uplink_bytes: up,
                        downlink_bytes: w_g.len() as u64 * VALUE_BYTES,
                    });
                    uploads.push((delta, self.state.clients[id].samples() as f64));
                }
                let refs: Vec<(&FlatParams, f64)> = uploads.iter().map(|(d, m)| (d, *m)).collect();
                if let Server::Hypernet { hn, .. } = &mut self.state.server {
                    hn.apply_global_update(&refs)?;
                }
                if alg == Algorithm::MhPfedhngd {
                    teacher = Some(global_model);
                }
            }
            metrics.phase_seconds.push((Phase::Global, start.elapsed().as_secs_f64()));
        }

        let start = Instant::now();
        let served: BTreeMap<usize, FlatParams> = {
            let Server::Hypernet { hn, .. } = &self.state.server else {
                unreachable!()
            };
            participants
                .iter()
                .map(|&id| Ok((id, hn.generate(id)?)))
                .collect::<Result<_>>()?
        };
        let trained = self.train_parallel(participants, &served, teacher.as_ref(), TAG_PERSONAL, r)?;
        for (id, out, theta) in trained {
            let sent = &served[&id];
            let (delta, up) = self.upload(theta.delta_from(sent)?)?;
            if let Server::Hypernet { hn, .. } = &mut self.state.server {
                hn.apply_personal_update(id, &delta)?;
            }
            metrics.rows.push(MetricRow {
                round: r + 1,
                phase: Phase::Personal,
                client: id,
                accuracy: out.accuracy,
                loss: out.loss,
                uplink_bytes: up,
                downlink_bytes: sent.len() as u64 * VALUE_BYTES,
            });
        }
        metrics.phase_seconds.push((Phase::Personal, start.elapsed().as_secs_f64()));
        Ok(())
    }

    fn fedavg_round(&mut self, r: usize, participants: &[usize], metrics: &mut RoundMetrics) -> Result<()> {
        let start = Instant::now();
        let w = match &self.state.server {
            Server::FedAvg { global } => pack(global),
            _ => unreachable!(),
        };
        let served: BTreeMap<usize, FlatParams> = participants.iter().map(|&id| (id, w.clone())).collect();
        let trained = self.train_parallel(participants, &served, None, TAG_TRAIN, r)?;
        let bytes = w.len() as u64 * VALUE_BYTES;
        let mut items = Vec::with_capacity(trained.len());
        for (id, out, theta) in &trained {
            metrics.rows.push(MetricRow {
                round: r + 1,
                phase: Phase::FedAvg,
                client: *id,
                accuracy: out.accuracy,
                loss: out.loss,
                uplink_bytes: bytes,
                downlink_bytes: bytes,
            });
            items.push((theta, self.state.clients[*id].samples() as f64));
        }
        let avg = weighted_average(&items)?;
        if let Server::FedAvg { global } = &mut self.state.server {
            unpack_into(global, &avg)?;
        }
        metrics.phase_seconds.push((Phase::FedAvg, start.elapsed().as_secs_f64()));
        Ok(())
    }

    fn local_round(&mut self, r: usize, participants: &[usize], metrics: &mut RoundMetrics) -> Result<()> {
        let start = Instant::now();
        let trained = self.train_parallel(participants, &BTreeMap::new(), None, TAG_TRAIN, r)?;
        for (id, out, _) in trained {
            metrics.rows.push(MetricRow {
                round: r + 1,
                phase: Phase::Local,
                client: id,
                accuracy: out.accuracy,
                loss: out.loss,
                uplink_bytes: 0,
                downlink_bytes: 0,
            });
        }
        metrics.phase_seconds.push((Phase::Local, start.elapsed().as_secs_f64()));
        Ok(())
    }

    /// The model a client would be evaluated with right now.
    pub fn personalized_model(&self, id: usize) -> Result<Model> {
        let c = self.state.clients.get(id).ok_or(Error::UnknownClient(id))?;
        let mut model = c.model.clone();
        match &self.state.server {
            Server::Hypernet { hn, .. } => unpack_into(&mut model, &hn.generate(id)?)?,
            Server::FedAvg { global } => unpack_into(&mut model, &pack(global))?,
            Server::Local => {}
        }
        Ok(model)
    }

    /// Test accuracy and loss of every client with a test split.
    pub fn evaluate_clients(&self) -> Result<Vec<(usize, f64, f64)>> {
        let ids: Vec<usize> = self
            .state
            .clients
            .iter()
            .filter(|c| !c.split.test.is_empty())
            .map(|c| c.id)
            .collect();
        self.install(|| {
            ids.par_iter()
                .map(|&id| {
                    let mut model = self.personalized_model(id)?;
                    let (acc, loss) = evaluate(&mut model, &self.dataset, &self.state.clients[id].split.test)?;
                    Ok((id, acc, loss))
                })
                .collect()
        })
    }

    fn evaluate_all(&self, round: usize) -> Result<Vec<MetricRow>> {
        Ok(self
            .evaluate_clients()?
            .into_iter()
            .map(|(id, accuracy, loss)| MetricRow {
                round,
                phase: if self.state.novel.contains(&id) {
                    Phase::EvalNovel
                } else {
                    Phase::Eval
                },
                client: id,
                accuracy,
                loss,
                uplink_bytes: 0,
                downlink_bytes: 0,
            })
            .collect())
    }

    /// Freeze the hypernetwork, add `newcomers`, and restrict all further
    /// rounds to them without a global phase. `extra_rounds` is added to
    /// the configured round budget.
    pub fn begin_generalization(
        &mut self,
        mode: FreezeMode,
        newcomers: Vec<NewClient>,
        extra_rounds: usize,
    ) -> Result<FreezeHandle> {
        if newcomers.is_empty() {
            return Err(Error::NoClients);
        }
        let seed = self.state.config.seed;
        let Server::Hypernet { hn, .. } = &mut self.state.server else {
            return Err(Error::Config("generalization needs a hypernetwork run".into()));
        };
        let handle = hn.freeze(mode);
        let first = self.state.clients.len();
        let mut added = Vec::new();
        for (offset, c) in newcomers.into_iter().enumerate() {
            check_arch(&c.arch, &self.dataset)?;
            if c.split.train.is_empty() {
                return Err(Error::Dataset(format!("client {} has no training samples", first + offset)));
            }
            let state = ClientState {
                id: first + offset,
                model: init_model(&c.arch, seed),
                split: c.split,
            };
            register(hn, &state)?;
            added.push(state);
        }
        self.state.active = added.iter().map(|c| c.id).collect();
        self.state.novel.extend(self.state.active.iter().copied());
        self.state.clients.extend(added);
        self.state.config.algorithm = Algorithm::MhPfedhn;
        self.state.config.rounds = self.state.completed + extra_rounds;
        Ok(handle)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend(bincode::serialize(&self.state).map_err(|e| Error::Checkpoint(e.to_string()))?);
        Ok(out)
    }

    /// Restore a run; `dataset` must be the one the run was built on.
    pub fn from_bytes(bytes: &[u8], dataset: Arc<Dataset>) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a federation checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let state: State = bincode::deserialize(&bytes[8..]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if state.dataset_len != dataset.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint was taken on {} samples, dataset has {}",
                state.dataset_len,
                dataset.len()
            )));
        }
        Ok(Self {
            state,
            dataset,
            pool: None,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path, dataset: Arc<Dataset>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, dataset)
    }

    /// Whether generalization clients have been added.
    pub fn has_novel_clients(&self) -> bool {
        !self.state.novel.is_empty()
    }

    /// Same configuration, clients and parameters.
    pub fn same_state(&self, other: &Federation) -> bool {
        self.state == other.state
    }
}

fn register(hn: &mut Hypernetwork, c: &ClientState) -> Result<()> {
    let k = flat_param_count(c.arch());
    let layers = c.arch().parametric_layers();
    let reg = hn.register_client(c.id, k)?;
    if reg.tau <= layers {
        log::warn!(
            "client {} uses {} chunks for {} parametric layers; consider a smaller chunk size",
            c.id,
            chunk_count(k, hn.config().chunk_size),
            layers
        );
    }
    Ok(())
}
