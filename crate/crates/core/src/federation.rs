//! Simulated federated training.
//!
//! Each round broadcasts the shared parameters, runs local Adam epochs on
//! every client and aggregates with the strategy's rule. Clients are always
//! reduced in `client_id` order, so sequential and parallel execution give
//! bit-identical results.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::losses::{reconstruction_loss, total_loss_with_grad, LossMode, LossTerms, LossWeights};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::{gamma_augment, init_model, ArchConfig, Autoencoder, ModelParams, OutputGrads};
use crate::nn::{Mode, NormKind};
use crate::optim::Adam;
use crate::phantom::{ClientDataset, ScanSlice};
use crate::scalar::Scalar;
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "local_only")]
    LocalOnly,
    #[serde(rename = "centralized")]
    Centralized,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "feddis")]
    FedDis,
    #[serde(rename = "fedvc")]
    FedVc,
    #[serde(rename = "silobn")]
    SiloBn,
    #[serde(rename = "fedgn")]
    FedGn,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::LocalOnly,
        Strategy::Centralized,
        Strategy::FedAvg,
        Strategy::FedDis,
        Strategy::FedVc,
        Strategy::SiloBn,
        Strategy::FedGn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::LocalOnly => "local_only",
            Strategy::Centralized => "centralized",
            Strategy::FedAvg => "fedavg",
            Strategy::FedDis => "feddis",
            Strategy::FedVc => "fedvc",
            Strategy::SiloBn => "silobn",
            Strategy::FedGn => "fedgn",
        }
    }

    /// Only FedDis trains the two-path model.
    pub fn disentangled(self) -> bool {
        self == Strategy::FedDis
    }

    /// Architecture actually trained: FedGn swaps every norm layer to group norm.
    pub fn arch(self, arch: &ArchConfig) -> ArchConfig {
        let mut a = arch.clone();
        if self == Strategy::FedGn {
            a.norm_kind = NormKind::Group;
        }
        a
    }

    /// Baseline autoencoders have no appearance latent and train on L_Rec alone.
    pub fn loss_mode(self, configured: LossMode) -> LossMode {
        if self.disentangled() {
            configured
        } else {
            LossMode::NoLcl
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase();
        Strategy::ALL
            .into_iter()
            .find(|v| v.as_str() == key)
            .ok_or_else(|| Error::Config(format!("unknown strategy '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub strategy: Strategy,
    pub loss_mode: LossMode,
    pub loss_weights: LossWeights,
    pub gamma_range: (f64, f64),
    /// FedVc iteration cap per round; defaults to `min_j N_j / batch_size`.
    pub fedvc_virtual_size: Option<usize>,
    pub seed: u64,
    /// Train clients on separate threads within a round.
    pub parallel: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            local_epochs: 5,
            batch_size: 8,
            lr0: 1e-4,
            lr_decay: 0.97,
            strategy: Strategy::FedDis,
            loss_mode: LossMode::Full,
            loss_weights: LossWeights::default(),
            gamma_range: (0.5, 2.0),
            fedvc_virtual_size: None,
            seed: 0,
            parallel: false,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size > 0, Config, "batch_size must be positive");
        ensure!(
            self.lr0 > 0.0 && self.lr0.is_finite(),
            Config,
            "lr0 must be positive, got {}",
            self.lr0
        );
        ensure!(
            self.lr_decay > 0.0 && self.lr_decay <= 1.0,
            Config,
            "lr_decay must lie in (0, 1], got {}",
            self.lr_decay
        );
        let (lo, hi) = self.gamma_range;
        ensure!(
            lo > 0.0 && lo <= hi,
            Config,
            "gamma_range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
        );
        ensure!(
            self.fedvc_virtual_size != Some(0),
            Config,
            "fedvc_virtual_size must be positive"
        );
        self.loss_weights.validate()
    }

    /// Learning rate of a 0-based communication round.
    pub fn learning_rate(&self, round: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(round as i32)
    }
}

/// w_j = N_j / Σ N_k.
pub fn client_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    let total: usize = sizes.iter().sum();
    ensure!(total > 0, Config, "clients hold no training slices");
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Per-epoch mean loss terms of one local update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub rec: f64,
    pub scl: f64,
    pub lol: f64,
    pub total: f64,
}

impl EpochLoss {
    fn accumulate<T: Scalar>(&mut self, t: &LossTerms<T>, w: f64) {
        self.rec += t.rec.as_f64() * w;
        self.scl += t.scl.as_f64() * w;
        self.lol += t.lol.as_f64() * w;
        self.total += t.total.as_f64() * w;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientLoss {
    pub client_id: String,
    /// Mean terms of the client's last local epoch in the round.
    pub loss: EpochLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based.
    pub round: usize,
    pub clients: Vec<ClientLoss>,
    /// Mean L_Rec of the inference model(s) over all validation slices.
    pub val_rec: f64,
    pub wall_seconds: f64,
    pub checksum: String,
}

/// One participant's latest full parameter set, including whatever it keeps
/// private under the strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState<T> {
    pub client_id: String,
    pub n_train: usize,
    pub params: ModelParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationState<T> {
    pub strategy: Strategy,
    /// Weighted mean of the clients after the last round; the seeded
    /// initialization before the first.
    pub global: ModelParams<T>,
    /// Sorted by `client_id`.
    pub clients: Vec<ClientState<T>>,
    pub history: Vec<RoundRecord>,
}

/// Whether a leaf is shared with the server under a strategy.
fn is_shared<T>(strategy: Strategy, leaf: &crate::model::Leaf<T>) -> bool {
    match strategy {
        Strategy::FedDis => leaf.path.is_shape(),
        Strategy::SiloBn => leaf.is_learnable(),
        Strategy::LocalOnly => false,
        _ => true,
    }
}

/// Aggregated global model plus each client's start point for the next round.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation<T> {
    /// Every leaf weighted-averaged.
    pub global: ModelParams<T>,
    /// Shared leaves from `global`, private leaves from the client, in the
    /// input order.
    pub retained: Vec<ModelParams<T>>,
}

/// Weighted mean `θ_ref + Σ w_j (θ_j − θ_ref)` with `θ_ref` the first client
/// in id order; exact for one client or identical clients.
fn weighted_mean<T: Scalar>(sorted: &[(&str, &ModelParams<T>, f64)]) -> ModelParams<T> {
    let reference = sorted[0].1;
    let mut out = reference.clone();
    for (li, leaf) in out.leaves.iter_mut().enumerate() {
        for (k, v) in leaf.values.iter_mut().enumerate() {
            let r = reference.leaves[li].values[k].as_f64();
            let mut acc = r;
            for &(_, p, w) in sorted {
                acc += w * (p.leaves[li].values[k].as_f64() - r);
            }
            *v = T::c(acc);
        }
    }
    out
}

pub fn aggregate<T: Scalar>(
    strategy: Strategy,
    clients: &[(&str, &ModelParams<T>)],
    weights: &[f64],
) -> Result<Aggregation<T>> {
    ensure!(!clients.is_empty(), Protocol, "no client parameters to aggregate");
    ensure!(
        clients.len() == weights.len(),
        Protocol,
        "{} clients but {} weights",
        clients.len(),
        weights.len()
    );
    let sum: f64 = weights.iter().sum();
    ensure!(
        (sum - 1.0).abs() <= 1e-9,
        Protocol,
        "client weights sum to {sum}, not 1"
    );
    ensure!(
        weights.iter().all(|w| *w >= 0.0),
        Protocol,
        "client weights must be nonnegative"
    );
    for (_, p) in &clients[1..] {
        clients[0].1.ensure_same_structure(p)?;
    }
    let mut sorted: Vec<(&str, &ModelParams<T>, f64)> =
        clients.iter().zip(weights).map(|(&(id, p), &w)| (id, p, w)).collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    ensure!(
        sorted.windows(2).all(|w| w[0].0 != w[1].0),
        Protocol,
        "client ids must be unique"
    );
    let global = weighted_mean(&sorted);
    let retained = clients
        .iter()
        .map(|(_, p)| {
            let mut next = (*p).clone();
            for (leaf, g) in next.leaves.iter_mut().zip(&global.leaves) {
                if is_shared(strategy, leaf) {
                    leaf.values.clone_from(&g.values);
                }
            }
            next
        })
        .collect();
    Ok(Aggregation { global, retained })
}

fn batch_tensor<T: Scalar>(slices: &[&ScanSlice<T>]) -> Result<Tensor<T>> {
    Tensor::stack(&slices.iter().map(|s| s.to_tensor()).collect::<Vec<_>>())
}

/// Local minibatch Adam on one client. Randomness (shuffles, gamma draws,
/// dropout) is keyed by the config seed, the round and `stream`.
pub fn local_update<T: Scalar>(
    train: &[ScanSlice<T>],
    start: &ModelParams<T>,
    config: &FederationConfig,
    round: usize,
    stream: u64,
    iteration_cap: Option<usize>,
) -> Result<(ModelParams<T>, Vec<EpochLoss>)> {
    ensure!(!train.is_empty(), Config, "client has an empty train split");
    config.validate()?;
    let net = Autoencoder::for_params(start)?;
    let mode = config.strategy.loss_mode(config.loss_mode);
    let mut params = start.clone();
    let mut opt = Adam::new(&params);
    let lr = config.learning_rate(round);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        derive_seed(config.seed, "local", round as u64),
        "stream",
        stream,
    ));
    let bs = config.batch_size;
    let mut trace = Vec::with_capacity(config.local_epochs);
    let mut remaining = iteration_cap.unwrap_or(usize::MAX);
    for _ in 0..config.local_epochs {
        if remaining == 0 {
            break;
        }
        let batches: Vec<Vec<usize>> = if iteration_cap.is_some() {
            // uniform resampling with replacement
            let per_epoch = train.len().div_ceil(bs).min(remaining);
            (0..per_epoch)
                .map(|_| {
                    (0..bs.min(train.len()))
                        .map(|_| rng.random_range(0..train.len()))
                        .collect()
                })
                .collect()
        } else {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng);
            order.chunks(bs).map(<[usize]>::to_vec).collect()
        };
        remaining -= batches.len().min(remaining);
        let mut epoch = EpochLoss {
            rec: 0.0,
            scl: 0.0,
            lol: 0.0,
            total: 0.0,
        };
        let n_batches = batches.len() as f64;
        for idx in batches {
            let slices: Vec<&ScanSlice<T>> = idx.iter().map(|&i| &train[i]).collect();
            let x = batch_tensor(&slices)?;
            let x_gamma = if mode.needs_latents() {
                let shifted = slices
                    .iter()
                    .map(|s| gamma_augment(s, T::c(rng.random_range(config.gamma_range.0..=config.gamma_range.1))))
                    .collect::<Result<Vec<_>>>()?;
                Some(batch_tensor(&shifted.iter().collect::<Vec<_>>())?)
            } else {
                None
            };
            let pass = net.forward_train(&params, &x, x_gamma.as_ref(), Mode::Train, rng.random())?;
            let triple = pass.triple();
            let (terms, lg) = total_loss_with_grad(&x, &pass.x_rec, triple.as_ref(), &config.loss_weights, mode)?;
            let grads = net.backward(
                &params,
                &pass,
                &OutputGrads {
                    x_rec: lg.x_rec,
                    z_s: lg.z_s,
                    z_a: lg.z_a,
                    z_gs: lg.z_gs,
                },
            )?;
            opt.step(&mut params, &grads, lr);
            pass.commit_running_stats(&mut params);
            epoch.accumulate(&terms, 1.0 / n_batches);
        }
        trace.push(epoch);
    }
    Ok((params, trace))
}

/// Mean evaluation-mode L_Rec over `slices`.
pub fn validation_loss<T: Scalar>(params: &ModelParams<T>, slices: &[&ScanSlice<T>]) -> Result<f64> {
    ensure!(!slices.is_empty(), Input, "no validation slices");
    let net = Autoencoder::for_params(params)?;
    let mut total = 0.0;
    for s in slices {
        let x = s.to_tensor();
        total += reconstruction_loss(&x, &net.reconstruct(params, &x)?)?.as_f64();
    }
    Ok(total / slices.len() as f64)
}

/// Training participants for a strategy: the clients themselves, or one
/// pooled client for centralized training.
pub fn participants<T: Scalar>(clients: &[ClientDataset<T>], strategy: Strategy) -> Vec<ClientDataset<T>> {
    let mut out: Vec<ClientDataset<T>> = if strategy == Strategy::Centralized {
        let mut pooled = ClientDataset {
            client_id: "pooled".into(),
            seed: 0,
            profile: Default::default(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            n_train: 0,
            lesions: None,
        };
        for c in clients {
            pooled.seed = derive_seed(pooled.seed, "pool", c.seed);
            pooled.train.extend(c.train.iter().cloned());
            pooled.val.extend(c.val.iter().cloned());
        }
        pooled.n_train = pooled.train.len();
        vec![pooled]
    } else {
        clients.to_vec()
    };
    out.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    out
}

impl<T: Scalar> FederationState<T> {
    /// Every participant starts from the same seeded initialization.
    pub fn initial(participants: &[ClientDataset<T>], arch: &ArchConfig, config: &FederationConfig) -> Result<Self> {
        config.validate()?;
        ensure!(!participants.is_empty(), Config, "at least one client is required");
        let strategy = config.strategy;
        let global = init_model(
            &strategy.arch(arch),
            derive_seed(config.seed, "init", 0),
            strategy.disentangled(),
        )?;
        let mut clients: Vec<ClientState<T>> = participants
            .iter()
            .map(|c| ClientState {
                client_id: c.client_id.clone(),
                n_train: c.n_train,
                params: global.clone(),
            })
            .collect();
        clients.sort_by(|a, b| a.client_id.cmp(&b.client_id));
        ensure!(
            clients.windows(2).all(|w| w[0].client_id != w[1].client_id),
            Config,
            "client ids must be unique"
        );
        Ok(Self {
            strategy,
            global,
            clients,
            history: Vec::new(),
        })
    }

    pub fn rounds_done(&self) -> usize {
        self.history.len()
    }

    fn weights(&self) -> Result<Vec<f64>> {
        client_weights(&self.clients.iter().map(|c| c.n_train).collect::<Vec<_>>())
    }

    /// Model used for evaluation on unseen data. FedDis: global shape
    /// leaves with N-weighted mean appearance leaves. Local-only training has
    /// no single model; use [`FederationState::client_model`] instead.
    pub fn build_inference_model(&self) -> Result<ModelParams<T>> {
        ensure!(!self.history.is_empty(), State, "no federation round has completed");
        ensure!(
            self.strategy != Strategy::LocalOnly,
            State,
            "local-only training has no shared model"
        );
        if self.strategy != Strategy::FedDis {
            return Ok(self.global.clone());
        }
        let w = self.weights()?;
        let pairs: Vec<(&str, &ModelParams<T>)> =
            self.clients.iter().map(|c| (c.client_id.as_str(), &c.params)).collect();
        let mean = aggregate(Strategy::FedAvg, &pairs, &w)?.global;
        let mut out = self.global.clone();
        for (leaf, m) in out.leaves.iter_mut().zip(&mean.leaves) {
            if leaf.path.is_appearance() {
                leaf.values.clone_from(&m.values);
            }
        }
        Ok(out)
    }

    pub fn client_model(&self, client_id: &str) -> Option<&ModelParams<T>> {
        self.clients
            .iter()
            .find(|c| c.client_id == client_id)
            .map(|c| &c.params)
    }

    fn validation_rec(&self, participants: &[ClientDataset<T>]) -> Result<f64> {
        if self.strategy == Strategy::LocalOnly {
            let mut acc = 0.0;
            for c in participants {
                let params = self.client_model(&c.client_id).expect("participant has a state");
                acc += validation_loss(params, &c.val.iter().collect::<Vec<_>>())?;
            }
            return Ok(acc / participants.len() as f64);
        }
        let all: Vec<&ScanSlice<T>> = participants.iter().flat_map(|c| &c.val).collect();
        validation_loss(&self.build_inference_model()?, &all)
    }

    fn fedvc_cap(&self, config: &FederationConfig) -> Option<usize> {
        (self.strategy == Strategy::FedVc).then(|| {
            config.fedvc_virtual_size.unwrap_or_else(|| {
                let min_n = self.clients.iter().map(|c| c.n_train).min().unwrap_or(1);
                (min_n / config.batch_size).max(1)
            })
        })
    }

    /// One communication round over `participants` (sorted as returned by
    /// [`participants`]).
    pub fn step_round(&mut self, participants: &[ClientDataset<T>], config: &FederationConfig) -> Result<&RoundRecord> {
        ensure!(
            participants.len() == self.clients.len()
                && participants
                    .iter()
                    .zip(&self.clients)
                    .all(|(p, c)| p.client_id == c.client_id),
            State,
            "participants do not match the federation state"
        );
        ensure!(config.strategy == self.strategy, State, "strategy changed mid-run");
        let started = Instant::now();
        let round = self.history.len();
        let cap = self.fedvc_cap(config);
        let work = |(c, state): (&ClientDataset<T>, &ClientState<T>)| {
            local_update(&c.train, &state.params, config, round, c.seed, cap)
        };
        let results: Vec<Result<(ModelParams<T>, Vec<EpochLoss>)>> = if config.parallel && participants.len() > 1 {
            std::thread::scope(|s| {
                let handles: Vec<_> = participants
                    .iter()
                    .zip(&self.clients)
                    .map(|pair| s.spawn(move || work(pair)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| {
                        h.join()
                            .unwrap_or_else(|_| Err(Error::State("client worker panicked".into())))
                    })
                    .collect()
            })
        } else {
            participants.iter().zip(&self.clients).map(work).collect()
        };
        let mut updated = Vec::with_capacity(results.len());
        let mut losses = Vec::with_capacity(results.len());
        for (r, c) in results.into_iter().zip(&self.clients) {
            let (params, trace) = r?;
            let loss = trace.last().cloned().unwrap_or(EpochLoss {
                rec: 0.0,
                scl: 0.0,
                lol: 0.0,
                total: 0.0,
            });
            losses.push(ClientLoss {
                client_id: c.client_id.clone(),
                loss,
            });
            updated.push(params);
        }
        let w = self.weights()?;
        let pairs: Vec<(&str, &ModelParams<T>)> = self
            .clients
            .iter()
            .zip(&updated)
            .map(|(c, p)| (c.client_id.as_str(), p))
            .collect();
        let agg = aggregate(self.strategy, &pairs, &w)?;
        if self.strategy != Strategy::LocalOnly {
            self.global = agg.global;
        }
        for (c, p) in self.clients.iter_mut().zip(agg.retained) {
            c.params = p;
        }
        // placeholder record so the inference model can be assembled
        self.history.push(RoundRecord {
            round: round + 1,
            clients: losses,
            val_rec: f64::NAN,
            wall_seconds: 0.0,
            checksum: String::new(),
        });
        let val_rec = self.validation_rec(participants)?;
        let checksum = self.checksum();
        let rec = self.history.last_mut().expect("just pushed");
        rec.val_rec = val_rec;
        rec.checksum = checksum;
        rec.wall_seconds = started.elapsed().as_secs_f64();
        log::info!("{} round {}: val L_Rec {:.5}", self.strategy, round + 1, val_rec);
        Ok(self.history.last().expect("just pushed"))
    }

    /// Checksum over the global and all client parameters.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.global.checksum());
        for c in &self.clients {
            h.update(c.client_id.as_bytes());
            h.update(c.params.checksum());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes `global.ckpt`, `clients/<id>.ckpt` and `history.json`.
    pub fn save(&self, dir: &Path, seeds: &std::collections::BTreeMap<String, u64>) -> Result<()> {
        save_checkpoint(&self.global, seeds, &dir.join("global.ckpt"))?;
        for c in &self.clients {
            save_checkpoint(
                &c.params,
                seeds,
                &dir.join("clients").join(format!("{}.ckpt", c.client_id)),
            )?;
        }
        let meta = SavedState {
            strategy: self.strategy,
            clients: self.clients.iter().map(|c| (c.client_id.clone(), c.n_train)).collect(),
            history: self.history.clone(),
        };
        let path = dir.join("history.json");
        fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("history.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta: SavedState = serde_json::from_slice(&bytes)?;
        let global = load_checkpoint(&dir.join("global.ckpt"))?.0;
        let clients = meta
            .clients
            .into_iter()
            .map(|(client_id, n_train)| {
                let params = load_checkpoint(&dir.join("clients").join(format!("{client_id}.ckpt")))?.0;
                Ok(ClientState {
                    client_id,
                    n_train,
                    params,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            strategy: meta.strategy,
            global,
            clients,
            history: meta.history,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SavedState {
    strategy: Strategy,
    clients: Vec<(String, usize)>,
    history: Vec<RoundRecord>,
}

/// Runs `config.rounds` rounds from the seeded initialization.
pub fn run_federation<T: Scalar>(
    clients: &[ClientDataset<T>],
    arch: &ArchConfig,
    config: &FederationConfig,
) -> Result<FederationState<T>> {
    let parts = participants(clients, config.strategy);
    let mut state = FederationState::initial(&parts, arch, config)?;
    for _ in 0..config.rounds {
        state.step_round(&parts, config)?;
    }
    Ok(state)
}
