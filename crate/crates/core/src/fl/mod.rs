//! Generalized federated learning: clients train locally from the broadcast
//! global model, the server turns the sample-weighted mean of their deltas
//! into a pseudogradient and feeds it to its own optimizer. Server SGD with
//! learning rate 1.0 is exactly FedAvg.

mod tune;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{
    apply_step, mean_reconstruction_error, train_epoch, Architecture, DenseNet, FlatParams,
    Optimizer, OptimizerSpec, TrainConfig,
};
use crate::seed::{derive_indexed, rng_from};

pub use tune::{grid_search, trial_table, tune_trials, GridResult, Trial, TrialResult, TuneSummary};

/// One federated client with its fixed train/eval partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Client {
    pub id: u32,
    pub name: String,
    pub train: Matrix,
    pub eval: Matrix,
}

impl Client {
    /// Splits `data` once into 80% train / 20% eval with a seeded shuffle.
    pub fn split(id: u32, name: impl Into<String>, data: &Matrix, seed: u64) -> Result<Self> {
        let name = name.into();
        if data.rows() < 2 {
            return Err(Error::data(format!(
                "client {name} needs at least 2 rows to split, has {}",
                data.rows()
            )));
        }
        let mut idx: Vec<usize> = (0..data.rows()).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut rng_from(derive_indexed(seed, "split", id as u64)));
        let n_train = ((data.rows() as f64) * 0.8).round() as usize;
        let n_train = n_train.clamp(1, data.rows() - 1);
        let mut train_idx = idx[..n_train].to_vec();
        let mut eval_idx = idx[n_train..].to_vec();
        train_idx.sort_unstable();
        eval_idx.sort_unstable();
        Ok(Client {
            id,
            name,
            train: data.select_rows(&train_idx),
            eval: data.select_rows(&eval_idx),
        })
    }

    pub fn from_parts(id: u32, name: impl Into<String>, train: Matrix, eval: Matrix) -> Result<Self> {
        let name = name.into();
        if train.is_empty() {
            return Err(Error::data(format!("client {name} has no training rows")));
        }
        Ok(Client { id, name, train, eval })
    }

    /// Local training sample count `n_c`.
    pub fn n_samples(&self) -> usize {
        self.train.rows()
    }
}

/// Checks the cohort invariants: unique ids, non-empty training data.
pub fn validate_cohort(cohort: &[Client], arch: &Architecture) -> Result<()> {
    if cohort.is_empty() {
        return Err(Error::config("empty cohort"));
    }
    let mut ids: Vec<u32> = cohort.iter().map(|c| c.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("duplicate client id in cohort"));
    }
    for c in cohort {
        if c.train.is_empty() {
            return Err(Error::data(format!("client {} has no training rows", c.name)));
        }
        if c.train.cols() != arch.input_dim() {
            return Err(Error::data(format!(
                "client {} has {} feature columns, model expects {}",
                c.name,
                c.train.cols(),
                arch.input_dim()
            )));
        }
    }
    Ok(())
}

/// Trains `client` for `epochs` epochs starting from `start`.
///
/// `first_epoch` is the global epoch index of the first pass; it selects the
/// shuffle order. `state` carries optimizer state across calls when the
/// caller keeps it; with `None` a fresh optimizer is used.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    client: &Client,
    arch: &Architecture,
    start: &FlatParams,
    epochs: usize,
    first_epoch: u64,
    client_opt: OptimizerSpec,
    cfg: &TrainConfig,
    state: Option<&mut Optimizer>,
) -> Result<(FlatParams, usize)> {
    if epochs == 0 {
        return Err(Error::config("local epochs must be at least 1"));
    }
    let mut net = DenseNet::from_flat(arch.clone(), start.clone())?;
    let mut fresh;
    let opt = match state {
        Some(s) => s,
        None => {
            fresh = Optimizer::new(client_opt, arch.param_count());
            &mut fresh
        }
    };
    for e in 0..epochs {
        train_epoch(&mut net, opt, &client.train, cfg, first_epoch + e as u64).map_err(|err| {
            match err {
                Error::Numeric(m) => Error::numeric(format!("client {}: {m}", client.name)),
                other => other,
            }
        })?;
    }
    Ok((net.flatten(), client.n_samples()))
}

/// A client's contribution to one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub delta: FlatParams,
    pub n_samples: usize,
}

/// Pseudogradient `g = -sum_i (n_i / n) * delta_i`, summed in ascending
/// client id order.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<FlatParams> {
    let first = updates.first().ok_or_else(|| Error::data("no client updates to aggregate"))?;
    let len = first.delta.len();
    if let Some(bad) = updates.iter().find(|u| u.delta.len() != len) {
        return Err(Error::Dimension {
            expected: len,
            actual: bad.delta.len(),
        });
    }
    let n: usize = updates.iter().map(|u| u.n_samples).sum();
    if n == 0 {
        return Err(Error::data("aggregate: total sample count is zero"));
    }
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    let mut g = FlatParams::zeros(len);
    for u in order {
        g.axpy(-(u.n_samples as f64) / n as f64, &u.delta);
    }
    Ok(g)
}

/// Server side of the federation: the global model and its optimizer.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub arch: Architecture,
    pub global: FlatParams,
    pub opt: Optimizer,
    pub round: u64,
}

impl ServerState {
    pub fn new(arch: Architecture, global: FlatParams, server_opt: OptimizerSpec) -> Result<Self> {
        if global.len() != arch.param_count() {
            return Err(Error::Dimension {
                expected: arch.param_count(),
                actual: global.len(),
            });
        }
        let opt = Optimizer::new(server_opt, arch.param_count());
        Ok(ServerState { arch, global, opt, round: 0 })
    }

    /// Applies the server optimizer with the pseudogradient as gradient.
    pub fn step(&mut self, pseudogradient: &FlatParams) -> Result<()> {
        apply_step(&mut self.opt, &mut self.global, pseudogradient, &self.arch)
            .map_err(|e| Error::numeric(format!("server round {}: {e}", self.round + 1)))?;
        self.round += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub client_opt: OptimizerSpec,
    pub server_opt: OptimizerSpec,
    pub train: TrainConfig,
    /// Keep client optimizer state between rounds instead of resetting it at
    /// every broadcast.
    pub persistent_client_state: bool,
    /// Fraction of the cohort that trains each round.
    pub participation: f64,
    pub sampling_seed: u64,
}

impl Default for FlConfig {
    fn default() -> Self {
        FlConfig {
            rounds: 40,
            local_epochs: 1,
            client_opt: OptimizerSpec::adam1(1e-3),
            server_opt: OptimizerSpec::sgd(1.0),
            train: TrainConfig::default(),
            persistent_client_state: false,
            participation: 1.0,
            sampling_seed: 0,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs must be at least 1"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config("participation must be in (0, 1]"));
        }
        self.client_opt.validate()?;
        self.server_opt.validate()?;
        self.train.validate()
    }
}

/// Distribution of per-client evaluation losses at one point in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub step: usize,
    pub mean: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub per_client: Vec<f64>,
}

impl LossSummary {
    pub fn from_losses(step: usize, per_client: Vec<f64>) -> Self {
        let mut sorted = per_client.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n == 0 {
            f64::NAN
        } else if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        LossSummary {
            step,
            mean: per_client.iter().sum::<f64>() / n.max(1) as f64,
            min: sorted.first().copied().unwrap_or(f64::NAN),
            median,
            max: sorted.last().copied().unwrap_or(f64::NAN),
            per_client,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlRun {
    pub global: FlatParams,
    /// One entry per completed round, `step` = round number starting at 1.
    pub log: Vec<LossSummary>,
}

impl FlRun {
    pub fn final_mean_loss(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |l| l.mean)
    }
}

fn eval_losses(cohort: &[Client], arch: &Architecture, params: &FlatParams) -> Result<Vec<f64>> {
    let net = DenseNet::from_flat(arch.clone(), params.clone())?;
    cohort
        .par_iter()
        .map(|c| {
            let data = if c.eval.is_empty() { &c.train } else { &c.eval };
            mean_reconstruction_error(&net, data)
        })
        .collect()
}

fn participants(n: usize, cfg: &FlConfig, round: usize) -> Vec<usize> {
    if cfg.participation >= 1.0 {
        return (0..n).collect();
    }
    let m = ((n as f64 * cfg.participation).ceil() as usize).clamp(1, n);
    let mut rng = rng_from(derive_indexed(cfg.sampling_seed, "round", round as u64));
    let mut idx = sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    idx
}

/// Runs `cfg.rounds` federated rounds from `init`.
///
/// Each round is a barrier: every participant trains from the same broadcast
/// model, all updates are collected in client order, then the server steps.
pub fn run_fl(cohort: &[Client], arch: &Architecture, init: &FlatParams, cfg: &FlConfig) -> Result<FlRun> {
    cfg.validate()?;
    validate_cohort(cohort, arch)?;
    let mut server = ServerState::new(arch.clone(), init.clone(), cfg.server_opt)?;
    let mut states: Vec<Option<Optimizer>> = cohort
        .iter()
        .map(|_| {
            cfg.persistent_client_state
                .then(|| Optimizer::new(cfg.client_opt, arch.param_count()))
        })
        .collect();
    let mut log = Vec::with_capacity(cfg.rounds);

    for round in 1..=cfg.rounds {
        let chosen = participants(cohort.len(), cfg, round);
        let broadcast = server.global.clone();
        let first_epoch = ((round - 1) * cfg.local_epochs) as u64;
        let results: Vec<Result<ClientUpdate>> = states
            .par_iter_mut()
            .enumerate()
            .filter(|(i, _)| chosen.binary_search(i).is_ok())
            .map(|(i, state)| {
                let client = &cohort[i];
                let (trained, n) = local_train(
                    client,
                    arch,
                    &broadcast,
                    cfg.local_epochs,
                    first_epoch,
                    cfg.client_opt,
                    &cfg.train,
                    state.as_mut(),
                )?;
                Ok(ClientUpdate {
                    client_id: client.id,
                    delta: trained.sub(&broadcast),
                    n_samples: n,
                })
            })
            .collect();
        let updates = results
            .into_iter()
            .collect::<Result<Vec<_>>>()
            .map_err(|e| with_round(e, round))?;
        let g = aggregate(&updates)?;
        server.step(&g)?;
        let losses = eval_losses(cohort, arch, &server.global)?;
        if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
            return Err(Error::numeric(format!(
                "round {round}: evaluation loss of client {} is {}",
                cohort[i].name, losses[i]
            )));
        }
        log.push(LossSummary::from_losses(round, losses));
    }
    Ok(FlRun {
        global: server.global,
        log,
    })
}

fn with_round(e: Error, round: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::numeric(format!("round {round}: {m}")),
        Error::Data(m) => Error::data(format!("round {round}: {m}")),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolatedRun {
    pub params: Vec<FlatParams>,
    /// One entry per epoch, `step` = epoch number starting at 1.
    pub log: Vec<LossSummary>,
}

/// Per-client initial parameters for isolated training, each from its own
/// seed derived from `(seed, client id)`.
pub fn isolated_inits(cohort: &[Client], arch: &Architecture, seed: u64) -> Result<Vec<FlatParams>> {
    cohort
        .iter()
        .map(|c| {
            let probe = probe_rows(std::slice::from_ref(c));
            let s = derive_indexed(seed, "isolated-init", c.id as u64);
            Ok(DenseNet::init_probed(arch.clone(), s, &probe)?.0.flatten())
        })
        .collect()
}

/// Most probe rows taken from one client.
pub const MAX_PROBE_ROWS: usize = 1024;

/// Training rows of each client, strided down to `MAX_PROBE_ROWS`.
pub fn probe_rows(cohort: &[Client]) -> Vec<Vec<&[f64]>> {
    cohort
        .iter()
        .map(|c| {
            let stride = c.train.rows().div_ceil(MAX_PROBE_ROWS).max(1);
            c.train.iter_rows().step_by(stride).collect()
        })
        .collect()
}

/// Common starting model for a cohort: the seeded draw with units that are
/// dead for some client redrawn.
pub fn shared_init(cohort: &[Client], arch: &Architecture, seed: u64) -> Result<FlatParams> {
    validate_cohort(cohort, arch)?;
    let (net, redrawn) = DenseNet::init_probed(arch.clone(), seed, &probe_rows(cohort))?;
    if redrawn > 0 {
        log::debug!("initial model: {redrawn} inactive unit rows redrawn");
    }
    Ok(net.flatten())
}

/// Baseline: every client trains alone for `total_epochs` epochs with a
/// single optimizer instance. Evaluated after each epoch.
pub fn run_isolated(
    cohort: &[Client],
    arch: &Architecture,
    inits: &[FlatParams],
    total_epochs: usize,
    client_opt: OptimizerSpec,
    cfg: &TrainConfig,
) -> Result<IsolatedRun> {
    validate_cohort(cohort, arch)?;
    if inits.len() != cohort.len() {
        return Err(Error::config("one initial model per client is required"));
    }
    if total_epochs == 0 {
        return Err(Error::config("total_epochs must be at least 1"));
    }
    client_opt.validate()?;
    let per_client: Vec<(FlatParams, Vec<f64>)> = cohort
        .par_iter()
        .zip(inits.par_iter())
        .map(|(client, init)| {
            let mut net = DenseNet::from_flat(arch.clone(), init.clone())?;
            let mut opt = Optimizer::new(client_opt, arch.param_count());
            let mut curve = Vec::with_capacity(total_epochs);
            let eval = if client.eval.is_empty() { &client.train } else { &client.eval };
            for e in 0..total_epochs {
                train_epoch(&mut net, &mut opt, &client.train, cfg, e as u64).map_err(|err| match err {
                    Error::Numeric(m) => Error::numeric(format!("client {}: {m}", client.name)),
                    other => other,
                })?;
                curve.push(mean_reconstruction_error(&net, eval)?);
            }
            Ok((net.flatten(), curve))
        })
        .collect::<Result<Vec<_>>>()?;
    let log = (0..total_epochs)
        .map(|e| LossSummary::from_losses(e + 1, per_client.iter().map(|(_, c)| c[e]).collect()))
        .collect();
    Ok(IsolatedRun {
        params: per_client.into_iter().map(|(p, _)| p).collect(),
        log,
    })
}
