//! Optimizer-pair trials and learning-rate grids for the federated setup.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_fl, Client, FlConfig, LossSummary};
use crate::error::{Error, Result};
use crate::nn::{Architecture, FlatParams, OptimizerFamily, OptimizerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub number: usize,
    pub client_opt: OptimizerSpec,
    pub server_opt: OptimizerSpec,
}

const FAMILIES: [OptimizerFamily; 4] = [
    OptimizerFamily::Sgd,
    OptimizerFamily::Sgdm,
    OptimizerFamily::Adam1,
    OptimizerFamily::Adam2,
];

/// The sixteen client/server combinations. Clients always use 1e-3; the
/// server uses 1.0 for the SGD families and 1e-2 for the Adam families.
pub fn trial_table() -> Vec<Trial> {
    let mut out = Vec::with_capacity(16);
    for client in FAMILIES {
        for server in FAMILIES {
            let server_lr = if server.adam_params().is_some() { 1e-2 } else { 1.0 };
            out.push(Trial {
                number: out.len() + 1,
                client_opt: OptimizerSpec::new(client, 1e-3),
                server_opt: OptimizerSpec::new(server, server_lr),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: Trial,
    pub log: Vec<LossSummary>,
    /// Set when the run stopped on a numeric failure; `log` is then empty.
    pub failure: Option<String>,
}

impl TrialResult {
    pub fn final_loss(&self) -> f64 {
        self.log.last().map_or(f64::INFINITY, |l| l.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneSummary {
    pub trials: Vec<TrialResult>,
    pub best: usize,
}

fn run_one(cohort: &[Client], arch: &Architecture, init: &FlatParams, cfg: FlConfig) -> Result<(Vec<LossSummary>, Option<String>)> {
    match run_fl(cohort, arch, init, &cfg) {
        Ok(run) => Ok((run.log, None)),
        Err(Error::Numeric(m)) => Ok((Vec::new(), Some(m))),
        Err(e) => Err(e),
    }
}

/// Runs `trials` on the same cohort and initial model. Only the optimizer
/// pair changes between runs; a trial that diverges is recorded, not fatal.
pub fn tune_trials(
    cohort: &[Client],
    arch: &Architecture,
    init: &FlatParams,
    base: &FlConfig,
    trials: &[Trial],
) -> Result<TuneSummary> {
    if trials.is_empty() {
        return Err(Error::config("no trials to run"));
    }
    let trials_out = trials
        .par_iter()
        .map(|t| {
            let cfg = FlConfig {
                client_opt: t.client_opt,
                server_opt: t.server_opt,
                ..*base
            };
            let (log, failure) = run_one(cohort, arch, init, cfg)?;
            Ok(TrialResult { trial: *t, log, failure })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = argmin(trials_out.iter().map(TrialResult::final_loss));
    Ok(TuneSummary { trials: trials_out, best })
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub client_family: OptimizerFamily,
    pub server_family: OptimizerFamily,
    pub client_lrs: Vec<f64>,
    pub server_lrs: Vec<f64>,
    /// `log10` of the final mean eval loss, indexed `[client_lr][server_lr]`.
    /// Diverged cells hold `+inf`.
    pub log10_loss: Vec<Vec<f64>>,
    pub best: (usize, usize),
}

impl GridResult {
    pub fn best_pair(&self) -> (f64, f64) {
        (self.client_lrs[self.best.0], self.server_lrs[self.best.1])
    }
}

/// Sweeps client and server learning rates for a fixed optimizer pair.
pub fn grid_search(
    cohort: &[Client],
    arch: &Architecture,
    init: &FlatParams,
    base: &FlConfig,
    client_family: OptimizerFamily,
    server_family: OptimizerFamily,
    client_lrs: &[f64],
    server_lrs: &[f64],
) -> Result<GridResult> {
    if client_lrs.is_empty() || server_lrs.is_empty() {
        return Err(Error::config("grid needs at least one learning rate per axis"));
    }
    let cells: Vec<(usize, usize)> = (0..client_lrs.len())
        .flat_map(|i| (0..server_lrs.len()).map(move |j| (i, j)))
        .collect();
    let losses = cells
        .par_iter()
        .map(|&(i, j)| {
            let cfg = FlConfig {
                client_opt: OptimizerSpec::new(client_family, client_lrs[i]),
                server_opt: OptimizerSpec::new(server_family, server_lrs[j]),
                ..*base
            };
            let (log, _) = run_one(cohort, arch, init, cfg)?;
            Ok(log.last().map_or(f64::INFINITY, |l| l.mean.log10()))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut grid = vec![vec![0.0; server_lrs.len()]; client_lrs.len()];
    for (&(i, j), v) in cells.iter().zip(&losses) {
        grid[i][j] = *v;
    }
    let flat = argmin(losses.iter().copied());
    Ok(GridResult {
        client_family,
        server_family,
        client_lrs: client_lrs.to_vec(),
        server_lrs: server_lrs.to_vec(),
        log10_loss: grid,
        best: cells[flat],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_layout() {
        let t = trial_table();
        assert_eq!(t.len(), 16);
        assert_eq!(t[0].client_opt, OptimizerSpec::sgd(1e-3));
        assert_eq!(t[0].server_opt, OptimizerSpec::sgd(1.0));
        assert_eq!(t[8].number, 9);
        assert_eq!(t[8].client_opt, OptimizerSpec::adam1(1e-3));
        assert_eq!(t[8].server_opt, OptimizerSpec::sgd(1.0));
        assert_eq!(t[15].server_opt, OptimizerSpec::adam2(1e-2));
        assert_eq!(t[6].server_opt, OptimizerSpec::adam1(1e-2));
    }

    #[test]
    fn argmin_prefers_first() {
        assert_eq!(argmin([2.0, 1.0, 1.0].into_iter()), 1);
        assert_eq!(argmin([f64::INFINITY, f64::INFINITY].into_iter()), 0);
    }
}
