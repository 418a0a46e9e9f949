//! Federated training loop: local SGD on every peer followed by an
//! aggregation step each round.

pub mod data;
pub mod model;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{exact_mean, run_aggregation, AdmmConfig};
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::scalar::Real;
use crate::schedule::{generate_schedule, GroupSchedule, SearchBudget};
use crate::seeds;

pub use data::{load_csv, make_regression, make_synthetic, make_synthetic_with, pooled_test, LocalDataset, Split, SyntheticConfig, Targets};
pub use model::{Metrics, Model, ModelKind};

pub const SCHEMA_VERSION: u32 = 1;

const TAG_SHUFFLE: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_SCHEDULE: u64 = 3;
const TAG_ADMM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Grouped ADMM aggregation.
    Secured,
    /// Exact average, as a trusted server would compute it.
    Fedavg,
    /// No aggregation.
    Local,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Secured => "secured",
            TrainMode::Fedavg => "fedavg",
            TrainMode::Local => "local",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "secured" => Ok(TrainMode::Secured),
            "fedavg" => Ok(TrainMode::Fedavg),
            "local" => Ok(TrainMode::Local),
            other => Err(Error::InvalidParameter(format!("unknown mode '{other}'"))),
        }
    }
}

/// ADMM settings for the secured mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, bound = "T: Real")]
pub struct SecureAggSettings<T> {
    pub rho: T,
    pub iterations: usize,
    /// `None` exchanges with every peer each iteration.
    pub group_size: Option<usize>,
    pub budget: SearchBudget,
    pub allow_unsafe: bool,
    pub zero_duals: bool,
}

impl<T: Real> Default for SecureAggSettings<T> {
    fn default() -> Self {
        Self {
            rho: T::one(),
            iterations: 2,
            group_size: Some(3),
            budget: SearchBudget::default(),
            allow_unsafe: false,
            zero_duals: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, bound = "T: Real")]
pub struct FlConfig<T> {
    pub schema_version: u32,
    pub model: ModelKind,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: T,
    pub seed: u64,
    pub secure: SecureAggSettings<T>,
}

impl<T: Real> Default for FlConfig<T> {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelKind::default(),
            rounds: 50,
            local_epochs: 1,
            batch_size: 32,
            learning_rate: T::from_f64_lossy(0.05),
            seed: 0,
            secure: SecureAggSettings::default(),
        }
    }
}

impl<T: Real> FlConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidParameter(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.batch_size == 0 || self.local_epochs == 0 {
            return Err(Error::InvalidParameter("batch_size and local_epochs must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > T::zero()) {
            return Err(Error::InvalidParameter("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Runs `cfg.local_epochs` epochs of minibatch SGD from `params`.
///
/// The shuffle for global epoch `round * local_epochs + e` is seeded from
/// `(cfg.seed, peer, epoch)`, so one call with `E·R` epochs matches `R`
/// calls with `E` epochs each.
pub fn local_update<T: Real>(
    model: &Model,
    params: &ParamVector<T>,
    train: &Split<T>,
    cfg: &FlConfig<T>,
    peer: usize,
    round: usize,
) -> Result<ParamVector<T>> {
    // A zero step is allowed here so callers can probe the update; `train`
    // still requires a positive rate.
    FlConfig {
        learning_rate: T::one(),
        ..cfg.clone()
    }
    .validate()?;
    if !(cfg.learning_rate >= T::zero() && cfg.learning_rate.is_finite()) {
        return Err(Error::InvalidParameter("learning_rate must be finite and non-negative".into()));
    }
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if cfg.batch_size > train.len() {
        return Err(Error::InvalidParameter(format!(
            "batch size {} exceeds {} training rows",
            cfg.batch_size,
            train.len()
        )));
    }
    let mut p = params.as_slice().to_vec();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for e in 0..cfg.local_epochs {
        let epoch = round * cfg.local_epochs + e;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, &[TAG_SHUFFLE, peer as u64, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad) = model.loss_grad(&p, train, batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { round, epoch });
            }
            for (v, g) in p.iter_mut().zip(&grad) {
                *v -= cfg.learning_rate * *g;
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { round, epoch });
            }
        }
    }
    ParamVector::new(p, params.shape().to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// 0 is the state after initialization.
    pub round: usize,
    /// Mean over peers of each peer model's accuracy on the pooled test set.
    pub global_accuracy: Option<f64>,
    pub global_loss: f64,
    /// Each peer model on its own test rows.
    pub peer_accuracy: Vec<Option<f64>>,
    pub peer_loss: Vec<Option<f64>>,
    /// `‖z − mean(w)‖₂` after aggregation, secured mode only.
    pub aggregation_residual: Option<f64>,
    /// Gap of the communication pattern used this round, secured mode only.
    pub gap: Option<usize>,
    /// ADMM iterations run this round, secured mode only.
    pub admm_iterations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct TrainingReport<T> {
    pub mode: TrainMode,
    pub config: FlConfig<T>,
    pub peers: usize,
    pub num_params: usize,
    pub gap: Option<usize>,
    pub admm_iterations: Option<usize>,
    pub schedule: Option<GroupSchedule>,
    pub rounds: Vec<RoundMetrics>,
    pub final_params: Vec<ParamVector<T>>,
}

impl<T> TrainingReport<T> {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.rounds.last().and_then(|r| r.global_accuracy)
    }
}

struct Aggregator<T: Real> {
    mode: TrainMode,
    admm: Option<AdmmConfig<T>>,
    seed: u64,
}

impl<T: Real> Aggregator<T> {
    fn new(mode: TrainMode, cfg: &FlConfig<T>, n: usize) -> Result<(Self, Option<GroupSchedule>)> {
        let mut schedule = None;
        let admm = if mode == TrainMode::Secured {
            let s = &cfg.secure;
            let mut admm = AdmmConfig::new(s.rho, s.iterations).allow_unsafe(s.allow_unsafe);
            if s.zero_duals {
                admm = admm.lambda_zero();
            }
            if let Some(size) = s.group_size {
                let sched = generate_schedule(n, size, seeds::derive(cfg.seed, &[TAG_SCHEDULE]), s.budget)?;
                admm = admm.grouped(sched.clone());
                schedule = Some(sched);
            }
            admm.validate(n)?;
            Some(admm)
        } else {
            None
        };
        Ok((
            Self {
                mode,
                admm,
                seed: cfg.seed,
            },
            schedule,
        ))
    }

    /// Returns the per-peer results and the aggregation residual.
    fn aggregate(&self, ws: Vec<ParamVector<T>>, round: usize) -> Result<(Vec<ParamVector<T>>, Option<f64>)> {
        let n = ws.len();
        match self.mode {
            TrainMode::Local => Ok((ws, None)),
            TrainMode::Fedavg => Ok((vec![exact_mean(&ws)?; n], None)),
            TrainMode::Secured => {
                let admm = self.admm.as_ref().expect("secured mode has admm settings");
                let run = run_aggregation(&ws, admm, seeds::derive(self.seed, &[TAG_ADMM, round as u64]))?;
                let residual = run.final_residual().as_f64();
                Ok((vec![run.z_final; n], Some(residual)))
            }
        }
    }
}

fn measure<T: Real>(
    model: &Model,
    params: &[ParamVector<T>],
    data: &[LocalDataset<T>],
    pooled: &Split<T>,
    round: usize,
    residual: Option<f64>,
    admm: Option<(usize, usize)>,
) -> Result<RoundMetrics> {
    let per_peer: Vec<(Metrics, Option<Metrics>)> = params
        .par_iter()
        .zip(data)
        .map(|(p, d)| {
            let global = model.evaluate(p.as_slice(), pooled)?;
            let own = if d.test.is_empty() {
                None
            } else {
                Some(model.evaluate(p.as_slice(), &d.test)?)
            };
            Ok((global, own))
        })
        .collect::<Result<_>>()?;
    let n = per_peer.len() as f64;
    let global_accuracy = per_peer
        .iter()
        .map(|(g, _)| g.accuracy)
        .sum::<Option<f64>>()
        .map(|s| s / n);
    Ok(RoundMetrics {
        round,
        global_accuracy,
        global_loss: per_peer.iter().map(|(g, _)| g.loss).sum::<f64>() / n,
        peer_accuracy: per_peer.iter().map(|(_, o)| o.and_then(|m| m.accuracy)).collect(),
        peer_loss: per_peer.iter().map(|(_, o)| o.map(|m| m.loss)).collect(),
        aggregation_residual: residual,
        gap: admm.map(|(g, _)| g),
        admm_iterations: admm.map(|(_, i)| i),
    })
}

/// Trains one model per peer for `cfg.rounds` rounds.
///
/// Every mode starts from the same per-peer random initializations; the
/// federated modes aggregate them once before the first round.
pub fn train<T: Real>(mode: TrainMode, cfg: &FlConfig<T>, data: &[LocalDataset<T>]) -> Result<TrainingReport<T>> {
    cfg.validate()?;
    let first = data.first().ok_or(Error::Empty("peer datasets"))?;
    let model = Model::for_data(cfg.model, &first.train)?;
    for d in data {
        if Model::for_data(cfg.model, &d.train)? != model {
            return Err(Error::Dataset("peers disagree on feature width or class count".into()));
        }
    }
    let n = data.len();
    let pooled = pooled_test(data)?;
    if pooled.is_empty() {
        return Err(Error::Dataset("no test rows".into()));
    }
    let (aggregator, schedule) = Aggregator::new(mode, cfg, n)?;

    let inits: Vec<ParamVector<T>> = (0..n)
        .map(|k| model.init(seeds::derive(cfg.seed, &[TAG_INIT, k as u64])))
        .collect();
    let (mut params, residual) = aggregator.aggregate(inits, 0)?;
    let gap = (mode == TrainMode::Secured).then(|| schedule.as_ref().map_or(1, |s| s.gap()));
    let admm = gap.map(|g| (g, cfg.secure.iterations));
    let mut rounds = vec![measure(&model, &params, data, &pooled, 0, residual, admm)?];

    for r in 1..=cfg.rounds {
        let local: Vec<ParamVector<T>> = params
            .par_iter()
            .zip(data)
            .enumerate()
            .map(|(k, (p, d))| local_update(&model, p, &d.train, cfg, k, r - 1))
            .collect::<Result<_>>()?;
        let (next, residual) = aggregator.aggregate(local, r)?;
        params = next;
        rounds.push(measure(&model, &params, data, &pooled, r, residual, admm)?);
    }

    Ok(TrainingReport {
        mode,
        config: cfg.clone(),
        peers: n,
        num_params: model.num_params(),
        gap,
        admm_iterations: (mode == TrainMode::Secured).then_some(cfg.secure.iterations),
        schedule,
        rounds,
        final_params: params,
    })
}
