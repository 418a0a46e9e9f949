//! ADMM consensus averaging.
//!
//! Each peer `k` holds a private vector `w_k`. The engine solves
//! `min Σ_k ‖x_k − w_k‖²  s.t. x_k = z` with the per-peer updates
//!
//! ```text
//! x_k^i = (2 w_k − λ_k^{i−1} + ρ z^{i−1}) / (2 + ρ)
//! y_k^i = x_k^i + λ_k^{i−1} / ρ
//! z^i   = (1/n) Σ_k y_k^i
//! λ_k^i = λ_k^{i−1} + ρ (x_k^i − z^i)
//! ```
//!
//! In grouped mode the `y` values only travel inside the groups of the
//! current parallel class; each group publishes `z_g = (1/n) Σ_{u∈g} y_u` and
//! the consensus is `z = Σ_g z_g`, which is the same average.
//!
//! Sums run in ascending peer id and then ascending group index so every peer
//! computes a bit-identical `z`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamVector, PeerId};
use crate::scalar::Real;
use crate::schedule::GroupSchedule;

/// `(2w − λ + ρz) / (2 + ρ)`.
pub fn x_minimize<T: Real>(
    w: &ParamVector<T>,
    lambda: &ParamVector<T>,
    z: &ParamVector<T>,
    rho: T,
) -> Result<ParamVector<T>> {
    w.ensure_same_shape(lambda)?;
    let two = T::one() + T::one();
    let numer = w.zip_map(lambda, "x_minimize", |w, l| two * w - l)?;
    numer.zip_map(z, "x_minimize", |a, z| (a + rho * z) / (two + rho))
}

/// `x + λ/ρ`, the value a peer shares with its group.
pub fn y_message<T: Real>(x: &ParamVector<T>, lambda: &ParamVector<T>, rho: T) -> Result<ParamVector<T>> {
    x.zip_map(lambda, "y_message", |x, l| x + l / rho)
}

/// Group contribution `(1/n) Σ y`, where `n` is the global peer count.
pub fn partial_z<T: Real>(group_ys: &[&ParamVector<T>], n: usize) -> Result<ParamVector<T>> {
    let (first, rest) = group_ys.split_first().ok_or(Error::Empty("partial_z group"))?;
    if n < group_ys.len() {
        return Err(Error::InvalidParameter(format!(
            "group of {} exceeds peer count {n}",
            group_ys.len()
        )));
    }
    let mut acc = (*first).clone();
    for y in rest {
        acc = acc.zip_map(y, "partial_z", |a, b| a + b)?;
    }
    let n = T::from_usize_exact(n);
    acc.map("partial_z", |v| v / n)
}

/// `Σ_g z_g` in the given order.
pub fn combine_z<T: Real>(partials: &[&ParamVector<T>]) -> Result<ParamVector<T>> {
    let (first, rest) = partials.split_first().ok_or(Error::Empty("combine_z partials"))?;
    let mut acc = (*first).clone();
    for p in rest {
        acc = acc.zip_map(p, "combine_z", |a, b| a + b)?;
    }
    Ok(acc)
}

/// `λ + ρ(x − z)`.
pub fn lambda_update<T: Real>(
    lambda: &ParamVector<T>,
    x: &ParamVector<T>,
    z: &ParamVector<T>,
    rho: T,
) -> Result<ParamVector<T>> {
    let gap = x.zip_map(z, "lambda_update", |x, z| x - z)?;
    lambda.zip_map(&gap, "lambda_update", |l, d| l + rho * d)
}

/// Exact mean `(1/n) Σ_k w_k`, summed in peer order.
pub fn exact_mean<T: Real>(ws: &[ParamVector<T>]) -> Result<ParamVector<T>> {
    let refs: Vec<&ParamVector<T>> = ws.iter().collect();
    partial_z(&refs, ws.len())
}

/// How the initial duals `λ_k^0` are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaInit<T> {
    /// i.i.d. uniform on `[0, 1)` per coordinate, one stream per peer.
    Uniform,
    Zero,
    /// Caller-provided duals, one per peer.
    Explicit(Vec<ParamVector<T>>),
}

impl<T> LambdaInit<T> {
    pub fn label(&self) -> &'static str {
        match self {
            LambdaInit::Uniform => "uniform",
            LambdaInit::Zero => "zero",
            LambdaInit::Explicit(_) => "explicit",
        }
    }
}

/// Communication pattern for the `y` exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AggregationMode {
    AllToAll,
    Grouped { schedule: GroupSchedule },
}

impl AggregationMode {
    /// Gap of the communication pattern; all-to-all behaves like gap 1.
    pub fn gap(&self) -> usize {
        match self {
            AggregationMode::AllToAll => 1,
            AggregationMode::Grouped { schedule } => schedule.gap(),
        }
    }

    /// Groups active at 1-indexed iteration `i`, as sorted member lists.
    pub fn groups_at(&self, i: usize, n: usize) -> Vec<Vec<PeerId>> {
        match self {
            AggregationMode::AllToAll => vec![(0..n).collect()],
            AggregationMode::Grouped { schedule } => schedule
                .class_for_iteration(i)
                .blocks()
                .iter()
                .map(|b| b.members().to_vec())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmConfig<T> {
    pub rho: T,
    pub max_iterations: usize,
    pub lambda_init: LambdaInit<T>,
    pub mode: AggregationMode,
    /// Permit grouped runs past `2·gap − 1` iterations.
    pub allow_unsafe: bool,
    /// Stop once `‖z^i − z^{i−1}‖₂ ≤ ε`. Off by default.
    pub early_stop: Option<T>,
}

impl<T: Real> AdmmConfig<T> {
    /// All-to-all, uniform `λ⁰`, no early stop.
    pub fn new(rho: T, max_iterations: usize) -> Self {
        Self {
            rho,
            max_iterations,
            lambda_init: LambdaInit::Uniform,
            mode: AggregationMode::AllToAll,
            allow_unsafe: false,
            early_stop: None,
        }
    }

    pub fn grouped(mut self, schedule: GroupSchedule) -> Self {
        self.mode = AggregationMode::Grouped { schedule };
        self
    }

    pub fn lambda_zero(mut self) -> Self {
        self.lambda_init = LambdaInit::Zero;
        self
    }

    pub fn with_lambda(mut self, lambdas: Vec<ParamVector<T>>) -> Self {
        self.lambda_init = LambdaInit::Explicit(lambdas);
        self
    }

    pub fn allow_unsafe(mut self, allow: bool) -> Self {
        self.allow_unsafe = allow;
        self
    }

    pub fn early_stop(mut self, eps: T) -> Self {
        self.early_stop = Some(eps);
        self
    }

    /// Checks the configuration against a run over `peers` inputs.
    pub fn validate(&self, peers: usize) -> Result<()> {
        if !(self.rho > T::zero() && self.rho.is_finite()) {
            return Err(Error::InvalidParameter(format!("rho must be positive, got {}", self.rho)));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter("at least one iteration is required".into()));
        }
        if let AggregationMode::Grouped { schedule } = &self.mode {
            if schedule.n != peers {
                return Err(Error::ScheduleMismatch {
                    schedule_n: schedule.n,
                    peers,
                });
            }
            schedule.ensure_valid()?;
            let bound = schedule.max_secure_iterations();
            if self.max_iterations > bound.max_iterations && !self.allow_unsafe {
                return Err(Error::PrivacyLimitExceeded {
                    iterations: self.max_iterations,
                    limit: bound.max_iterations,
                    gap: bound.gap,
                });
            }
        }
        Ok(())
    }
}

/// Draws `λ_k^0` for every peer. Uniform draws use a ChaCha stream per peer
/// keyed by `seed`, so a peer's duals do not depend on the peer count.
pub fn initial_duals<T: Real>(
    n: usize,
    shape: &[usize],
    init: &LambdaInit<T>,
    seed: u64,
) -> Result<Vec<ParamVector<T>>> {
    match init {
        LambdaInit::Zero => (0..n).map(|_| ParamVector::zeros(shape)).collect(),
        LambdaInit::Uniform => (0..n)
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                let len = shape.iter().product();
                let data = (0..len).map(|_| T::from_f64_lossy(rng.random::<f64>())).collect();
                ParamVector::new(data, shape.to_vec())
            })
            .collect(),
        LambdaInit::Explicit(ls) => {
            if ls.len() != n {
                return Err(Error::LengthMismatch {
                    what: "explicit initial duals",
                    expected: n,
                    found: ls.len(),
                });
            }
            for l in ls {
                if l.shape() != shape {
                    return Err(Error::ShapeMismatch {
                        expected: shape.to_vec(),
                        found: l.shape().to_vec(),
                    });
                }
            }
            Ok(ls.clone())
        }
    }
}

/// Local ADMM state of one peer.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerAdmmState<T> {
    pub peer: PeerId,
    pub w: ParamVector<T>,
    pub x: ParamVector<T>,
    pub lambda: ParamVector<T>,
    pub z: ParamVector<T>,
}

impl<T: Real> PeerAdmmState<T> {
    /// Starts from `z⁰ = 0` and `x⁰ = 0`.
    pub fn new(peer: PeerId, w: ParamVector<T>, lambda0: ParamVector<T>) -> Result<Self> {
        w.ensure_same_shape(&lambda0)?;
        let zeros = ParamVector::zeros(w.shape())?;
        Ok(Self {
            peer,
            w,
            x: zeros.clone(),
            lambda: lambda0,
            z: zeros,
        })
    }

    /// x-minimization; returns the `y` message to send.
    pub fn primal_step(&mut self, rho: T) -> Result<ParamVector<T>> {
        self.x = x_minimize(&self.w, &self.lambda, &self.z, rho)?;
        y_message(&self.x, &self.lambda, rho)
    }

    /// Adopts the consensus value and updates the dual.
    pub fn dual_step(&mut self, z: &ParamVector<T>, rho: T) -> Result<()> {
        self.lambda = lambda_update(&self.lambda, &self.x, z, rho)?;
        self.z = z.clone();
        Ok(())
    }
}

/// Everything observable about one iteration, plus oracle-side diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct IterationTrace<T> {
    pub iteration: usize,
    /// `y_k^i`, indexed by peer id.
    pub y: Vec<ParamVector<T>>,
    /// Member lists of the groups used at this iteration.
    pub groups: Vec<Vec<PeerId>>,
    /// `z_g^i`, indexed like `groups`.
    pub partial_z: Vec<ParamVector<T>>,
    pub z: ParamVector<T>,
    /// `‖z^i − z*‖₂` against the exact mean.
    pub residual_l2: T,
    /// `‖Σ_k λ_k^i‖∞`.
    pub max_dual_sum: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationRun<T> {
    pub z_final: ParamVector<T>,
    pub traces: Vec<IterationTrace<T>>,
    /// Exact mean `z*` of the inputs.
    pub target: ParamVector<T>,
    pub initial_lambdas: Vec<ParamVector<T>>,
    pub final_states: Vec<PeerAdmmState<T>>,
}

impl<T: Real> AggregationRun<T> {
    pub fn iterations(&self) -> usize {
        self.traces.len()
    }

    /// `‖z^I − z*‖₂`.
    pub fn final_residual(&self) -> T {
        self.traces.last().map_or(T::zero(), |t| t.residual_l2)
    }
}

pub(crate) fn validate_inputs<T: Real>(ws: &[ParamVector<T>]) -> Result<()> {
    if ws.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "aggregation needs at least 2 peers, got {}",
            ws.len()
        )));
    }
    for w in &ws[1..] {
        ws[0].ensure_same_shape(w)?;
    }
    Ok(())
}

/// Runs the protocol to completion.
///
/// Deterministic in `seed` and independent of thread scheduling.
pub fn run_aggregation<T: Real>(ws: &[ParamVector<T>], cfg: &AdmmConfig<T>, seed: u64) -> Result<AggregationRun<T>> {
    validate_inputs(ws)?;
    cfg.validate(ws.len())?;
    let n = ws.len();
    let rho = cfg.rho;
    let target = exact_mean(ws)?;
    let initial_lambdas = initial_duals(n, ws[0].shape(), &cfg.lambda_init, seed)?;
    let mut states: Vec<PeerAdmmState<T>> = ws
        .iter()
        .zip(&initial_lambdas)
        .enumerate()
        .map(|(k, (w, l))| PeerAdmmState::new(k, w.clone(), l.clone()))
        .collect::<Result<_>>()?;

    let mut traces = Vec::with_capacity(cfg.max_iterations);
    let mut z_prev = ParamVector::zeros(ws[0].shape())?;
    for i in 1..=cfg.max_iterations {
        let y: Vec<ParamVector<T>> = states
            .par_iter_mut()
            .map(|s| s.primal_step(rho))
            .collect::<Result<_>>()?;

        let groups = cfg.mode.groups_at(i, n);
        let partials: Vec<ParamVector<T>> = groups
            .iter()
            .map(|g| {
                let ys: Vec<&ParamVector<T>> = g.iter().map(|&k| &y[k]).collect();
                partial_z(&ys, n)
            })
            .collect::<Result<_>>()?;
        let z = combine_z(&partials.iter().collect::<Vec<_>>())?;

        states
            .par_iter_mut()
            .map(|s| s.dual_step(&z, rho))
            .collect::<Result<Vec<()>>>()?;

        let lambdas: Vec<&ParamVector<T>> = states.iter().map(|s| &s.lambda).collect();
        let dual_sum = combine_z(&lambdas)?;
        let trace = IterationTrace {
            iteration: i,
            residual_l2: z.l2_distance(&target)?,
            max_dual_sum: dual_sum.linf_norm(),
            y,
            groups,
            partial_z: partials,
            z: z.clone(),
        };
        traces.push(trace);

        let settled = match cfg.early_stop {
            Some(eps) => z.l2_distance(&z_prev)? <= eps,
            None => false,
        };
        z_prev = z;
        if settled {
            break;
        }
    }

    Ok(AggregationRun {
        z_final: z_prev,
        traces,
        target,
        initial_lambdas,
        final_states: states,
    })
}
