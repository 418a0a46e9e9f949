//! Honest-but-curious reconstruction of a peer's private input.
//!
//! An observer follows the protocol and keeps every message it receives. For
//! a target peer it knows the update rules, `ρ`, the schedule, every consensus
//! value `z^i` and every group sum `z_g^i`; it knows the target's `y^i` only at
//! iterations where the two shared a group. Every relation is elementwise, so
//! the attack is one small linear system per coordinate over the unknowns
//!
//! ```text
//! [ w, x^1..x^T, λ^0..λ^T, y^i (unobserved i), rest-of-group sums ]
//! ```
//!
//! with three rows per iteration:
//!
//! ```text
//! (2+ρ) x^i − 2w + λ^{i−1}      = ρ z^{i−1}
//! x^i + λ^{i−1}/ρ  [− y^i]      = y^i  (observed) | 0
//! λ^i − λ^{i−1} − ρ x^i         = −ρ z^i
//! ```
//!
//! Eliminating the recurrences leaves the pair `(w, λ^0)` as the only free
//! quantities and every observed `y^i` contributes one row in them,
//! `y^i = (2/ρ) w + c_i (λ^0 − 2w) + known`, with `c_i` strictly decreasing in
//! `i`. The target is therefore exposed exactly when its `y` has been seen at
//! two distinct iterations; see [`earliest_breach`].

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::aggregate::AggregationMode;
use crate::error::{Error, Result};
use crate::params::{ParamVector, PeerId};
use crate::scalar::Real;
use crate::schedule::{privacy_bound, GroupSchedule};
use crate::simnet::PeerRecord;

/// Relative singular value cutoff for the rank decision.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// What one participant saw during a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverView<T> {
    pub observer: PeerId,
    pub n: usize,
    pub rho: T,
    pub shape: Vec<usize>,
    pub aggregation: AggregationMode,
    /// `y_k^i` keyed by `(i, k)`, only for messages addressed to the observer.
    pub received_y: BTreeMap<(usize, PeerId), ParamVector<T>>,
    /// `z_g^i` per iteration, indexed by group.
    pub partial_z: Vec<Vec<ParamVector<T>>>,
    /// `z^i` per iteration (index `i − 1`).
    pub z: Vec<ParamVector<T>>,
    pub own: PeerRecord<T>,
}

impl<T: Real> ObserverView<T> {
    pub fn iterations(&self) -> usize {
        self.z.len()
    }

    pub fn y(&self, iteration: usize, peer: PeerId) -> Option<&ParamVector<T>> {
        self.received_y.get(&(iteration, peer))
    }

    fn z_f64(&self, iteration: usize) -> Vec<f64> {
        match iteration {
            0 => vec![0.0; self.shape.iter().product()],
            i => self.z[i - 1].as_slice().iter().map(|v| v.as_f64()).collect(),
        }
    }

    fn check_target(&self, target: PeerId) -> Result<()> {
        if target >= self.n {
            return Err(Error::UnknownPeer { peer: target, n: self.n });
        }
        Ok(())
    }
}

/// Recovers `w_target` from an all-to-all run using the first two
/// iterations:
///
/// ```text
/// λ¹ = ρ (y¹ − z¹)
/// x² = y² − λ¹/ρ
/// w  = ((2+ρ) x² + λ¹ − ρ z¹) / 2
/// ```
pub fn reconstruct_closed_form<T: Real>(view: &ObserverView<T>, target: PeerId) -> Result<ParamVector<T>> {
    view.check_target(target)?;
    if target == view.observer {
        return Ok(view.own.w.clone());
    }
    if !matches!(view.aggregation, AggregationMode::AllToAll) {
        return Err(Error::NotAllToAll);
    }
    if view.iterations() < 2 {
        return Err(Error::InsufficientIterations {
            required: 2,
            available: view.iterations(),
        });
    }
    let missing = |i: usize| Error::MissingMessage(format!("y of peer {target} at iteration {i}"));
    let y1 = view.y(1, target).ok_or_else(|| missing(1))?;
    let y2 = view.y(2, target).ok_or_else(|| missing(2))?;
    let z1 = &view.z[0];
    let rho = view.rho;
    let two = T::one() + T::one();

    let lambda1 = y1.zip_map(z1, "closed-form λ¹", |y, z| rho * (y - z))?;
    let x2 = y2.zip_map(&lambda1, "closed-form x²", |y, l| y - l / rho)?;
    let partial = x2.zip_map(&lambda1, "closed-form w", |x, l| (two + rho) * x + l)?;
    partial.zip_map(z1, "closed-form w", |p, z| (p - rho * z) / two)
}

/// Which group-sum equations to add to the system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSumPolicy {
    /// Include them only when `s > gap/(gap − 1)` fails.
    #[default]
    Auto,
    Always,
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "iteration", rename_all = "snake_case")]
pub enum Unknown {
    W,
    X(usize),
    Lambda(usize),
    /// The target's `y` at an iteration the observer did not see it.
    Y(usize),
    /// Sum of the other members' `y` in the target's group.
    GroupRest(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "iteration", rename_all = "snake_case")]
pub enum Equation {
    XUpdate(usize),
    YDefinition(usize),
    LambdaUpdate(usize),
    GroupSum(usize),
}

/// Per-coordinate linear system. The coefficient matrix is shared by all
/// coordinates; `rhs` has one column per coordinate.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub target: PeerId,
    pub horizon: usize,
    pub shape: Vec<usize>,
    pub unknowns: Vec<Unknown>,
    pub equations: Vec<Equation>,
    pub matrix: DMatrix<f64>,
    pub rhs: DMatrix<f64>,
    /// Iterations at which the target's `y` was observed.
    pub observed: Vec<usize>,
    pub group_sum_rows: bool,
}

impl LinearSystem {
    pub fn unknown_count(&self) -> usize {
        self.unknowns.len()
    }

    pub fn equation_count(&self) -> usize {
        self.equations.len()
    }
}

/// An equation, its sparse coefficients and one right-hand side per coordinate.
type Row = (Equation, Vec<(Unknown, f64)>, Vec<f64>);

struct Builder {
    index: BTreeMap<Unknown, usize>,
    unknowns: Vec<Unknown>,
    rows: Vec<Row>,
}

impl Ord for Unknown {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let key = |u: &Unknown| match *u {
            Unknown::W => (0, 0),
            Unknown::X(i) => (1, i),
            Unknown::Lambda(i) => (2, i),
            Unknown::Y(i) => (3, i),
            Unknown::GroupRest(i) => (4, i),
        };
        key(self).cmp(&key(other))
    }
}

impl PartialOrd for Unknown {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Builder {
    fn new() -> Self {
        Self {
            index: BTreeMap::new(),
            unknowns: Vec::new(),
            rows: Vec::new(),
        }
    }

    fn declare(&mut self, u: Unknown) {
        if !self.index.contains_key(&u) {
            self.index.insert(u, self.unknowns.len());
            self.unknowns.push(u);
        }
    }

    fn row(&mut self, eq: Equation, terms: Vec<(Unknown, f64)>, rhs: Vec<f64>) {
        for (u, _) in &terms {
            self.declare(*u);
        }
        self.rows.push((eq, terms, rhs));
    }
}

/// Builds the observer's equations about `target` over the first `horizon`
/// iterations.
pub fn assemble_system<T: Real>(
    view: &ObserverView<T>,
    target: PeerId,
    horizon: usize,
    policy: GroupSumPolicy,
) -> Result<LinearSystem> {
    view.check_target(target)?;
    if horizon == 0 || horizon > view.iterations() {
        return Err(Error::InsufficientIterations {
            required: horizon.max(1),
            available: view.iterations(),
        });
    }
    let rho = view.rho.as_f64();
    let dim: usize = view.shape.iter().product();
    let n = view.n;
    let (gap, s) = match &view.aggregation {
        AggregationMode::AllToAll => (1, n),
        AggregationMode::Grouped { schedule } => (schedule.gap(), schedule.s),
    };
    let group_sum_rows = match policy {
        GroupSumPolicy::Auto => !privacy_bound(gap, s).discard_condition,
        GroupSumPolicy::Always => true,
        GroupSumPolicy::Never => false,
    };

    let mut b = Builder::new();
    b.declare(Unknown::W);
    for i in 1..=horizon {
        b.declare(Unknown::X(i));
    }
    for i in 0..=horizon {
        b.declare(Unknown::Lambda(i));
    }

    let mut observed = Vec::new();
    for i in 1..=horizon {
        let z_prev = view.z_f64(i - 1);
        let z_cur = view.z_f64(i);
        b.row(
            Equation::XUpdate(i),
            vec![(Unknown::X(i), 2.0 + rho), (Unknown::W, -2.0), (Unknown::Lambda(i - 1), 1.0)],
            z_prev.iter().map(|z| rho * z).collect(),
        );
        match view.y(i, target) {
            Some(y) => {
                observed.push(i);
                b.row(
                    Equation::YDefinition(i),
                    vec![(Unknown::X(i), 1.0), (Unknown::Lambda(i - 1), 1.0 / rho)],
                    y.as_slice().iter().map(|v| v.as_f64()).collect(),
                );
            }
            None => b.row(
                Equation::YDefinition(i),
                vec![(Unknown::X(i), 1.0), (Unknown::Lambda(i - 1), 1.0 / rho), (Unknown::Y(i), -1.0)],
                vec![0.0; dim],
            ),
        }
        b.row(
            Equation::LambdaUpdate(i),
            vec![(Unknown::Lambda(i), 1.0), (Unknown::Lambda(i - 1), -1.0), (Unknown::X(i), -rho)],
            z_cur.iter().map(|z| -rho * z).collect(),
        );
    }

    if group_sum_rows {
        for i in 1..=horizon {
            if view.y(i, target).is_some() {
                continue;
            }
            let groups = view.aggregation.groups_at(i, n);
            let g = groups
                .iter()
                .position(|members| members.contains(&target))
                .ok_or_else(|| Error::Transcript(format!("peer {target} has no group at iteration {i}")))?;
            let zg = view
                .partial_z
                .get(i - 1)
                .and_then(|p| p.get(g))
                .ok_or_else(|| Error::MissingMessage(format!("group sum {g} at iteration {i}")))?;
            b.row(
                Equation::GroupSum(i),
                vec![(Unknown::Y(i), 1.0), (Unknown::GroupRest(i), 1.0)],
                zg.as_slice().iter().map(|v| v.as_f64() * n as f64).collect(),
            );
        }
    }

    let rows = b.rows.len();
    let cols = b.unknowns.len();
    let mut matrix = DMatrix::<f64>::zeros(rows, cols);
    let mut rhs = DMatrix::<f64>::zeros(rows, dim);
    let mut equations = Vec::with_capacity(rows);
    for (r, (eq, terms, values)) in b.rows.into_iter().enumerate() {
        for (u, c) in terms {
            matrix[(r, b.index[&u])] += c;
        }
        for (j, v) in values.into_iter().enumerate() {
            rhs[(r, j)] = v;
        }
        equations.push(eq);
    }

    Ok(LinearSystem {
        target,
        horizon,
        shape: view.shape.clone(),
        unknowns: b.unknowns,
        equations,
        matrix,
        rhs,
        observed,
        group_sum_rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ReconstructionStatus {
    Unique { w_hat: ParamVector<f64> },
    Underdetermined { rank: usize, nullity: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    #[serde(flatten)]
    pub status: ReconstructionStatus,
    pub unknown_count: usize,
    pub equation_count: usize,
    pub rank: usize,
    /// `max_j ‖A x_j − b_j‖₂` over coordinates, for unique solves.
    pub residual: Option<f64>,
    pub observed_iterations: Vec<usize>,
    pub group_sum_rows: bool,
    /// How unknowns are counted: `[w, x^1..x^T, λ^0..λ^T]` plus one `y^i` per
    /// unobserved iteration and one rest-of-group sum per group-sum row.
    pub unknown_convention: String,
}

impl ReconstructionResult {
    pub fn is_unique(&self) -> bool {
        matches!(self.status, ReconstructionStatus::Unique { .. })
    }

    pub fn w_hat(&self) -> Option<&ParamVector<f64>> {
        match &self.status {
            ReconstructionStatus::Unique { w_hat } => Some(w_hat),
            ReconstructionStatus::Underdetermined { .. } => None,
        }
    }
}

/// Rank-revealing least-squares solve, one right-hand side per coordinate.
pub fn solve(sys: &LinearSystem) -> Result<ReconstructionResult> {
    let unknowns = sys.unknown_count();
    let svd = sys.matrix.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cutoff = RANK_TOLERANCE * sigma_max;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();

    let base = ReconstructionResult {
        status: ReconstructionStatus::Underdetermined {
            rank,
            nullity: unknowns - rank,
        },
        unknown_count: unknowns,
        equation_count: sys.equation_count(),
        rank,
        residual: None,
        observed_iterations: sys.observed.clone(),
        group_sum_rows: sys.group_sum_rows,
        unknown_convention: "w, x^1..x^T, lambda^0..lambda^T, y^i per unobserved iteration, one rest-of-group sum per group-sum row"
            .to_string(),
    };
    if rank < unknowns {
        return Ok(base);
    }

    let solution = svd
        .solve(&sys.rhs, cutoff)
        .map_err(|e| Error::InvalidParameter(format!("least-squares solve failed: {e}")))?;
    let resid = &sys.matrix * &solution - &sys.rhs;
    let residual = resid
        .column_iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max);
    let w_row = sys
        .unknowns
        .iter()
        .position(|u| *u == Unknown::W)
        .expect("w is always declared");
    let w_hat = ParamVector::new(solution.row(w_row).iter().copied().collect(), sys.shape.clone())?;
    Ok(ReconstructionResult {
        status: ReconstructionStatus::Unique { w_hat },
        residual: Some(residual),
        ..base
    })
}

/// Convenience: assemble with the default policy and solve.
pub fn attack<T: Real>(view: &ObserverView<T>, target: PeerId, horizon: usize) -> Result<ReconstructionResult> {
    solve(&assemble_system(view, target, horizon, GroupSumPolicy::Auto)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedCounts {
    pub unknowns: usize,
    pub equations: usize,
    pub discard_intermediate: bool,
}

/// Best-case bookkeeping for an attacker co-grouped with the target once
/// per cycle: `unknowns = (3T·t_g − T)/t_g + 2`, `equations = 3T`.
pub fn predicted_counts(horizon: usize, gap: usize, s: usize) -> Result<PredictedCounts> {
    if gap == 0 {
        return Err(Error::InvalidParameter("gap must be at least 1".into()));
    }
    if !horizon.is_multiple_of(gap) {
        return Err(Error::NotMultipleOfGap(horizon, gap));
    }
    Ok(PredictedCounts {
        unknowns: (3 * horizon * gap - horizon) / gap + 2,
        equations: 3 * horizon,
        discard_intermediate: privacy_bound(gap, s).discard_condition,
    })
}

/// First horizon `T` at which `observer` can solve for `target`'s input, i.e.
/// the iteration of their second shared group. `None` if they never share a
/// group. An observer always knows its own input, so `observer == target`
/// yields `Some(0)`.
pub fn earliest_breach(mode: &AggregationMode, n: usize, observer: PeerId, target: PeerId) -> Option<usize> {
    if observer == target {
        return Some(0);
    }
    match mode {
        AggregationMode::AllToAll => Some(2),
        AggregationMode::Grouped { schedule } => second_meeting(schedule, observer, target),
    }
    .filter(|_| observer < n && target < n)
}

fn second_meeting(schedule: &GroupSchedule, a: PeerId, b: PeerId) -> Option<usize> {
    schedule.meetings(a, b, 2 * schedule.gap()).get(1).copied()
}
