//! Parameter sweeps and their CSV tables.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{run_aggregation, AdmmConfig, AggregationRun};
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::scalar::Real;
use crate::schedule::{generate_schedule, validate_schedule, SearchBudget};
use crate::seeds;

const TAG_CHECKPOINT: u64 = 0xC4EC;
const TAG_SCHEDULE: u64 = 0x5C4E;
const TAG_ADMM: u64 = 0xAD;

fn write_csv<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub residual_l2: f64,
    pub max_dual_sum: f64,
}

/// Per-iteration `iteration,residual_l2,max_dual_sum` table of a run.
pub fn aggregation_trace_csv<T: Real>(run: &AggregationRun<T>) -> Result<String> {
    let rows: Vec<TraceRow> = run
        .traces
        .iter()
        .map(|t| TraceRow {
            iteration: t.iteration,
            residual_l2: t.residual_l2.as_f64(),
            max_dual_sum: t.max_dual_sum.as_f64(),
        })
        .collect();
    write_csv(&rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterationSweep {
    pub n: usize,
    /// `None` runs all-to-all.
    pub group_size: Option<usize>,
    pub rho: f64,
    pub dims: Vec<usize>,
    pub first_iteration: usize,
    pub last_iteration: usize,
    pub seeds: Vec<u64>,
    pub budget: SearchBudget,
    pub allow_unsafe: bool,
}

impl Default for IterationSweep {
    fn default() -> Self {
        Self {
            n: 9,
            group_size: Some(3),
            rho: 1.0,
            dims: vec![10_000],
            first_iteration: 1,
            last_iteration: 7,
            seeds: (0..5).collect(),
            budget: SearchBudget::default(),
            allow_unsafe: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub dim: usize,
    pub iterations: usize,
    pub mean_mse: f64,
    pub min_mse: f64,
    pub max_mse: f64,
}

/// Standard normal checkpoint for `peer`, reproducible from `seed`.
pub fn random_checkpoint<T: Real>(seed: u64, peer: usize, dim: usize) -> ParamVector<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[TAG_CHECKPOINT, peer as u64]));
    let data = (0..dim)
        .map(|_| T::from_f64_lossy(StandardNormal.sample(&mut rng)))
        .collect();
    ParamVector::from_vec(data).expect("finite draws")
}

/// MSE between `z^i` and the exact mean after each of `iterations`
/// iterations, for one seed.
fn mse_curve(cfg: &IterationSweep, dim: usize, seed: u64) -> Result<Vec<f64>> {
    let ws: Vec<ParamVector<f64>> = (0..cfg.n).map(|k| random_checkpoint(seed, k, dim)).collect();
    let mut admm = AdmmConfig::new(cfg.rho, cfg.last_iteration).allow_unsafe(cfg.allow_unsafe);
    if let Some(s) = cfg.group_size {
        admm = admm.grouped(generate_schedule(cfg.n, s, seeds::derive(seed, &[TAG_SCHEDULE]), cfg.budget)?);
    }
    let run = run_aggregation(&ws, &admm, seeds::derive(seed, &[TAG_ADMM]))?;
    Ok(run
        .traces
        .iter()
        .map(|t| t.residual_l2 * t.residual_l2 / dim as f64)
        .collect())
}

/// Mean MSE to the exact average at every iteration count in range, over
/// random checkpoints drawn per seed. One row per `(dim, iterations)`.
pub fn sweep_iterations(cfg: &IterationSweep) -> Result<Vec<MseRow>> {
    if cfg.first_iteration == 0 || cfg.last_iteration < cfg.first_iteration {
        return Err(Error::InvalidParameter(
            "iteration range must start at 1 or later and be non-empty".into(),
        ));
    }
    if cfg.seeds.is_empty() || cfg.dims.is_empty() || cfg.dims.contains(&0) {
        return Err(Error::InvalidParameter("need at least one seed and positive dims".into()));
    }
    let mut rows = Vec::new();
    for &dim in &cfg.dims {
        let curves: Vec<Vec<f64>> = cfg
            .seeds
            .par_iter()
            .map(|&seed| mse_curve(cfg, dim, seed))
            .collect::<Result<_>>()?;
        for it in cfg.first_iteration..=cfg.last_iteration {
            let vals: Vec<f64> = curves.iter().map(|c| c[it - 1]).collect();
            rows.push(MseRow {
                dim,
                iterations: it,
                mean_mse: vals.iter().sum::<f64>() / vals.len() as f64,
                min_mse: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max_mse: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
        }
    }
    Ok(rows)
}

/// True when `mean_mse` strictly decreases within every dim block.
pub fn mse_strictly_decreasing(rows: &[MseRow]) -> bool {
    rows.windows(2)
        .filter(|w| w[0].dim == w[1].dim)
        .all(|w| w[1].mean_mse < w[0].mean_mse)
}

pub fn mse_csv(rows: &[MseRow]) -> Result<String> {
    write_csv(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSweep {
    pub ns: Vec<usize>,
    pub s: usize,
    pub seeds: Vec<u64>,
    pub budget: SearchBudget,
}

impl Default for ScheduleSweep {
    fn default() -> Self {
        Self {
            ns: vec![9, 15, 21, 27],
            s: 3,
            seeds: (0..20).collect(),
            budget: SearchBudget::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassCountRow {
    pub n: usize,
    pub s: usize,
    pub seeds: usize,
    pub median_classes: f64,
    pub min_classes: usize,
    pub max_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSweepResult {
    pub rows: Vec<ClassCountRow>,
    /// Median counts never drop as `n` grows.
    pub monotone: bool,
}

fn median(sorted: &[usize]) -> f64 {
    let m = sorted.len();
    if m % 2 == 1 {
        sorted[m / 2] as f64
    } else {
        (sorted[m / 2 - 1] + sorted[m / 2]) as f64 / 2.0
    }
}

/// Parallel-class counts reached by the generator for each `n`.
pub fn sweep_schedule(cfg: &ScheduleSweep) -> Result<ScheduleSweepResult> {
    if cfg.seeds.is_empty() || cfg.ns.is_empty() {
        return Err(Error::InvalidParameter("need at least one n and one seed".into()));
    }
    let mut ns = cfg.ns.clone();
    ns.sort_unstable();
    ns.dedup();
    let mut rows = Vec::with_capacity(ns.len());
    for n in ns {
        let mut counts: Vec<usize> = cfg
            .seeds
            .par_iter()
            .map(|&seed| {
                let sched = generate_schedule(n, cfg.s, seed, cfg.budget)?;
                let report = validate_schedule(&sched);
                if !report.violations.is_empty() {
                    return Err(Error::InvalidSchedule(format!("generator produced {:?}", report.violations)));
                }
                Ok(sched.gap())
            })
            .collect::<Result<_>>()?;
        counts.sort_unstable();
        rows.push(ClassCountRow {
            n,
            s: cfg.s,
            seeds: counts.len(),
            median_classes: median(&counts),
            min_classes: counts[0],
            max_classes: counts[counts.len() - 1],
        });
    }
    let monotone = rows.windows(2).all(|w| w[1].median_classes >= w[0].median_classes);
    Ok(ScheduleSweepResult { rows, monotone })
}

pub fn class_count_csv(rows: &[ClassCountRow]) -> Result<String> {
    write_csv(rows)
}
