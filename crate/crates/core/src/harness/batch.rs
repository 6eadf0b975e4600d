//! Runs one attack over every image and repetition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::boundary::{run_boundary, BoundaryConfig, BoundaryVariant};
use crate::error::Result;
use crate::hyperband::{run_hyperband, HyperbandConfig, ScheduleEntry};
use crate::nes::{run_nes, NesConfig, NesVariant};
use crate::oracle::{AttackGoal, Oracle, QueryBudget};
use crate::trace::AttackTrace;

use super::{run_jobs, run_seed, AttackImage, Target};

/// Points of the MSE-versus-queries curve, evenly spaced over the budget.
pub const CURVE_POINTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub enum AttackSpec {
    Boundary(BoundaryConfig),
    Nes(NesConfig),
    Hyperband(HyperbandConfig),
}

impl AttackSpec {
    /// Short name such as `lf-ba` or `rgb-nes`.
    pub fn name(&self) -> String {
        match self {
            AttackSpec::Boundary(c) => match c.variant {
                BoundaryVariant::Rgb => "rgb-ba".into(),
                BoundaryVariant::LowFreq { .. } => "lf-ba".into(),
            },
            AttackSpec::Nes(c) => match c.variant {
                NesVariant::Rgb => "rgb-nes".into(),
                NesVariant::LowFreq { .. } => "lf-nes".into(),
            },
            AttackSpec::Hyperband(_) => "hyperband".into(),
        }
    }

    pub fn max_queries(&self) -> u64 {
        match self {
            AttackSpec::Boundary(c) => c.max_queries,
            AttackSpec::Nes(c) => c.max_queries,
            AttackSpec::Hyperband(c) => c.total_queries,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AttackSpec::Boundary(c) => c.validate(),
            AttackSpec::Nes(c) => c.validate(),
            AttackSpec::Hyperband(c) => c.validate(),
        }
    }
}

/// One line of `runs.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub attack: String,
    pub image: usize,
    pub repetition: usize,
    pub label: usize,
    pub target: Option<usize>,
    pub seed: u64,
    pub success: bool,
    pub queries_to_success: Option<u64>,
    /// Queries the attack reports having spent.
    pub total_queries: u64,
    /// Queries the oracle(s) counted.
    pub oracle_queries: u64,
    pub iterations: usize,
    pub final_mse: f64,
    pub final_l2: f64,
    pub final_linf: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    /// Mean-squared error after `j * max_queries / CURVE_POINTS` queries,
    /// for `j = 0..=CURVE_POINTS`; `None` before the first trace row.
    pub curve: Vec<Option<f64>>,
    pub trace: Option<AttackTrace>,
    pub schedule: Option<Vec<ScheduleEntry>>,
}

/// Query counts of the curve grid.
pub fn curve_grid(max_queries: u64) -> Vec<u64> {
    (0..=CURVE_POINTS as u64).map(|j| j * max_queries / CURVE_POINTS as u64).collect()
}

/// Target class of a targeted run: a seeded draw among the other classes.
pub fn pick_target(label: usize, classes: usize, seed: u64) -> usize {
    let offset = 1 + (seed % (classes as u64 - 1)) as usize;
    (label + offset) % classes
}

/// Runs `spec` on every image `repetitions` times. Run errors are recorded
/// in the outcome rather than returned. Outcomes are ordered by image, then
/// repetition. Traces are kept only when `keep_traces` is set.
pub fn run_batch(
    target: &Target,
    spec: &AttackSpec,
    images: &[AttackImage],
    repetitions: usize,
    master_seed: u64,
    workers: usize,
    keep_traces: bool,
) -> Result<Vec<RunOutcome>> {
    spec.validate()?;
    let n = images.len() * repetitions;
    run_jobs(workers, n, |job| {
        let img = &images[job / repetitions];
        let rep = job % repetitions;
        let seed = run_seed(master_seed, img.index, rep, 0);
        run_one(target, spec, img, rep, seed, keep_traces)
    })
}

fn run_one(target: &Target, spec: &AttackSpec, img: &AttackImage, rep: usize, seed: u64, keep: bool) -> RunOutcome {
    let mut record = RunRecord {
        attack: spec.name(),
        image: img.index,
        repetition: rep,
        label: img.label,
        target: None,
        seed,
        success: false,
        queries_to_success: None,
        total_queries: 0,
        oracle_queries: 0,
        iterations: 0,
        final_mse: f64::NAN,
        final_l2: f64::NAN,
        final_linf: f64::NAN,
        error: None,
    };
    let grid = curve_grid(spec.max_queries());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let untargeted = AttackGoal::Untargeted { label: img.label };
    let result: Result<(AttackTrace, u64, Option<Vec<ScheduleEntry>>)> = match spec {
        AttackSpec::Boundary(c) => target.oracle(untargeted, QueryBudget::new(c.max_queries)).and_then(|mut o| {
            let trace = run_boundary(c, o.as_mut(), &img.image, &mut rng);
            record.oracle_queries = o.query_count();
            trace.map(|t| {
                let total = t.total_queries();
                (t, total, None)
            })
        }),
        AttackSpec::Nes(c) => {
            let goal = if c.targeted {
                let t = pick_target(img.label, target.classes(), seed);
                record.target = Some(t);
                AttackGoal::Targeted { target: t }
            } else {
                untargeted
            };
            target.oracle(goal, QueryBudget::new(c.max_queries)).and_then(|mut o| {
                let trace = run_nes(c, o.as_mut(), &img.image, img.label, &mut rng);
                record.oracle_queries = o.query_count();
                trace.map(|t| {
                    let total = t.total_queries();
                    (t, total, None)
                })
            })
        }
        AttackSpec::Hyperband(c) => {
            let result = run_hyperband(
                c,
                |_, budget: &QueryBudget| -> Result<Box<dyn Oracle>> {
                    Ok(target.oracle(untargeted, budget.clone())? as Box<dyn Oracle>)
                },
                &img.image,
                seed,
            );
            result.map(|r| {
                record.oracle_queries = r.arms.iter().map(|a| a.queries).sum();
                (r.winning_trace().clone(), r.total_queries, Some(r.schedule))
            })
        }
    };
    match result {
        Ok((trace, total, schedule)) => {
            let summary = trace.summary();
            record.success = summary.success;
            record.queries_to_success = summary.queries_to_success;
            if let AttackSpec::Hyperband(c) = spec {
                // trace rows count the winner's own queries; with early
                // stopping the run ends at its success, so the shared total
                // is the cost of that success
                if c.boundary.stop_at_success && summary.success {
                    record.queries_to_success = Some(total);
                }
            }
            record.total_queries = total;
            record.iterations = summary.iterations;
            record.final_mse = summary.final_metrics.mse;
            record.final_l2 = summary.final_metrics.l2;
            record.final_linf = summary.final_metrics.linf;
            let curve = grid.iter().map(|&q| trace.mse_at(q)).collect();
            RunOutcome { record, curve, trace: keep.then_some(trace), schedule }
        }
        Err(e) => {
            record.error = Some(e.to_string());
            RunOutcome { record, curve: vec![None; grid.len()], trace: None, schedule: None }
        }
    }
}
