//! Successive halving over low-frequency boundary-attack arms.
//!
//! Every arm runs the low-frequency boundary attack at its own ratio. Arms
//! advance in lockstep rounds; after each round the worse half (by current
//! MSE) is dropped, until a single arm remains and keeps running on the rest
//! of the shared budget.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boundary::{boundary_step, init_boundary, BoundaryConfig, BoundaryState, BoundaryVariant};
use crate::error::{Error, Result};
use crate::frequency::FreqRatio;
use crate::oracle::{Oracle, QueryBudget};
use crate::tensorimg::{metrics, ImageTensor};
use crate::trace::{AttackTrace, TraceRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperbandConfig {
    pub ratios: Vec<FreqRatio>,
    /// Arms launched per ratio.
    pub arms_per_ratio: usize,
    /// Iterations per round.
    pub round_length: usize,
    /// Global query budget shared by all arms.
    pub total_queries: u64,
    /// Step sizes and success threshold for every arm; `variant` and
    /// `max_queries` are overridden per arm.
    pub boundary: BoundaryConfig,
}

impl Default for HyperbandConfig {
    fn default() -> Self {
        let ratios = [4.0, 8.0, 16.0, 32.0]
            .iter()
            .map(|d| FreqRatio::new(1.0 / d).expect("valid ratio"))
            .collect();
        Self {
            ratios,
            arms_per_ratio: 1,
            round_length: 500,
            total_queries: 5000,
            boundary: BoundaryConfig::default(),
        }
    }
}

impl HyperbandConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() || self.arms_per_ratio == 0 || self.round_length == 0 {
            return Err(Error::InvalidArgument("need at least one arm and a positive round length".into()));
        }
        self.boundary.validate()
    }

    fn arm_ratios(&self) -> Vec<FreqRatio> {
        self.ratios
            .iter()
            .flat_map(|&r| std::iter::repeat_n(r, self.arms_per_ratio))
            .collect()
    }
}

/// One line of the pruning log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleEntry {
    pub round: usize,
    pub arm: usize,
    pub ratio: f64,
    pub score: f64,
    pub pruned: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub ratio: FreqRatio,
    pub trace: AttackTrace,
    pub queries: u64,
    /// Round after which the arm was dropped.
    pub pruned_after: Option<usize>,
    pub init_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperbandResult {
    pub winner: usize,
    pub arms: Vec<ArmResult>,
    pub schedule: Vec<ScheduleEntry>,
    /// Queries drawn from the shared budget.
    pub total_queries: u64,
}

impl HyperbandResult {
    pub fn winning_trace(&self) -> &AttackTrace {
        &self.arms[self.winner].trace
    }
}

struct Arm {
    ratio: FreqRatio,
    config: BoundaryConfig,
    oracle: Box<dyn Oracle>,
    rng: ChaCha8Rng,
    state: Option<BoundaryState>,
    trace: AttackTrace,
    alive: bool,
    pruned_after: Option<usize>,
    init_error: Option<String>,
}

impl Arm {
    fn score(&self) -> f64 {
        self.trace.rows.last().map_or(f64::INFINITY, |r| r.mse)
    }

    fn succeeded(&self) -> bool {
        self.trace.first_success().is_some()
    }

    fn record(&mut self, accepted: Option<bool>) {
        let state = self.state.as_ref().expect("initialized arm");
        let m = metrics(&state.z, &state.x).unwrap_or_default();
        let mut row = TraceRow::new(state.iteration, state.queries, m);
        row.accepted = accepted;
        row.epsilon = Some(state.epsilon);
        row.delta = Some(state.delta);
        row.ratio = Some(self.ratio.value());
        row.success = m.mse <= self.config.success_mse && !self.succeeded();
        self.trace.push(row);
    }

    /// Runs one boundary step; `Ok(false)` once the shared budget is gone.
    fn step(&mut self) -> Result<bool> {
        let state = self.state.as_mut().expect("initialized arm");
        match boundary_step(state, &self.config, self.oracle.as_mut(), &mut self.rng) {
            Ok(step) => {
                self.record(Some(step.accepted));
                Ok(true)
            }
            Err(e) if e.is_budget_exhausted() => {
                let state = self.state.as_mut().expect("initialized arm");
                if state.queries > self.trace.total_queries() {
                    state.iteration += 1;
                    self.record(Some(false));
                }
                Ok(false)
            }
            Err(e) => Err(e),
        }
    }
}

/// Runs successive halving with one oracle per arm, all drawing from
/// `budget`. `oracle_factory(arm, budget)` must return a fresh oracle whose
/// queries are charged to `budget`.
///
/// Arm `i` uses the ChaCha8 stream `i` of `seed`.
pub fn run_hyperband<F>(
    config: &HyperbandConfig,
    mut oracle_factory: F,
    x: &ImageTensor,
    seed: u64,
) -> Result<HyperbandResult>
where
    F: FnMut(usize, &QueryBudget) -> Result<Box<dyn Oracle>>,
{
    config.validate()?;
    let budget = QueryBudget::new(config.total_queries);
    let mut arms = Vec::new();
    for (i, ratio) in config.arm_ratios().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let arm_config = BoundaryConfig {
            variant: BoundaryVariant::LowFreq { ratio },
            max_queries: config.total_queries,
            ..config.boundary.clone()
        };
        arms.push(Arm {
            ratio,
            config: arm_config,
            oracle: oracle_factory(i, &budget)?,
            rng,
            state: None,
            trace: AttackTrace::new(x.clone()),
            alive: true,
            pruned_after: None,
            init_error: None,
        });
    }

    let mut exhausted = false;
    for arm in arms.iter_mut() {
        match init_boundary(&arm.config, arm.oracle.as_mut(), x, &mut arm.rng) {
            Ok(state) => {
                arm.state = Some(state);
                arm.record(None);
            }
            Err(e) if e.is_budget_exhausted() => {
                exhausted = true;
                arm.alive = false;
                arm.init_error = Some(e.to_string());
            }
            Err(e @ Error::InitFailed(_)) => {
                arm.alive = false;
                arm.init_error = Some(e.to_string());
            }
            Err(e) => return Err(e),
        }
    }
    if arms.iter().all(|a| a.state.is_none()) {
        return Err(Error::InitFailed(config.boundary.init_tries));
    }

    let stop_at_success = config.boundary.stop_at_success;
    let mut schedule = Vec::new();
    let mut round = 0;
    let mut done = exhausted || (stop_at_success && arms.iter().any(Arm::succeeded));
    while !done {
        let alive: Vec<usize> = (0..arms.len()).filter(|&i| arms[i].alive).collect();
        let last_arm = alive.len() == 1;
        let iterations = if last_arm { usize::MAX } else { config.round_length };
        let mut it = 0;
        while it < iterations && !done {
            for &i in &alive {
                if !arms[i].step()? {
                    done = true;
                    break;
                }
                if stop_at_success && arms[i].succeeded() {
                    done = true;
                    break;
                }
            }
            it += 1;
        }
        if done || last_arm {
            break;
        }
        round += 1;
        let mut order = alive.clone();
        order.sort_by(|&a, &b| {
            arms[a]
                .score()
                .total_cmp(&arms[b].score())
                .then(arms[a].ratio.value().total_cmp(&arms[b].ratio.value()))
                .then(a.cmp(&b))
        });
        let keep = order.len().div_ceil(2);
        for (rank, &i) in order.iter().enumerate() {
            let pruned = rank >= keep;
            schedule.push(ScheduleEntry {
                round,
                arm: i,
                ratio: arms[i].ratio.value(),
                score: arms[i].score(),
                pruned,
            });
            if pruned {
                arms[i].alive = false;
                arms[i].pruned_after = Some(round);
            }
        }
        schedule.sort_by_key(|e| (e.round, e.arm));
    }

    let winner = (0..arms.len())
        .filter(|&i| arms[i].state.is_some())
        .min_by(|&a, &b| {
            let key = |i: usize| (!arms[i].alive, !arms[i].succeeded());
            key(a)
                .cmp(&key(b))
                .then(arms[a].score().total_cmp(&arms[b].score()))
                .then(arms[a].ratio.value().total_cmp(&arms[b].ratio.value()))
                .then(a.cmp(&b))
        })
        .expect("at least one initialized arm");
    let arms = arms
        .into_iter()
        .map(|mut arm| {
            if let Some(state) = arm.state.take() {
                arm.trace.final_image = state.z;
            }
            ArmResult {
                ratio: arm.ratio,
                queries: arm.oracle.query_count(),
                trace: arm.trace,
                pruned_after: arm.pruned_after,
                init_error: arm.init_error,
            }
        })
        .collect();
    Ok(HyperbandResult {
        winner,
        arms,
        schedule,
        total_queries: budget.used(),
    })
}

pub fn write_schedule_csv<W: std::io::Write>(schedule: &[ScheduleEntry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "arm", "ratio", "score", "pruned_flag"])
        .map_err(crate::trace::csv_err)?;
    for e in schedule {
        w.write_record([
            e.round.to_string(),
            e.arm.to_string(),
            e.ratio.to_string(),
            e.score.to_string(),
            (e.pruned as u8).to_string(),
        ])
        .map_err(crate::trace::csv_err)?;
    }
    w.flush()?;
    Ok(())
}
