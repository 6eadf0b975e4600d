//! Decision-based boundary attack with a pluggable noise source.
//!
//! The iterate `z` always sits on the adversarial side of the decision
//! boundary. Each step proposes a random move on the sphere around the
//! original image `x`, contracts it towards `x` and keeps it only if it is
//! still adversarial.
//!
//! * [`BoundaryVariant::Rgb`] draws Gaussian pixel noise and spends up to two
//!   queries per step (one after the sphere move, one after contraction).
//!   Both step sizes adapt.
//! * [`BoundaryVariant::LowFreq`] draws noise from the low-frequency DCT
//!   block, contracts right away and spends exactly one query per step.
//!   Only the contraction size adapts.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequency::{sample_low_freq, FreqRatio, NoiseDist};
use crate::oracle::Oracle;
use crate::tensorimg::{metrics, ImageTensor};
use crate::trace::{AttackTrace, TraceRow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundaryVariant {
    Rgb,
    #[serde(rename = "lf")]
    LowFreq { ratio: FreqRatio },
}

impl BoundaryVariant {
    pub fn ratio(&self) -> Option<FreqRatio> {
        match *self {
            BoundaryVariant::Rgb => None,
            BoundaryVariant::LowFreq { ratio } => Some(ratio),
        }
    }

    /// Unit-scale perturbation direction, before rescaling.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R, like: &ImageTensor) -> ImageTensor {
        match *self {
            BoundaryVariant::Rgb => {
                let data = (0..like.shape().len())
                    .map(|_| Distribution::<f64>::sample(&StandardNormal, rng))
                    .collect();
                ImageTensor::from_raw(like.shape(), data)
            }
            BoundaryVariant::LowFreq { ratio } => {
                sample_low_freq(rng, like.shape(), ratio, NoiseDist::Gaussian { sigma: 1.0 })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryConfig {
    pub variant: BoundaryVariant,
    /// Size of the sphere move relative to the current distance.
    pub delta: f64,
    pub epsilon_init: f64,
    pub max_queries: u64,
    pub success_mse: f64,
    /// Number of recorded outcomes between step-size updates.
    pub window: usize,
    pub raise_above: f64,
    pub lower_below: f64,
    pub adapt_factor: f64,
    pub epsilon_bounds: [f64; 2],
    /// Bounds for the adaptive RGB sphere step.
    pub delta_bounds: [f64; 2],
    pub init_tries: usize,
    pub bisection_steps: usize,
    pub stop_at_success: bool,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self::low_freq(FreqRatio::new(0.25).expect("valid ratio"))
    }
}

impl BoundaryConfig {
    pub fn rgb() -> Self {
        Self {
            variant: BoundaryVariant::Rgb,
            delta: 0.05,
            ..Self::low_freq(FreqRatio::FULL)
        }
    }

    pub fn low_freq(ratio: FreqRatio) -> Self {
        Self {
            variant: BoundaryVariant::LowFreq { ratio },
            delta: 0.2,
            epsilon_init: 0.01,
            max_queries: 5000,
            success_mse: 0.001,
            window: 30,
            raise_above: 0.5,
            lower_below: 0.2,
            adapt_factor: 1.5,
            epsilon_bounds: [1e-7, 0.5],
            delta_bounds: [1e-3, 1.0],
            init_tries: 100,
            bisection_steps: 10,
            stop_at_success: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.delta) || !positive(self.epsilon_init) || !positive(self.success_mse) {
            return Err(Error::InvalidArgument("delta, epsilon_init and success_mse must be positive".into()));
        }
        if self.window == 0 || self.init_tries == 0 {
            return Err(Error::InvalidArgument("window and init_tries must be at least 1".into()));
        }
        if !(self.lower_below <= self.raise_above) || !(self.adapt_factor >= 1.0) {
            return Err(Error::InvalidArgument("adaptation thresholds or factor out of order".into()));
        }
        for [lo, hi] in [self.epsilon_bounds, self.delta_bounds] {
            if !(positive(lo) && lo <= hi) {
                return Err(Error::InvalidArgument("step-size bounds must be positive and ordered".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryState {
    pub z: ImageTensor,
    pub x: ImageTensor,
    pub epsilon: f64,
    pub delta: f64,
    /// Outcomes driving `epsilon`: per-step acceptance for the lf variant,
    /// contraction success after an adversarial sphere move for rgb.
    pub contraction_window: Vec<bool>,
    /// Sphere-move outcomes driving `delta` (rgb only).
    pub sphere_window: Vec<bool>,
    pub queries: u64,
    pub iteration: usize,
}

impl BoundaryState {
    pub fn distance(&self) -> f64 {
        self.z.sub(&self.x).map(|d| d.l2_norm()).unwrap_or(f64::NAN)
    }
}

/// Outcome of a single step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub accepted: bool,
    pub queries: u64,
    /// Distance of the sphere candidate to `x` after projection, before clip.
    pub projected_radius: f64,
    pub radius: f64,
}

/// Random adversarial start followed by bisection towards `x`.
pub fn init_boundary<O: Oracle + ?Sized, R: Rng + ?Sized>(
    config: &BoundaryConfig,
    oracle: &mut O,
    x: &ImageTensor,
    rng: &mut R,
) -> Result<BoundaryState> {
    config.validate()?;
    let start = oracle.query_count();
    let mut found = None;
    for _ in 0..config.init_tries {
        let candidate = ImageTensor::from_raw(x.shape(), (0..x.shape().len()).map(|_| rng.random()).collect());
        if oracle.decide(&candidate)? {
            found = Some(candidate);
            break;
        }
    }
    let mut adv = found.ok_or(Error::InitFailed(config.init_tries))?;
    let mut clean = x.clone();
    for _ in 0..config.bisection_steps {
        let mid = adv.zip_with(&clean, |a, c| 0.5 * (a + c))?;
        if oracle.decide(&mid)? {
            adv = mid;
        } else {
            clean = mid;
        }
    }
    Ok(BoundaryState {
        z: adv,
        x: x.clone(),
        epsilon: config.epsilon_init,
        delta: config.delta,
        contraction_window: Vec::with_capacity(config.window),
        sphere_window: Vec::with_capacity(config.window),
        queries: oracle.query_count() - start,
        iteration: 0,
    })
}

/// Rescales `candidate` so that it lies at distance `radius` from `x`.
pub fn project_to_sphere(candidate: &ImageTensor, x: &ImageTensor, radius: f64) -> Result<ImageTensor> {
    let diff = candidate.sub(x)?;
    let norm = diff.l2_norm();
    if norm == 0.0 {
        return Ok(candidate.clone());
    }
    x.add_scaled(&diff, radius / norm)
}

/// One propose-contract-query step. Budget exhaustion mid-step leaves the
/// iterate untouched; the queries already spent are reflected in
/// `state.queries`.
pub fn boundary_step<O: Oracle + ?Sized, R: Rng + ?Sized>(
    state: &mut BoundaryState,
    config: &BoundaryConfig,
    oracle: &mut O,
    rng: &mut R,
) -> Result<StepRecord> {
    let radius = state.distance();
    let noise = config.variant.sample_noise(rng, &state.z);
    let noise_norm = noise.l2_norm();
    let scale = if noise_norm > 0.0 { state.delta * radius / noise_norm } else { 0.0 };
    let moved = state.z.add_scaled(&noise, scale)?;
    let projected = project_to_sphere(&moved, &state.x, radius)?;
    let projected_radius = projected.sub(&state.x)?.l2_norm();
    let on_sphere = projected.clip_unchecked();
    let contracted = state
        .x
        .zip_with(&on_sphere, |x, z| x + (1.0 - state.epsilon) * (z - x))?
        .clip_unchecked();

    let before = oracle.query_count();
    let outcome = match config.variant {
        BoundaryVariant::LowFreq { .. } => {
            let ok = oracle.decide(&contracted);
            state.queries += oracle.query_count() - before;
            let ok = ok?;
            state.contraction_window.push(ok);
            if ok {
                state.z = contracted;
            }
            ok
        }
        BoundaryVariant::Rgb => {
            let sphere_ok = oracle.decide(&on_sphere);
            state.queries += oracle.query_count() - before;
            let sphere_ok = sphere_ok?;
            state.sphere_window.push(sphere_ok);
            if sphere_ok {
                let mid = oracle.query_count();
                let ok = oracle.decide(&contracted);
                state.queries += oracle.query_count() - mid;
                let ok = ok?;
                state.contraction_window.push(ok);
                // a failed contraction still leaves an adversarial sphere point
                state.z = if ok { contracted } else { on_sphere };
                ok
            } else {
                false
            }
        }
    };
    state.iteration += 1;
    adapt_steps(state, config);
    Ok(StepRecord {
        accepted: outcome,
        queries: oracle.query_count() - before,
        projected_radius,
        radius,
    })
}

/// Applies the window rule to each full window and clears it.
pub fn adapt_steps(state: &mut BoundaryState, config: &BoundaryConfig) {
    if let Some(eps) = adapt(&mut state.contraction_window, state.epsilon, config, config.epsilon_bounds) {
        state.epsilon = eps;
    }
    if matches!(config.variant, BoundaryVariant::Rgb) {
        if let Some(delta) = adapt(&mut state.sphere_window, state.delta, config, config.delta_bounds) {
            state.delta = delta;
        }
    }
}

fn adapt(window: &mut Vec<bool>, value: f64, config: &BoundaryConfig, bounds: [f64; 2]) -> Option<f64> {
    if window.len() < config.window {
        return None;
    }
    let rate = window.iter().filter(|&&a| a).count() as f64 / window.len() as f64;
    window.clear();
    let next = if rate > config.raise_above {
        value * config.adapt_factor
    } else if rate < config.lower_below {
        value / config.adapt_factor
    } else {
        value
    };
    Some(next.clamp(bounds[0], bounds[1]))
}

/// Runs the attack until success (when `stop_at_success`) or until
/// `max_queries` queries have been spent, counting initialization.
pub fn run_boundary<O: Oracle + ?Sized, R: Rng + ?Sized>(
    config: &BoundaryConfig,
    oracle: &mut O,
    x: &ImageTensor,
    rng: &mut R,
) -> Result<AttackTrace> {
    let start = oracle.query_count();
    let mut state = init_boundary(config, oracle, x, rng)?;
    let mut trace = AttackTrace::new(x.clone());
    let mut success = record(&mut trace, &state, config, None);
    while !(success && config.stop_at_success) && oracle.query_count() - start < config.max_queries {
        match boundary_step(&mut state, config, oracle, rng) {
            Ok(step) => success |= record(&mut trace, &state, config, Some(step.accepted)),
            Err(e) if e.is_budget_exhausted() => {
                if oracle.query_count() - start > trace.total_queries() {
                    state.iteration += 1;
                    record(&mut trace, &state, config, Some(false));
                }
                break;
            }
            Err(e) => return Err(e),
        }
    }
    trace.final_image = state.z;
    Ok(trace)
}

fn record(trace: &mut AttackTrace, state: &BoundaryState, config: &BoundaryConfig, accepted: Option<bool>) -> bool {
    let m = metrics(&state.z, &state.x).unwrap_or_default();
    let mut row = TraceRow::new(state.iteration, state.queries, m);
    row.accepted = accepted;
    row.epsilon = Some(state.epsilon);
    row.delta = Some(state.delta);
    row.ratio = config.variant.ratio().map(FreqRatio::value);
    row.success = m.mse <= config.success_mse && trace.first_success().is_none();
    let success = m.mse <= config.success_mse;
    trace.push(row);
    success
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::model::{LinearModel, ToyModel};
    use crate::oracle::{AttackGoal, ModelOracle, QueryBudget};
    use crate::tensorimg::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    /// Halfspace `p0 - p1 > 0.1` is class 0 on a 1x2x2 image.
    fn halfspace_oracle(budget: u64) -> ModelOracle {
        let shape = Shape::new(1, 2).unwrap();
        let w = vec![0.5, -0.5, 0.0, 0.0, -0.5, 0.5, 0.0, 0.0];
        let model = ToyModel::Linear(LinearModel::new(shape, 2, w, vec![-0.05, 0.05]).unwrap());
        ModelOracle::new(Arc::new(model), AttackGoal::Untargeted { label: 0 }, QueryBudget::new(budget)).unwrap()
    }

    fn x() -> ImageTensor {
        ImageTensor::new(1, 2, vec![0.8, 0.3, 0.5, 0.5]).unwrap()
    }

    #[test]
    fn adaptation_rules() {
        let config = BoundaryConfig::low_freq(FreqRatio::FULL);
        let mut state = BoundaryState {
            z: x(),
            x: x(),
            epsilon: 0.01,
            delta: 0.2,
            contraction_window: vec![true; 30],
            sphere_window: vec![],
            queries: 0,
            iteration: 0,
        };
        adapt_steps(&mut state, &config);
        assert!((state.epsilon - 0.015).abs() < 1e-15);
        assert!(state.contraction_window.is_empty());
        state.contraction_window = vec![false; 30];
        adapt_steps(&mut state, &config);
        assert!((state.epsilon - 0.01).abs() < 1e-15);
        state.contraction_window = (0..30).map(|i| i < 10 || i == 20).collect(); // 11/30
        adapt_steps(&mut state, &config);
        assert_eq!(state.epsilon, 0.01);
        assert_eq!(state.delta, 0.2);
        state.contraction_window = vec![true; 29];
        adapt_steps(&mut state, &config);
        assert_eq!(state.epsilon, 0.01);
    }

    #[test]
    fn init_bisects_towards_boundary() {
        let mut oracle = halfspace_oracle(1000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = BoundaryConfig::rgb();
        let state = init_boundary(&config, &mut oracle, &x(), &mut rng).unwrap();
        assert!(oracle.decide(&state.z).unwrap());
        // class-0 margin is f(u) = u0 - u1 - 0.1, so f(x) = 0.4 and the
        // perpendicular distance to the boundary is 0.4 / sqrt(2)
        let dist = state.distance();
        assert!(dist >= 0.4 / 2f64.sqrt() - 1e-12);
        // along the bisection line the boundary sits at s* = -f(x) / (w . u)
        let u = state.z.sub(&x()).unwrap().scaled(1.0 / dist);
        let slope = u.as_slice()[0] - u.as_slice()[1];
        let s_star = -0.4 / slope;
        // the start lies in the unit cube, at most 2 away from x
        assert!(dist >= s_star - 1e-12 && dist <= s_star + 2.0 / 1024.0 + 1e-12, "{dist} vs {s_star}");
        assert_eq!(state.queries, oracle.query_count() - 1);
    }

    #[test]
    fn zero_epsilon_keeps_radius() {
        let mut oracle = halfspace_oracle(100_000);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut config = BoundaryConfig::low_freq(FreqRatio::FULL);
        config.epsilon_init = 1e-300;
        config.epsilon_bounds = [1e-300, 1e-300];
        let mut state = init_boundary(&config, &mut oracle, &x(), &mut rng).unwrap();
        for _ in 0..50 {
            let before = state.distance();
            let step = boundary_step(&mut state, &config, &mut oracle, &mut rng).unwrap();
            assert!((step.projected_radius - step.radius).abs() <= 1e-6 * step.radius);
            if step.accepted {
                // clipping can only pull the point inward
                assert!(state.distance() <= before + 1e-12);
            }
        }
    }

    #[test]
    fn budget_zero_after_init_gives_init_row_only() {
        let mut probe = halfspace_oracle(10_000);
        let config = BoundaryConfig::low_freq(FreqRatio::FULL);
        let s = init_boundary(&config, &mut probe, &x(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut oracle = halfspace_oracle(s.queries);
        let trace = run_boundary(&config, &mut oracle, &x(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(trace.rows.len(), 1);
        assert_eq!(trace.total_queries(), oracle.query_count());
    }

    #[test]
    fn init_fails_when_nothing_is_adversarial() {
        let shape = Shape::new(1, 2).unwrap();
        let model = ToyModel::Linear(LinearModel::new(shape, 2, vec![0.0; 8], vec![1.0, 0.0]).unwrap());
        let mut oracle =
            ModelOracle::new(Arc::new(model), AttackGoal::Untargeted { label: 0 }, QueryBudget::unlimited()).unwrap();
        let err = run_boundary(&BoundaryConfig::rgb(), &mut oracle, &x(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::InitFailed(100))));
    }
}
