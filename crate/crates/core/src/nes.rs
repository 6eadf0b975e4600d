//! Loss-based black-box attack driven by natural-evolution-strategies
//! gradient estimates, inside an L-infinity ball around the original image.
//!
//! The search distribution is either isotropic Gaussian pixel noise or
//! Gaussian noise on the low-frequency DCT block.

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
pub enum NesVariant {
    Rgb,
    #[serde(rename = "lf")]
    LowFreq { ratio: FreqRatio },
}

impl NesVariant {
    pub fn ratio(&self) -> Option<FreqRatio> {
        match *self {
            NesVariant::Rgb => None,
            NesVariant::LowFreq { ratio } => Some(ratio),
        }
    }

    /// One draw from the search distribution with per-coefficient std `sigma`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, like: &ImageTensor, sigma: f64) -> ImageTensor {
        match *self {
            NesVariant::Rgb => {
                let data = (0..like.shape().len())
                    .map(|_| sigma * Distribution::<f64>::sample(&StandardNormal, rng))
                    .collect();
                ImageTensor::from_raw(like.shape(), data)
            }
            NesVariant::LowFreq { ratio } => sample_low_freq(rng, like.shape(), ratio, NoiseDist::Gaussian { sigma }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NesConfig {
    pub variant: NesVariant,
    /// L-infinity radius of the feasible set.
    pub rho: f64,
    pub sigma: f64,
    /// Loss queries per gradient estimate.
    pub batch: usize,
    pub learning_rate: f64,
    pub max_queries: u64,
    /// Aim at a chosen class rather than away from the true one. Must agree
    /// with the oracle's goal.
    pub targeted: bool,
    /// Draw noise in `(eta, -eta)` pairs.
    pub antithetic: bool,
}

impl Default for NesConfig {
    fn default() -> Self {
        Self::low_freq(FreqRatio::new(0.5).expect("valid ratio"))
    }
}

impl NesConfig {
    pub fn rgb() -> Self {
        Self {
            variant: NesVariant::Rgb,
            ..Self::low_freq(FreqRatio::FULL)
        }
    }

    pub fn low_freq(ratio: FreqRatio) -> Self {
        Self {
            variant: NesVariant::LowFreq { ratio },
            rho: 0.03,
            sigma: 0.001,
            batch: 50,
            learning_rate: 0.01,
            max_queries: 20_000,
            targeted: true,
            antithetic: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.rho) || !positive(self.sigma) || !positive(self.learning_rate) {
            return Err(Error::InvalidArgument("rho, sigma and learning_rate must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NesState {
    pub z: ImageTensor,
    pub x: ImageTensor,
    pub queries: u64,
    /// Mean of the sampled losses from the latest estimate.
    pub loss: f64,
}

impl NesState {
    pub fn new(x: &ImageTensor) -> Self {
        Self {
            z: x.clone(),
            x: x.clone(),
            queries: 0,
            loss: f64::NAN,
        }
    }
}

/// Score-function estimate `(1 / (m sigma^2)) sum_i loss(z + eta_i) eta_i`.
///
/// Spends exactly `config.batch` loss queries unless the budget runs out,
/// in which case the error propagates and `state.queries` still reflects
/// what was spent.
pub fn nes_gradient<O: Oracle + ?Sized, R: Rng + ?Sized>(
    state: &mut NesState,
    oracle: &mut O,
    rng: &mut R,
    config: &NesConfig,
) -> Result<ImageTensor> {
    let m = config.batch;
    let mut grad = ImageTensor::zeros(state.z.shape());
    let mut loss_sum = 0.0;
    let mut pending: Option<ImageTensor> = None;
    for _ in 0..m {
        let eta = match pending.take() {
            Some(mirror) => mirror,
            None => {
                let eta = config.variant.sample(rng, &state.z, config.sigma);
                if config.antithetic {
                    pending = Some(eta.scaled(-1.0));
                }
                eta
            }
        };
        let probe = state.z.add(&eta)?;
        let loss = oracle.loss(&probe)?;
        state.queries += 1;
        loss_sum += loss;
        grad = grad.add_scaled(&eta, loss)?;
    }
    state.loss = loss_sum / m as f64;
    Ok(grad.scaled(1.0 / (m as f64 * config.sigma * config.sigma)))
}

/// `z <- clip(x + clamp(z - lr g - x, -rho, rho))`.
pub fn nes_step(state: &mut NesState, gradient: &ImageTensor, config: &NesConfig) -> Result<()> {
    let rho = config.rho;
    let descended = state.z.add_scaled(gradient, -config.learning_rate)?;
    state.z = state
        .x
        .zip_with(&descended, |x, z| x + (z - x).clamp(-rho, rho))?
        .clip_unchecked();
    Ok(())
}

/// Descends the oracle's loss until its decision channel reports success
/// or `max_queries` is spent. Every iteration costs `batch` loss queries
/// plus one decision query.
///
/// `original_label` guards targeted runs against aiming at the class the
/// image already has.
pub fn run_nes<O: Oracle + ?Sized, R: Rng + ?Sized>(
    config: &NesConfig,
    oracle: &mut O,
    x: &ImageTensor,
    original_label: usize,
    rng: &mut R,
) -> Result<AttackTrace> {
    config.validate()?;
    let goal = oracle.goal();
    if goal.is_targeted() != config.targeted {
        return Err(Error::InvalidArgument("oracle goal and config disagree on targeting".into()));
    }
    if goal.is_targeted() && goal.label() == original_label {
        return Err(Error::InvalidArgument(format!("target {original_label} equals the original label")));
    }
    let start = oracle.query_count();
    let per_iteration = config.batch as u64 + 1;
    let mut state = NesState::new(x);
    let mut trace = AttackTrace::new(x.clone());
    let mut iteration = 0;
    loop {
        if oracle.query_count() - start + per_iteration > config.max_queries {
            break;
        }
        let outcome = nes_gradient(&mut state, oracle, rng, config)
            .and_then(|g| nes_step(&mut state, &g, config))
            .and_then(|()| {
                let before = oracle.query_count();
                let adv = oracle.decide(&state.z);
                state.queries += oracle.query_count() - before;
                adv
            });
        iteration += 1;
        match outcome {
            Ok(success) => {
                let m = metrics(&state.z, x)?;
                let mut row = TraceRow::new(iteration, state.queries, m);
                row.loss = Some(state.loss);
                row.ratio = config.variant.ratio().map(FreqRatio::value);
                row.success = success;
                trace.push(row);
                if success {
                    break;
                }
            }
            Err(e) if e.is_budget_exhausted() => {
                if state.queries > trace.total_queries() {
                    let mut row = TraceRow::new(iteration, state.queries, metrics(&state.z, x)?);
                    row.loss = Some(state.loss);
                    row.ratio = config.variant.ratio().map(FreqRatio::value);
                    trace.push(row);
                }
                break;
            }
            Err(e) => return Err(e),
        }
    }
    trace.final_image = state.z;
    Ok(trace)
}
