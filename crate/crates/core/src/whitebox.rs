//! White-box margin-loss attack with the perturbation restricted to the
//! low-frequency DCT block.
//!
//! The perturbation is parameterised directly by its `k x k` block of
//! coefficients `v` per channel. Since the inverse DCT is orthonormal, the
//! gradient with respect to `v` is the truncated forward DCT of the pixel
//! gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequency::{plan, FreqRatio};
use crate::oracle::model::{argmax, Classifier, LogitLoss};
use crate::tensorimg::{metrics, ImageTensor};

/// `max(Z_y - max_{y' != y} Z_{y'} + kappa, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginLoss {
    pub label: usize,
    pub kappa: f64,
}

impl MarginLoss {
    fn runner_up(&self, logits: &[f64]) -> usize {
        let mut best = None;
        for (i, &z) in logits.iter().enumerate() {
            if i != self.label && best.is_none_or(|b: usize| z > logits[b]) {
                best = Some(i);
            }
        }
        best.expect("at least two classes")
    }
}

impl LogitLoss for MarginLoss {
    fn value_and_grad(&self, logits: &[f64]) -> (f64, Vec<f64>) {
        let other = self.runner_up(logits);
        let raw = logits[self.label] - logits[other] + self.kappa;
        let mut grad = vec![0.0; logits.len()];
        if raw > 0.0 {
            grad[self.label] = 1.0;
            grad[other] = -1.0;
        }
        (raw.max(0.0), grad)
    }
}

pub fn margin_loss(logits: &[f64], label: usize, kappa: f64) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument("margin loss needs at least two classes".into()));
    }
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!("label {label} out of range for {} classes", logits.len())));
    }
    Ok(MarginLoss { label, kappa }.value_and_grad(logits).0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CwConfig {
    /// Weight of the MSE term.
    pub lambda: f64,
    pub ratio: FreqRatio,
    pub steps: usize,
    pub learning_rate: f64,
    pub kappa: f64,
}

impl Default for CwConfig {
    fn default() -> Self {
        Self {
            lambda: 1000.0,
            ratio: FreqRatio::FULL,
            steps: 300,
            learning_rate: 0.005,
            kappa: 0.01,
        }
    }
}

impl CwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) || self.steps == 0 {
            return Err(Error::InvalidArgument("lambda and steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be positive and kappa non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhiteboxResult {
    pub adversarial: ImageTensor,
    /// Low-frequency perturbation before the pixel-range clip.
    pub perturbation: ImageTensor,
    pub success: bool,
    pub steps: usize,
    pub mse: f64,
    /// Objective value per step.
    pub objective: Vec<f64>,
}

/// Objective value and gradient with respect to the coefficient block `v`.
pub fn objective_and_grad(
    model: &dyn Classifier,
    x: &ImageTensor,
    label: usize,
    v: &[f64],
    config: &CwConfig,
) -> Result<(f64, Vec<f64>)> {
    let shape = x.shape();
    let k = config.ratio.cutoff(shape.side);
    let p = plan(shape.side);
    let delta = p.idct2_low(shape, k, v);
    let raw = x.add(&delta)?;
    let realized = raw.clip_unchecked();
    let loss = MarginLoss { label, kappa: config.kappa };
    let (margin, mut grad) = model.loss_gradient(&realized, &loss)?;
    let n = shape.len() as f64;
    let mut mse = 0.0;
    for ((g, r), xi) in grad.as_mut_slice().iter_mut().zip(realized.as_slice()).zip(x.as_slice()) {
        mse += (r - xi) * (r - xi) / n;
        *g += config.lambda * 2.0 * (r - xi) / n;
    }
    // clipped coordinates do not respond to the perturbation
    for (g, r) in grad.as_mut_slice().iter_mut().zip(raw.as_slice()) {
        if !(0.0..=1.0).contains(r) {
            *g = 0.0;
        }
    }
    Ok((margin + config.lambda * mse, p.dct2(&grad).low_block(k)))
}

/// Plain gradient descent on `margin + lambda * mse` over the coefficient
/// block. Stops at the first iterate with zero margin loss.
pub fn lf_gradient_descent(
    model: &dyn Classifier,
    x: &ImageTensor,
    label: usize,
    config: &CwConfig,
) -> Result<WhiteboxResult> {
    config.validate()?;
    let shape = x.shape();
    let k = config.ratio.cutoff(shape.side);
    let p = plan(shape.side);
    let loss = MarginLoss { label, kappa: config.kappa };
    let mut v = vec![0.0; shape.channels * k * k];
    let mut objective = Vec::with_capacity(config.steps);
    let mut steps = 0;
    let mut success = false;
    loop {
        let realized = x.add(&p.idct2_low(shape, k, &v))?.clip_unchecked();
        let logits = model.logits(&realized)?;
        if loss.value_and_grad(&logits).0 == 0.0 && argmax(&logits) != label {
            success = true;
            break;
        }
        if steps == config.steps {
            break;
        }
        let (value, grad) = objective_and_grad(model, x, label, &v, config)?;
        objective.push(value);
        for (vi, gi) in v.iter_mut().zip(&grad) {
            *vi -= config.learning_rate * gi;
        }
        steps += 1;
    }
    let perturbation = p.idct2_low(shape, k, &v);
    let adversarial = x.add(&perturbation)?.clip_unchecked();
    let mse = metrics(&adversarial, x)?.mse;
    Ok(WhiteboxResult { adversarial, perturbation, success, steps, mse, objective })
}

/// One row of the ratio sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub ratio: f64,
    /// `channels * k^2`
    pub effective_dimension: usize,
    /// Mean MSE over successful attacks; NaN when none succeeded.
    pub mean_mse: f64,
    pub success_rate: f64,
}

/// Runs the attack at every ratio on every `(image, label)` pair.
pub fn whitebox_sweep(
    model: &dyn Classifier,
    images: &[(ImageTensor, usize)],
    ratios: &[FreqRatio],
    config: &CwConfig,
) -> Result<Vec<SweepRow>> {
    let shape = model.input_shape();
    ratios
        .iter()
        .map(|&ratio| {
            let cfg = CwConfig { ratio, ..config.clone() };
            let mut successes = 0usize;
            let mut mse_sum = 0.0;
            for (img, label) in images {
                let res = lf_gradient_descent(model, img, *label, &cfg)?;
                if res.success {
                    successes += 1;
                    mse_sum += res.mse;
                }
            }
            let k = ratio.cutoff(shape.side);
            Ok(SweepRow {
                ratio: ratio.value(),
                effective_dimension: shape.channels * k * k,
                mean_mse: if successes > 0 { mse_sum / successes as f64 } else { f64::NAN },
                success_rate: successes as f64 / images.len().max(1) as f64,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(crate::trace::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frequency::dct2;
    use crate::oracle::model::{Mlp2Model, ToyModel};
    use crate::tensorimg::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn margin_examples() {
        assert_eq!(margin_loss(&[2.0, 5.0], 0, 0.0).unwrap(), 0.0);
        assert_eq!(margin_loss(&[5.0, 2.0], 0, 1.0).unwrap(), 4.0);
        assert_eq!(margin_loss(&[3.0, 3.0], 0, 0.0).unwrap(), 0.0);
        assert!(margin_loss(&[3.0, 3.0], 2, 0.0).is_err());
        assert!(margin_loss(&[3.0], 0, 0.0).is_err());
    }

    fn model(rng: &mut ChaCha8Rng, shape: Shape) -> ToyModel {
        let n = shape.len();
        let hidden = 6;
        let mut draw = |len: usize, s: f64| (0..len).map(|_| s * (rng.random::<f64>() * 2.0 - 1.0)).collect::<Vec<_>>();
        let (w1, b1, w2, b2) = (draw(hidden * n, 0.5), draw(hidden, 0.2), draw(3 * hidden, 1.0), draw(3, 0.2));
        ToyModel::Mlp2(Mlp2Model::new(shape, 3, hidden, w1, b1, w2, b2).unwrap())
    }

    #[test]
    fn full_ratio_gradient_is_pixel_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = Shape::new(3, 8).unwrap();
        let m = model(&mut rng, shape);
        let x = ImageTensor::from_shape(shape, (0..shape.len()).map(|_| rng.random_range(0.2..0.8)).collect()).unwrap();
        let label = m.predict(&x).unwrap();
        let config = CwConfig { lambda: 3.0, ..CwConfig::default() };
        let v: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(-0.05..0.05)).collect();
        let (_, gv) = objective_and_grad(&m, &x, label, &v, &config).unwrap();
        // pixel gradient of the same objective, computed directly
        let delta = crate::frequency::idct2(&crate::frequency::FreqCoeffs::new(shape, v.clone()).unwrap());
        let xp = x.add(&delta).unwrap();
        let (_, mut g) = m.loss_gradient(&xp, &MarginLoss { label, kappa: config.kappa }).unwrap();
        for ((gi, a), b) in g.as_mut_slice().iter_mut().zip(xp.as_slice()).zip(x.as_slice()) {
            *gi += 2.0 * config.lambda * (a - b) / shape.len() as f64;
        }
        let expected = dct2(&g);
        for (a, b) in gv.iter().zip(expected.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn perturbation_stays_in_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = Shape::new(1, 8).unwrap();
        let m = model(&mut rng, shape);
        let x = ImageTensor::filled(shape, 0.5);
        let label = m.predict(&x).unwrap();
        let ratio = FreqRatio::new(0.25).unwrap();
        let config = CwConfig { ratio, steps: 20, learning_rate: 0.05, ..CwConfig::default() };
        let res = lf_gradient_descent(&m, &x, label, &config).unwrap();
        assert!(dct2(&res.perturbation).max_outside_block(2) < 1e-9);
    }
}
