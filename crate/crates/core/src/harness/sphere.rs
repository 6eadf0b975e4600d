//! Success rate of random low-frequency spherical noise.
//!
//! For every image, ratio and sample index one unit direction is drawn in
//! the low-frequency subspace and reused across all radii, so the rates at
//! different radii are compared on the same directions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::frequency::{sample_sphere_low_freq, FreqRatio};
use crate::tensorimg::ImageTensor;

use super::{run_jobs, run_seed, AttackImage};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SphereRow {
    pub ratio: f64,
    pub radius: f64,
    /// `radius / sqrt(n)` for `n` elements.
    pub rmse: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SphereAuc {
    pub ratio: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SphereSweepResult {
    pub rows: Vec<SphereRow>,
    pub auc: Vec<SphereAuc>,
}

/// Trapezoid rule over `(x, y)` pairs in the given order.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// Fraction of `samples` perturbations `x + radius * u` that change the
/// label given by `predict`, per (ratio, radius), averaged over images.
/// Radius 0 is never counted as a flip.
#[allow(clippy::too_many_arguments)]
pub fn sphere_sweep<P>(
    predict: P,
    images: &[AttackImage],
    radii: &[f64],
    ratios: &[FreqRatio],
    samples: usize,
    clip: bool,
    seed: u64,
    workers: usize,
) -> Result<SphereSweepResult>
where
    P: Fn(&ImageTensor) -> Result<usize> + Sync + Send,
{
    if samples < 100 {
        return Err(Error::InvalidArgument(format!("sphere sweep needs at least 100 samples, got {samples}")));
    }
    if images.is_empty() || radii.is_empty() || ratios.is_empty() {
        return Err(Error::InvalidArgument("sphere sweep needs images, radii and ratios".into()));
    }
    if radii.iter().any(|r| !(*r >= 0.0 && r.is_finite())) || radii.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("radii must be finite, non-negative and increasing".into()));
    }
    let n_elems = images[0].image.shape().len() as f64;
    let jobs = ratios.len() * images.len();
    // flips[ratio][radius] summed over the images of one job
    let counts = run_jobs(workers, jobs, |job| -> Result<Vec<usize>> {
        let (ri, ii) = (job / images.len(), job % images.len());
        let img = &images[ii];
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed(seed, img.index, 0, ri));
        let mut flips = vec![0usize; radii.len()];
        for _ in 0..samples {
            let u = sample_sphere_low_freq(&mut rng, img.image.shape(), ratios[ri], 1.0)?;
            for (k, &rho) in radii.iter().enumerate() {
                if rho == 0.0 {
                    continue;
                }
                let mut probe = img.image.add_scaled(&u, rho)?;
                if clip {
                    probe = probe.clip()?;
                }
                if predict(&probe)? != img.label {
                    flips[k] += 1;
                }
            }
        }
        Ok(flips)
    })?;
    let mut rows = Vec::with_capacity(ratios.len() * radii.len());
    let mut auc = Vec::with_capacity(ratios.len());
    for (ri, ratio) in ratios.iter().enumerate() {
        let mut totals = vec![0usize; radii.len()];
        for ii in 0..images.len() {
            let flips = counts[ri * images.len() + ii].as_ref().map_err(clone_err)?;
            for (t, f) in totals.iter_mut().zip(flips) {
                *t += f;
            }
        }
        let denom = (samples * images.len()) as f64;
        let rates: Vec<f64> = totals.iter().map(|&t| t as f64 / denom).collect();
        for (&radius, &rate) in radii.iter().zip(&rates) {
            rows.push(SphereRow { ratio: ratio.value(), radius, rmse: radius / n_elems.sqrt(), success_rate: rate });
        }
        auc.push(SphereAuc { ratio: ratio.value(), auc: trapezoid(radii, &rates) });
    }
    Ok(SphereSweepResult { rows, auc })
}

fn clone_err(e: &Error) -> Error {
    Error::InvalidArgument(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::model::{Classifier, LinearModel, ToyModel};
    use crate::tensorimg::Shape;

    #[test]
    fn trapezoid_matches_hand_sum() {
        assert_eq!(trapezoid(&[0.0, 1.0, 3.0], &[0.0, 1.0, 1.0]), 0.5 + 2.0);
        assert_eq!(trapezoid(&[2.0], &[5.0]), 0.0);
    }

    /// Two classes on a 3x1x1 image with logits `(w.x, -w.x)`, so the
    /// margin at the test image is `m = w.x`. A uniform direction `u` on the 2-sphere has
    /// `w.u / |w|` uniform on `[-1, 1]`, so a flip at radius `rho` has
    /// probability `(1 - m / (|w| rho)) / 2` once `rho >= m / |w|`.
    #[test]
    fn linear_flip_rate_matches_closed_form() {
        let shape = Shape::new(3, 1).unwrap();
        let w = [1.0, -2.0, 2.0]; // |w| = 3
        let weights = [w.to_vec(), w.iter().map(|v| -v).collect()].concat();
        let model = ToyModel::Linear(LinearModel::new(shape, 2, weights, vec![0.0, 0.0]).unwrap());
        let x = ImageTensor::new(3, 1, vec![0.5, 0.2, 0.4]).unwrap();
        let margin = 0.9;
        assert_eq!(model.predict(&x).unwrap(), 0);
        let images = [AttackImage { index: 0, image: x, label: 0 }];
        let radii = [0.0, 0.2, 0.3, 0.5, 1.0, 3.0];
        let samples = 20_000;
        let res = sphere_sweep(
            |img: &ImageTensor| model.predict(img),
            &images,
            &radii,
            &[FreqRatio::FULL],
            samples,
            false,
            11,
            1,
        )
        .unwrap();
        for row in &res.rows {
            let t = margin / (3.0 * row.radius);
            let expected = if row.radius == 0.0 || t >= 1.0 { 0.0 } else { 0.5 * (1.0 - t) };
            let se = (expected * (1.0 - expected) / samples as f64).sqrt().max(1e-9);
            assert!((row.success_rate - expected).abs() <= 4.0 * se, "{row:?} vs {expected}");
        }
        let rates: Vec<f64> = res.rows.iter().map(|r| r.success_rate).collect();
        assert!(rates.windows(2).all(|w| w[0] <= w[1]));
        assert!((res.auc[0].auc - trapezoid(&radii, &rates)).abs() < 1e-15);
    }
}
