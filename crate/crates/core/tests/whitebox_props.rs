mod common;

use lowfreq::frequency::project_gradient;
use lowfreq::whitebox::{lf_gradient_descent, objective_and_grad, CwConfig};
use lowfreq::FreqRatio;
use rand::Rng;

/// Relative error of the analytic coefficient gradient against central
/// differences of the objective, over 20 random coordinates.
pub fn finite_difference_error(ratio: FreqRatio, seed: u64) -> f64 {
    let target = common::gray_mlp2();
    let model = target.classifier().unwrap();
    let img = lowfreq::harness::synthetic_images(target, 1, seed).unwrap().remove(0);
    let shape = img.image.shape();
    let config = CwConfig { ratio, ..CwConfig::default() };
    let k = ratio.cutoff(shape.side);
    let mut rng = common::rng(seed);
    let v: Vec<f64> = (0..shape.channels * k * k).map(|_| rng.random_range(-0.02..0.02)).collect();
    let (_, grad) = objective_and_grad(model.as_ref(), &img.image, img.label, &v, &config).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let i = rng.random_range(0..v.len());
        let mut plus = v.clone();
        plus[i] += h;
        let mut minus = v.clone();
        minus[i] -= h;
        let fp = objective_and_grad(model.as_ref(), &img.image, img.label, &plus, &config).unwrap().0;
        let fm = objective_and_grad(model.as_ref(), &img.image, img.label, &minus, &config).unwrap().0;
        let fd = (fp - fm) / (2.0 * h);
        let err = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

#[test]
fn chain_rule_matches_finite_differences() {
    for (r, seed) in [(1.0, 1), (0.5, 2), (0.25, 3), (1.0 / 7.0, 4)] {
        let err = finite_difference_error(FreqRatio::new(r).unwrap(), seed);
        assert!(err < 1e-3, "ratio {r}: relative error {err}");
    }
}

#[test]
fn perturbation_is_a_projection_fixed_point() {
    let target = common::gray_mlp2();
    let model = target.classifier().unwrap();
    let img = lowfreq::harness::synthetic_images(target, 1, 5).unwrap().remove(0);
    for r in [0.5, 0.25] {
        let ratio = FreqRatio::new(r).unwrap();
        let config = CwConfig { ratio, steps: 50, ..CwConfig::default() };
        let res = lf_gradient_descent(model.as_ref(), &img.image, img.label, &config).unwrap();
        let p = project_gradient(&res.perturbation, ratio);
        let diff = p.sub(&res.perturbation).unwrap().linf_norm();
        assert!(diff <= 1e-6, "{diff}");
    }
}

/// Mean MSE over a few images shrinks as lambda grows.
#[test]
fn larger_lambda_gives_smaller_perturbations() {
    let target = common::gray_mlp2();
    let model = target.classifier().unwrap();
    let images = lowfreq::harness::synthetic_images(target, 6, 6).unwrap();
    let mean_mse = |lambda: f64| {
        let config = CwConfig { lambda, steps: 150, ..CwConfig::default() };
        images
            .iter()
            .map(|i| lf_gradient_descent(model.as_ref(), &i.image, i.label, &config).unwrap().mse)
            .sum::<f64>()
            / images.len() as f64
    };
    let ladder: Vec<f64> = [300.0, 3000.0, 30000.0].iter().map(|&l| mean_mse(l)).collect();
    assert!(ladder[0] > ladder[1] && ladder[1] > ladder[2], "{ladder:?}");
}
