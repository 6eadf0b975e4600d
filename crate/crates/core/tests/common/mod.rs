//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use lowfreq::harness::config::{DatasetPreset, ModelKind, ModelSpec};
use lowfreq::harness::Target;
use lowfreq::oracle::model::LinearModel;
use lowfreq::oracle::{AttackGoal, DefenseTransform, ModelOracle, QueryBudget, ToyModel};
use lowfreq::{ImageTensor, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn build(kind: ModelKind, dataset: DatasetPreset) -> Target {
    Target::build(&ModelSpec::toy(kind, dataset), DefenseTransform::Identity).expect("toy model trains")
}

/// The default 32x32 RGB two-layer model, trained once per test binary.
pub fn rgb_mlp2() -> &'static Target {
    static CELL: OnceLock<Target> = OnceLock::new();
    CELL.get_or_init(|| build(ModelKind::Mlp2, DatasetPreset::Rgb32))
}

/// The default 28x28 grayscale two-layer model.
pub fn gray_mlp2() -> &'static Target {
    static CELL: OnceLock<Target> = OnceLock::new();
    CELL.get_or_init(|| build(ModelKind::Mlp2, DatasetPreset::Gray28))
}

/// Same model behind another defense.
pub fn with_defense(target: &Target, defense: DefenseTransform) -> Target {
    Target { defense, ..target.clone() }
}

/// Two classes on a 1x2x2 image; class 0 iff `w.x + b > 0` with `w` acting
/// on the first two pixels only. Returns the model and `(w, b)`.
pub fn halfspace(w: [f64; 2], b: f64) -> (Arc<ToyModel>, [f64; 4], f64) {
    let shape = Shape::new(1, 2).unwrap();
    let w4 = [w[0], w[1], 0.0, 0.0];
    let half: Vec<f64> = w4.iter().map(|v| 0.5 * v).collect();
    let weights = [half.clone(), half.iter().map(|v| -v).collect()].concat();
    let model = LinearModel::new(shape, 2, weights, vec![0.5 * b, -0.5 * b]).unwrap();
    (Arc::new(ToyModel::Linear(model)), w4, b)
}

pub fn halfspace_oracle(model: &Arc<ToyModel>, budget: QueryBudget) -> ModelOracle {
    ModelOracle::new(model.clone(), AttackGoal::Untargeted { label: 0 }, budget).unwrap()
}

pub fn random_image(rng: &mut ChaCha8Rng, shape: Shape) -> ImageTensor {
    ImageTensor::from_shape(shape, (0..shape.len()).map(|_| rng.random::<f64>()).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mean and standard error of a sample.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Proptest settings without on-disk regression files.
pub fn proptest_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config { cases, failure_persistence: None, ..Default::default() }
}
