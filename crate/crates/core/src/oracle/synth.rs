//! Synthetic "Gaussian blob" image classes and a deterministic trainer for
//! the toy models.
//!
//! Each class owns a prototype: a flat background plus a few coloured
//! Gaussian bumps at class-specific positions. Samples jitter the bump
//! strength and add white pixel noise. Everything is derived from the dataset
//! seed, so a config fully determines both the data and the trained model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::model::{softmax, LinearModel, Mlp2Model, ToyKind, ToyModel};
use crate::tensorimg::{ImageTensor, Shape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub channels: usize,
    pub side: usize,
    pub classes: usize,
    pub blobs_per_class: usize,
    /// Range of blob widths (standard deviation, in pixels).
    pub blob_sigma: [f64; 2],
    /// Peak blob intensity above or below the background.
    pub amplitude: f64,
    pub background: f64,
    /// Relative per-sample scaling of the blob pattern, uniform in `1 +- jitter`.
    pub jitter: f64,
    /// Standard deviation of i.i.d. pixel noise added to each sample.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl BlobSpec {
    /// 28x28 grayscale preset.
    pub fn gray28(seed: u64) -> Self {
        Self {
            channels: 1,
            side: 28,
            classes: 10,
            blobs_per_class: 3,
            blob_sigma: [1.5, 3.0],
            amplitude: 0.3,
            background: 0.5,
            jitter: 0.3,
            noise_sigma: 0.05,
            seed,
        }
    }

    /// 32x32 RGB preset.
    pub fn rgb32(seed: u64) -> Self {
        Self {
            channels: 3,
            side: 32,
            classes: 10,
            blobs_per_class: 3,
            blob_sigma: [2.5, 5.0],
            amplitude: 0.15,
            background: 0.5,
            jitter: 0.3,
            noise_sigma: 0.05,
            seed,
        }
    }

    pub fn shape(&self) -> Result<Shape> {
        Shape::new(self.channels, self.side)
    }
}

/// Class prototypes generated from a [`BlobSpec`].
#[derive(Debug, Clone)]
pub struct BlobClasses {
    spec: BlobSpec,
    shape: Shape,
    /// Per-class blob pattern without the background.
    patterns: Vec<ImageTensor>,
}

impl BlobClasses {
    pub fn new(spec: BlobSpec) -> Result<Self> {
        let shape = spec.shape()?;
        if spec.classes < 2 || spec.blobs_per_class == 0 {
            return Err(Error::InvalidArgument("need two or more classes with at least one blob".into()));
        }
        if !(spec.blob_sigma[0] > 0.0 && spec.blob_sigma[0] <= spec.blob_sigma[1]) {
            return Err(Error::InvalidArgument("blob_sigma must be an increasing positive range".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let d = spec.side as f64;
        let patterns = (0..spec.classes)
            .map(|_| {
                let mut pattern = ImageTensor::zeros(shape);
                for _ in 0..spec.blobs_per_class {
                    let cy = rng.random_range(0.15 * d..0.85 * d);
                    let cx = rng.random_range(0.15 * d..0.85 * d);
                    let sigma = rng.random_range(spec.blob_sigma[0]..=spec.blob_sigma[1]);
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    let strength = sign * spec.amplitude * rng.random_range(0.5..1.0);
                    let colour: Vec<f64> = (0..spec.channels)
                        .map(|_| if spec.channels == 1 { 1.0 } else { rng.random_range(-1.0..1.0) })
                        .collect();
                    for (c, tint) in colour.iter().enumerate() {
                        for row in 0..spec.side {
                            for col in 0..spec.side {
                                let dy = row as f64 + 0.5 - cy;
                                let dx = col as f64 + 0.5 - cx;
                                let bump = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                                let v = pattern.get(c, row, col) + strength * tint * bump;
                                pattern.set(c, row, col, v);
                            }
                        }
                    }
                }
                pattern
            })
            .collect();
        Ok(Self { spec, shape, patterns })
    }

    pub fn spec(&self) -> &BlobSpec {
        &self.spec
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Noise-free class image.
    pub fn prototype(&self, class: usize) -> ImageTensor {
        self.patterns[class]
            .map(|v| self.spec.background + v)
            .clip_unchecked()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, class: usize) -> ImageTensor {
        let scale = 1.0 + self.spec.jitter * rng.random_range(-1.0..=1.0);
        let noise = self.spec.noise_sigma;
        let bg = self.spec.background;
        let data = self.patterns[class]
            .as_slice()
            .iter()
            .map(|&v| {
                let n: f64 = StandardNormal.sample(rng);
                (bg + scale * v + noise * n).clamp(0.0, 1.0)
            })
            .collect();
        ImageTensor::from_raw(self.shape, data)
    }

    /// `per_class` samples of every class, interleaved by class.
    pub fn dataset(&self, per_class: usize, seed: u64) -> Vec<(ImageTensor, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(per_class * self.classes());
        for _ in 0..per_class {
            for class in 0..self.classes() {
                out.push((self.sample(&mut rng, class), class));
            }
        }
        out
    }
}

/// Full-batch gradient descent on mean softmax cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub kind: ToyKind,
    pub hidden: usize,
    pub per_class: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Standard deviation of the initial first-layer weights.
    pub init_scale: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn linear(seed: u64) -> Self {
        Self {
            kind: ToyKind::Linear,
            hidden: 0,
            per_class: 30,
            iterations: 200,
            learning_rate: 0.5,
            init_scale: 0.0,
            weight_decay: 1e-3,
            seed,
        }
    }

    pub fn mlp2(seed: u64) -> Self {
        Self {
            kind: ToyKind::Mlp2,
            hidden: 16,
            per_class: 30,
            iterations: 300,
            learning_rate: 0.5,
            init_scale: 1e-3,
            weight_decay: 1e-3,
            seed,
        }
    }
}

/// Trains a toy model on samples from `classes`.
///
/// Inputs are centred on the training mean during optimisation and the
/// offset is folded back into the biases, so the returned model consumes raw
/// `[0, 1]` pixels.
pub fn train(classes: &BlobClasses, config: &TrainConfig) -> Result<ToyModel> {
    if config.iterations == 0 || config.per_class == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::InvalidArgument("training needs iterations, samples and a positive learning rate".into()));
    }
    let shape = classes.shape();
    let n = shape.len();
    let k = classes.classes();
    let data = classes.dataset(config.per_class, config.seed ^ 0x5eed_da7a);
    let count = data.len() as f64;
    let mut mean = vec![0.0; n];
    for (img, _) in &data {
        for (m, v) in mean.iter_mut().zip(img.as_slice()) {
            *m += v / count;
        }
    }
    let xs: Vec<Vec<f64>> = data
        .iter()
        .map(|(img, _)| img.as_slice().iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let labels: Vec<usize> = data.iter().map(|(_, y)| *y).collect();
    // normalise the step by the average squared input norm
    let scale = xs.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / count;
    let lr = config.learning_rate / scale.max(1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    match config.kind {
        ToyKind::Linear => {
            let mut w = vec![0.0; k * n];
            let mut b = vec![0.0; k];
            for v in w.iter_mut() {
                *v = config.init_scale * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            }
            for _ in 0..config.iterations {
                let mut gw = vec![0.0; k * n];
                let mut gb = vec![0.0; k];
                for (x, &y) in xs.iter().zip(&labels) {
                    let logits: Vec<f64> = (0..k)
                        .map(|c| dot(&w[c * n..(c + 1) * n], x) + b[c])
                        .collect();
                    let mut delta = softmax(&logits);
                    delta[y] -= 1.0;
                    for c in 0..k {
                        let dc = delta[c] / count;
                        gb[c] += dc;
                        axpy(&mut gw[c * n..(c + 1) * n], dc, x);
                    }
                }
                for (wi, gi) in w.iter_mut().zip(&gw) {
                    *wi -= lr * (gi + config.weight_decay * *wi);
                }
                for (bi, gi) in b.iter_mut().zip(&gb) {
                    *bi -= config.learning_rate * gi;
                }
            }
            for c in 0..k {
                b[c] -= dot(&w[c * n..(c + 1) * n], &mean);
            }
            Ok(ToyModel::Linear(LinearModel::new(shape, k, w, b)?))
        }
        ToyKind::Mlp2 => {
            let h = config.hidden;
            if h == 0 {
                return Err(Error::InvalidArgument("mlp2 needs at least one hidden unit".into()));
            }
            let mut w1: Vec<f64> = (0..h * n)
                .map(|_| config.init_scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            let mut b1 = vec![0.0; h];
            let out_scale = (1.0 / h as f64).sqrt();
            let mut w2: Vec<f64> = (0..k * h)
                .map(|_| out_scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            let mut b2 = vec![0.0; k];
            let lr2 = config.learning_rate;
            for _ in 0..config.iterations {
                let mut gw1 = vec![0.0; h * n];
                let mut gb1 = vec![0.0; h];
                let mut gw2 = vec![0.0; k * h];
                let mut gb2 = vec![0.0; k];
                for (x, &y) in xs.iter().zip(&labels) {
                    let act: Vec<f64> = (0..h)
                        .map(|j| (dot(&w1[j * n..(j + 1) * n], x) + b1[j]).tanh())
                        .collect();
                    let logits: Vec<f64> = (0..k)
                        .map(|c| dot(&w2[c * h..(c + 1) * h], &act) + b2[c])
                        .collect();
                    let mut delta = softmax(&logits);
                    delta[y] -= 1.0;
                    for c in 0..k {
                        let dc = delta[c] / count;
                        gb2[c] += dc;
                        axpy(&mut gw2[c * h..(c + 1) * h], dc, &act);
                    }
                    for j in 0..h {
                        let dh: f64 = (0..k).map(|c| delta[c] * w2[c * h + j]).sum::<f64>() / count;
                        let da = dh * (1.0 - act[j] * act[j]);
                        gb1[j] += da;
                        axpy(&mut gw1[j * n..(j + 1) * n], da, x);
                    }
                }
                for (wi, gi) in w1.iter_mut().zip(&gw1) {
                    *wi -= lr * (gi + config.weight_decay * *wi);
                }
                for (bi, gi) in b1.iter_mut().zip(&gb1) {
                    *bi -= lr2 * gi;
                }
                for (wi, gi) in w2.iter_mut().zip(&gw2) {
                    *wi -= lr2 * (gi + config.weight_decay * *wi);
                }
                for (bi, gi) in b2.iter_mut().zip(&gb2) {
                    *bi -= lr2 * gi;
                }
            }
            for j in 0..h {
                b1[j] -= dot(&w1[j * n..(j + 1) * n], &mean);
            }
            Ok(ToyModel::Mlp2(Mlp2Model::new(shape, k, h, w1, b1, w2, b2)?))
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Fraction of `data` the model labels correctly.
pub fn accuracy(model: &ToyModel, data: &[(ImageTensor, usize)]) -> Result<f64> {
    use crate::oracle::model::Classifier;
    let mut correct = 0usize;
    for (img, y) in data {
        if model.predict(img)? == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> BlobSpec {
        BlobSpec {
            channels: 3,
            side: 8,
            classes: 3,
            blobs_per_class: 2,
            blob_sigma: [1.0, 2.0],
            amplitude: 0.3,
            background: 0.5,
            jitter: 0.2,
            noise_sigma: 0.05,
            seed: 3,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = BlobClasses::new(small_spec()).unwrap().dataset(4, 9);
        let b = BlobClasses::new(small_spec()).unwrap().dataset(4, 9);
        assert_eq!(a, b);
        assert!(a.iter().all(|(img, _)| img.is_in_unit_range()));
    }

    #[test]
    fn both_kinds_learn_small_problem() {
        let classes = BlobClasses::new(small_spec()).unwrap();
        let test = classes.dataset(20, 77);
        for mut cfg in [TrainConfig::linear(1), TrainConfig::mlp2(1)] {
            cfg.per_class = 20;
            cfg.iterations = 150;
            let model = train(&classes, &cfg).unwrap();
            assert_eq!(train(&classes, &cfg).unwrap(), model);
            let acc = accuracy(&model, &test).unwrap();
            assert!(acc > 0.9, "{:?} accuracy {acc}", cfg.kind);
        }
    }
}
