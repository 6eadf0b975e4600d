//! Differentiable toy classifiers standing in for a real network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorimg::{ImageTensor, Shape};

/// Anything that maps an image to class logits.
///
/// Implementations must be safe to evaluate concurrently from several
/// attack runs.
pub trait Classifier: Send + Sync {
    fn input_shape(&self) -> Shape;

    fn num_classes(&self) -> usize;

    fn logits(&self, img: &ImageTensor) -> Result<Vec<f64>>;

    /// Value and input gradient of `loss(logits(img))`.
    fn loss_gradient(&self, _img: &ImageTensor, _loss: &dyn LogitLoss) -> Result<(f64, ImageTensor)> {
        Err(Error::NotDifferentiable)
    }

    fn predict(&self, img: &ImageTensor) -> Result<usize> {
        Ok(argmax(&self.logits(img)?))
    }
}

/// A scalar function of the logit vector, with its gradient.
pub trait LogitLoss {
    fn value_and_grad(&self, logits: &[f64]) -> (f64, Vec<f64>);
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable `softmax(logits)`.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[target]`, computed via log-sum-exp.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Cross-entropy of the softmax against a fixed label.
#[derive(Debug, Clone, Copy)]
pub struct CrossEntropy {
    pub target: usize,
}

impl LogitLoss for CrossEntropy {
    fn value_and_grad(&self, logits: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = softmax(logits);
        grad[self.target] -= 1.0;
        (cross_entropy(logits, self.target), grad)
    }
}

/// Linear combination `sum_c w[c] * Z[c]` of the logits.
#[derive(Debug, Clone)]
pub struct LogitCombination(pub Vec<f64>);

impl LogitLoss for LogitCombination {
    fn value_and_grad(&self, logits: &[f64]) -> (f64, Vec<f64>) {
        let value = logits.iter().zip(&self.0).map(|(z, w)| z * w).sum();
        (value, self.0.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    Linear,
    Mlp2,
}

/// `Z = W x + b` over the flattened planar image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub shape: Shape,
    pub classes: usize,
    /// `classes x n`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// `Z = W2 tanh(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp2Model {
    pub shape: Shape,
    pub classes: usize,
    pub hidden: usize,
    /// `hidden x n`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `classes x hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyModel {
    Linear(LinearModel),
    Mlp2(Mlp2Model),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LinearModel {
    pub fn new(shape: Shape, classes: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        if weights.len() != classes * shape.len() || bias.len() != classes {
            return Err(Error::Shape(format!(
                "linear model for {shape} with {classes} classes needs {} weights and {classes} biases",
                classes * shape.len()
            )));
        }
        Ok(Self { shape, classes, weights, bias })
    }

    pub fn zeros(shape: Shape, classes: usize) -> Self {
        Self {
            shape,
            classes,
            weights: vec![0.0; classes * shape.len()],
            bias: vec![0.0; classes],
        }
    }

    fn row(&self, c: usize) -> &[f64] {
        let n = self.shape.len();
        &self.weights[c * n..(c + 1) * n]
    }
}

impl Mlp2Model {
    pub fn new(
        shape: Shape,
        classes: usize,
        hidden: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        let n = shape.len();
        if classes < 2 || hidden == 0 {
            return Err(Error::InvalidArgument("need at least two classes and one hidden unit".into()));
        }
        if w1.len() != hidden * n || b1.len() != hidden || w2.len() != classes * hidden || b2.len() != classes {
            return Err(Error::Shape("mlp2 parameter sizes do not match".into()));
        }
        Ok(Self { shape, classes, hidden, w1, b1, w2, b2 })
    }

    fn hidden_activations(&self, x: &[f64]) -> Vec<f64> {
        let n = self.shape.len();
        (0..self.hidden)
            .map(|h| (dot(&self.w1[h * n..(h + 1) * n], x) + self.b1[h]).tanh())
            .collect()
    }

    fn output(&self, act: &[f64]) -> Vec<f64> {
        let hd = self.hidden;
        (0..self.classes)
            .map(|c| dot(&self.w2[c * hd..(c + 1) * hd], act) + self.b2[c])
            .collect()
    }
}

impl ToyModel {
    pub fn kind(&self) -> ToyKind {
        match self {
            ToyModel::Linear(_) => ToyKind::Linear,
            ToyModel::Mlp2(_) => ToyKind::Mlp2,
        }
    }

    fn check_input(&self, img: &ImageTensor) -> Result<()> {
        let expected = self.input_shape();
        if img.shape() != expected {
            return Err(Error::Shape(format!("model expects {expected}, got {}", img.shape())));
        }
        Ok(())
    }

    /// Vector-Jacobian product `sum_c upstream[c] * dZ_c/dx`.
    pub fn logit_vjp(&self, img: &ImageTensor, upstream: &[f64]) -> Result<ImageTensor> {
        self.check_input(img)?;
        let shape = img.shape();
        let n = shape.len();
        let mut grad = vec![0.0; n];
        match self {
            ToyModel::Linear(m) => {
                for (c, &u) in upstream.iter().enumerate() {
                    if u != 0.0 {
                        for (g, w) in grad.iter_mut().zip(m.row(c)) {
                            *g += u * w;
                        }
                    }
                }
            }
            ToyModel::Mlp2(m) => {
                let act = m.hidden_activations(img.as_slice());
                let hd = m.hidden;
                for (h, a) in act.iter().enumerate() {
                    let dh: f64 = (0..m.classes).map(|c| upstream[c] * m.w2[c * hd + h]).sum();
                    let da = dh * (1.0 - a * a);
                    if da != 0.0 {
                        for (g, w) in grad.iter_mut().zip(&m.w1[h * n..(h + 1) * n]) {
                            *g += da * w;
                        }
                    }
                }
            }
        }
        Ok(ImageTensor::from_raw(shape, grad))
    }
}

impl Classifier for ToyModel {
    fn input_shape(&self) -> Shape {
        match self {
            ToyModel::Linear(m) => m.shape,
            ToyModel::Mlp2(m) => m.shape,
        }
    }

    fn num_classes(&self) -> usize {
        match self {
            ToyModel::Linear(m) => m.classes,
            ToyModel::Mlp2(m) => m.classes,
        }
    }

    fn logits(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        self.check_input(img)?;
        let x = img.as_slice();
        Ok(match self {
            ToyModel::Linear(m) => (0..m.classes).map(|c| dot(m.row(c), x) + m.bias[c]).collect(),
            ToyModel::Mlp2(m) => m.output(&m.hidden_activations(x)),
        })
    }

    fn loss_gradient(&self, img: &ImageTensor, loss: &dyn LogitLoss) -> Result<(f64, ImageTensor)> {
        let logits = self.logits(img)?;
        let (value, upstream) = loss.value_and_grad(&logits);
        Ok((value, self.logit_vjp(img, &upstream)?))
    }
}
