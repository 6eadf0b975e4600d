//! Query-counted access to a model.
//!
//! An [`Oracle`] exposes the two black-box channels attacks may use: a
//! boolean decision ("is this image adversarial?") and a scalar loss. Every
//! call costs one query against a [`QueryBudget`]; a call past the budget
//! fails with [`Error::BudgetExhausted`] and is not counted.
//!
//! Budgets are shared handles so that several oracles (one per Hyperband arm,
//! say) can draw from one global allowance while keeping their own counts.

pub mod defense;
pub mod model;
pub mod remote;
pub mod synth;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensorimg::{ImageTensor, Shape};

pub use defense::DefenseTransform;
pub use model::{argmax, cross_entropy, softmax, Classifier, CrossEntropy, LogitLoss, ToyKind, ToyModel};

/// A shared, thread-safe query allowance.
#[derive(Debug, Clone)]
pub struct QueryBudget {
    inner: Arc<BudgetInner>,
}

#[derive(Debug)]
struct BudgetInner {
    limit: u64,
    used: AtomicU64,
}

impl QueryBudget {
    pub fn new(limit: u64) -> Self {
        Self {
            inner: Arc::new(BudgetInner { limit, used: AtomicU64::new(0) }),
        }
    }

    pub fn unlimited() -> Self {
        Self::new(u64::MAX)
    }

    /// Reserves one query.
    pub fn try_consume(&self) -> Result<()> {
        let limit = self.inner.limit;
        self.inner
            .used
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |used| (used < limit).then_some(used + 1))
            .map(|_| ())
            .map_err(|used| Error::BudgetExhausted { used, limit })
    }

    /// Returns a reservation that never reached the model.
    pub fn refund(&self) {
        self.inner.used.fetch_sub(1, Ordering::AcqRel);
    }

    pub fn used(&self) -> u64 {
        self.inner.used.load(Ordering::Acquire)
    }

    pub fn limit(&self) -> u64 {
        self.inner.limit
    }

    pub fn remaining(&self) -> u64 {
        self.inner.limit.saturating_sub(self.used())
    }
}

/// What the attacker is trying to achieve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackGoal {
    /// Any label other than `label` counts as adversarial.
    Untargeted { label: usize },
    /// Only `target` counts as adversarial.
    Targeted { target: usize },
}

impl AttackGoal {
    pub fn label(&self) -> usize {
        match *self {
            AttackGoal::Untargeted { label } => label,
            AttackGoal::Targeted { target } => target,
        }
    }

    pub fn is_targeted(&self) -> bool {
        matches!(self, AttackGoal::Targeted { .. })
    }

    /// Decision channel evaluated on raw logits.
    pub fn is_adversarial(&self, logits: &[f64]) -> bool {
        let predicted = argmax(logits);
        match *self {
            AttackGoal::Untargeted { label } => predicted != label,
            AttackGoal::Targeted { target } => predicted == target,
        }
    }

    /// Loss channel evaluated on raw logits: cross-entropy against the target
    /// for targeted goals, negated cross-entropy against the true label for
    /// untargeted ones. Lower is always better for the attacker.
    pub fn loss(&self, logits: &[f64]) -> f64 {
        match *self {
            AttackGoal::Untargeted { label } => -cross_entropy(logits, label),
            AttackGoal::Targeted { target } => cross_entropy(logits, target),
        }
    }

    fn check(&self, classes: usize) -> Result<()> {
        if self.label() >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {classes} classes",
                self.label()
            )));
        }
        Ok(())
    }
}

/// Black-box model access with query accounting.
pub trait Oracle {
    /// `true` iff the image satisfies the attack goal. Costs one query.
    fn decide(&mut self, img: &ImageTensor) -> Result<bool>;

    /// Continuous adversarial loss. Costs one query.
    fn loss(&mut self, img: &ImageTensor) -> Result<f64>;

    /// Queries answered by this oracle.
    fn query_count(&self) -> u64;

    fn budget(&self) -> &QueryBudget;

    fn goal(&self) -> AttackGoal;

    fn remaining(&self) -> u64 {
        self.budget().remaining()
    }
}

impl<O: Oracle + ?Sized> Oracle for Box<O> {
    fn decide(&mut self, img: &ImageTensor) -> Result<bool> {
        (**self).decide(img)
    }
    fn loss(&mut self, img: &ImageTensor) -> Result<f64> {
        (**self).loss(img)
    }
    fn query_count(&self) -> u64 {
        (**self).query_count()
    }
    fn budget(&self) -> &QueryBudget {
        (**self).budget()
    }
    fn goal(&self) -> AttackGoal {
        (**self).goal()
    }
}

/// In-process oracle over a [`Classifier`], optionally behind a defense.
pub struct ModelOracle {
    model: Arc<dyn Classifier>,
    defense: DefenseTransform,
    goal: AttackGoal,
    queries: u64,
    budget: QueryBudget,
}

impl ModelOracle {
    pub fn new(model: Arc<dyn Classifier>, goal: AttackGoal, budget: QueryBudget) -> Result<Self> {
        goal.check(model.num_classes())?;
        Ok(Self {
            model,
            defense: DefenseTransform::Identity,
            goal,
            queries: 0,
            budget,
        })
    }

    pub fn with_defense(mut self, defense: DefenseTransform) -> Result<Self> {
        defense.validate()?;
        self.defense = defense;
        Ok(self)
    }

    pub fn model(&self) -> &Arc<dyn Classifier> {
        &self.model
    }

    pub fn defense(&self) -> DefenseTransform {
        self.defense
    }

    /// Logits of the defended image, without touching the budget.
    pub fn logits_uncounted(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        self.model.logits(&self.defense.apply(img)?)
    }

    fn counted_logits(&mut self, img: &ImageTensor) -> Result<Vec<f64>> {
        let shape = self.model.input_shape();
        if img.shape() != shape {
            return Err(Error::Shape(format!("oracle expects {shape}, got {}", img.shape())));
        }
        self.budget.try_consume()?;
        self.queries += 1;
        self.logits_uncounted(img)
    }
}

impl Oracle for ModelOracle {
    fn decide(&mut self, img: &ImageTensor) -> Result<bool> {
        let logits = self.counted_logits(img)?;
        Ok(self.goal.is_adversarial(&logits))
    }

    fn loss(&mut self, img: &ImageTensor) -> Result<f64> {
        let logits = self.counted_logits(img)?;
        Ok(self.goal.loss(&logits))
    }

    fn query_count(&self) -> u64 {
        self.queries
    }

    fn budget(&self) -> &QueryBudget {
        &self.budget
    }

    fn goal(&self) -> AttackGoal {
        self.goal
    }
}

type LossFn = Box<dyn FnMut(&ImageTensor) -> f64 + Send>;
type DecideFn = Box<dyn FnMut(&ImageTensor) -> bool + Send>;

/// Oracle backed by plain closures. Handy for checking estimators against
/// losses with known gradients.
pub struct FunctionOracle {
    shape: Shape,
    loss_fn: LossFn,
    decide_fn: DecideFn,
    goal: AttackGoal,
    queries: u64,
    budget: QueryBudget,
}

impl FunctionOracle {
    pub fn new(
        shape: Shape,
        loss_fn: impl FnMut(&ImageTensor) -> f64 + Send + 'static,
        budget: QueryBudget,
    ) -> Self {
        Self {
            shape,
            loss_fn: Box::new(loss_fn),
            decide_fn: Box::new(|_| false),
            goal: AttackGoal::Targeted { target: 0 },
            queries: 0,
            budget,
        }
    }

    pub fn with_decision(mut self, decide_fn: impl FnMut(&ImageTensor) -> bool + Send + 'static) -> Self {
        self.decide_fn = Box::new(decide_fn);
        self
    }

    pub fn with_goal(mut self, goal: AttackGoal) -> Self {
        self.goal = goal;
        self
    }

    fn charge(&mut self, img: &ImageTensor) -> Result<()> {
        if img.shape() != self.shape {
            return Err(Error::Shape(format!("oracle expects {}, got {}", self.shape, img.shape())));
        }
        self.budget.try_consume()?;
        self.queries += 1;
        Ok(())
    }
}

impl Oracle for FunctionOracle {
    fn decide(&mut self, img: &ImageTensor) -> Result<bool> {
        self.charge(img)?;
        Ok((self.decide_fn)(img))
    }

    fn loss(&mut self, img: &ImageTensor) -> Result<f64> {
        self.charge(img)?;
        Ok((self.loss_fn)(img))
    }

    fn query_count(&self) -> u64 {
        self.queries
    }

    fn budget(&self) -> &QueryBudget {
        &self.budget
    }

    fn goal(&self) -> AttackGoal {
        self.goal
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::model::LinearModel;

    /// Two classes over a 1x2x2 image; only the first two pixels matter and
    /// class 0 scores `p0 - p1`.
    fn two_pixel_model() -> Arc<dyn Classifier> {
        let shape = Shape::new(1, 2).unwrap();
        let weights = vec![1.0, -1.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0];
        Arc::new(ToyModel::Linear(LinearModel::new(shape, 2, weights, vec![0.0, 0.0]).unwrap()))
    }

    fn image(p0: f64, p1: f64) -> ImageTensor {
        ImageTensor::new(1, 2, vec![p0, p1, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn decision_follows_hand_evaluated_logits() {
        let mut o = ModelOracle::new(two_pixel_model(), AttackGoal::Untargeted { label: 0 }, QueryBudget::new(10)).unwrap();
        assert!(!o.decide(&image(0.9, 0.1)).unwrap());
        assert!(o.decide(&image(0.1, 0.9)).unwrap());
        assert_eq!(o.query_count(), 2);
    }

    #[test]
    fn budget_of_one_allows_one_call() {
        let mut o = ModelOracle::new(two_pixel_model(), AttackGoal::Untargeted { label: 0 }, QueryBudget::new(1)).unwrap();
        o.decide(&image(0.9, 0.1)).unwrap();
        let err = o.decide(&image(0.9, 0.1)).unwrap_err();
        assert!(err.is_budget_exhausted());
        assert_eq!(o.query_count(), 1);
        assert_eq!(o.budget().used(), 1);
    }

    #[test]
    fn loss_matches_independent_softmax() {
        let mut o = ModelOracle::new(two_pixel_model(), AttackGoal::Targeted { target: 1 }, QueryBudget::unlimited()).unwrap();
        let img = image(0.7, 0.2);
        // logits (0.5, -0.5): p1 = e^-0.5 / (e^0.5 + e^-0.5)
        let p1 = (-0.5f64).exp() / ((0.5f64).exp() + (-0.5f64).exp());
        assert!((o.loss(&img).unwrap() + p1.ln()).abs() < 1e-12);
        let mut zero = ModelOracle::new(two_pixel_model(), AttackGoal::Targeted { target: 1 }, QueryBudget::unlimited()).unwrap();
        assert!((zero.loss(&image(0.3, 0.3)).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn repeated_decisions_agree_and_cost_two_queries() {
        let mut o = ModelOracle::new(two_pixel_model(), AttackGoal::Untargeted { label: 0 }, QueryBudget::unlimited()).unwrap();
        let img = image(0.4, 0.6);
        assert_eq!(o.decide(&img).unwrap(), o.decide(&img).unwrap());
        assert_eq!(o.query_count(), 2);
    }

    #[test]
    fn shared_budget_spans_oracles() {
        let budget = QueryBudget::new(3);
        let mut a = ModelOracle::new(two_pixel_model(), AttackGoal::Untargeted { label: 0 }, budget.clone()).unwrap();
        let mut b = ModelOracle::new(two_pixel_model(), AttackGoal::Untargeted { label: 0 }, budget.clone()).unwrap();
        a.decide(&image(0.5, 0.5)).unwrap();
        b.decide(&image(0.5, 0.5)).unwrap();
        a.decide(&image(0.5, 0.5)).unwrap();
        assert!(b.decide(&image(0.5, 0.5)).is_err());
        assert_eq!(a.query_count() + b.query_count(), budget.used());
    }

    #[test]
    fn out_of_range_goal_is_rejected() {
        assert!(ModelOracle::new(two_pixel_model(), AttackGoal::Targeted { target: 5 }, QueryBudget::unlimited()).is_err());
    }

    #[test]
    fn defense_sits_in_front_of_the_model() {
        let o = ModelOracle::new(two_pixel_model(), AttackGoal::Untargeted { label: 0 }, QueryBudget::unlimited())
            .unwrap()
            .with_defense(DefenseTransform::BitDepth { bits: 1 })
            .unwrap();
        // 0.45 and 0.55 both quantize away from each other with one bit
        let logits = o.logits_uncounted(&image(0.45, 0.55)).unwrap();
        assert_eq!(logits, vec![-1.0, 1.0]);
    }
}
