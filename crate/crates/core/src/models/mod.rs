//! Base predictive models behind the conformity scores.

mod logistic;
mod ridge;
mod rrm;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::{Example, Task};
use crate::error::Result;
use crate::score::ConformityScorer;

pub use logistic::{
    fit_logistic, fit_logistic_traced, loss_and_gradient, LogisticClassifier, LogisticConfig,
    LogisticFit,
};
pub use ridge::{fit_ridge, RidgeRegressor};
pub use rrm::{repeated_risk_minimization, RrmVariant, DEFAULT_RRM_ROUNDS};

/// A point predictor `μ(x)`.
pub trait Regressor: Send + Sync {
    fn predict(&self, x: &[f64]) -> f64;
}

impl<F> Regressor for F
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn predict(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// Conditional class probabilities `p(·|x)`.
pub trait Classifier: Send + Sync {
    fn classes(&self) -> usize;
    fn predict_proba(&self, x: &[f64]) -> Vec<f64>;
}

/// Adapts a closure returning a probability vector.
pub struct FnClassifier<F> {
    classes: usize,
    f: F,
}

impl<F> FnClassifier<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    pub fn new(classes: usize, f: F) -> Self {
        Self { classes, f }
    }
}

impl<F> Classifier for FnClassifier<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    fn classes(&self) -> usize {
        self.classes
    }

    fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        (self.f)(x)
    }
}

/// A fitted in-repo model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseModel {
    Ridge(RidgeRegressor),
    Logistic(LogisticClassifier),
}

impl BaseModel {
    pub fn scorer(&self) -> ConformityScorer {
        match self {
            BaseModel::Ridge(m) => ConformityScorer::regression(Arc::new(m.clone())),
            BaseModel::Logistic(m) => ConformityScorer::classification(Arc::new(m.clone())),
        }
    }

    pub fn task(&self) -> Task {
        match self {
            BaseModel::Ridge(_) => Task::Regression,
            BaseModel::Logistic(m) => Task::Classification { classes: m.classes },
        }
    }
}

/// How to fit a [`BaseModel`] from examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Learner {
    Ridge {
        ridge: f64,
    },
    Logistic {
        classes: usize,
        config: LogisticConfig,
    },
}

impl Learner {
    /// Default learner for a task.
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Regression => Learner::Ridge { ridge: 1e-3 },
            Task::Classification { classes } => Learner::Logistic {
                classes,
                config: LogisticConfig::default(),
            },
        }
    }

    pub fn fit(&self, train: &[Example]) -> Result<BaseModel> {
        match *self {
            Learner::Ridge { ridge } => fit_ridge(train, ridge).map(BaseModel::Ridge),
            Learner::Logistic { classes, config } => {
                fit_logistic(train, classes, config).map(BaseModel::Logistic)
            }
        }
    }
}
