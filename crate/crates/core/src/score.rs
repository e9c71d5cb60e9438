use std::sync::Arc;

use crate::domain::{Covariates, Label, Task};
use crate::error::{Error, Result};
use crate::models::{Classifier, Regressor};

/// Probabilities are clamped to `[PROB_FLOOR, 1 − PROB_FLOOR]` before scoring.
pub const PROB_FLOOR: f64 = 1e-6;

/// Conformity score `s(x, y)`; lower means `y` is more plausible at `x`.
///
/// Regression: `|μ(x) − y|`. Classification: `1 − p(y|x)` with floored
/// probabilities.
#[derive(Clone)]
pub enum ConformityScorer {
    Regression(Arc<dyn Regressor>),
    Classification(Arc<dyn Classifier>),
}

impl std::fmt::Debug for ConformityScorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConformityScorer::Regression(_) => f.write_str("ConformityScorer::Regression"),
            ConformityScorer::Classification(c) => {
                write!(
                    f,
                    "ConformityScorer::Classification({} classes)",
                    c.classes()
                )
            }
        }
    }
}

pub(crate) fn floor_probability(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

impl ConformityScorer {
    pub fn regression(model: Arc<dyn Regressor>) -> Self {
        ConformityScorer::Regression(model)
    }

    pub fn classification(model: Arc<dyn Classifier>) -> Self {
        ConformityScorer::Classification(model)
    }

    pub fn task(&self) -> Task {
        match self {
            ConformityScorer::Regression(_) => Task::Regression,
            ConformityScorer::Classification(c) => Task::Classification {
                classes: c.classes(),
            },
        }
    }

    /// `μ(x)`; `None` for classification scorers.
    pub fn mean(&self, x: &Covariates) -> Option<f64> {
        match self {
            ConformityScorer::Regression(m) => Some(m.predict(x.as_slice())),
            ConformityScorer::Classification(_) => None,
        }
    }

    /// Scores of every class at `x`; `None` for regression scorers.
    pub fn class_scores(&self, x: &Covariates) -> Option<Vec<f64>> {
        match self {
            ConformityScorer::Classification(c) => Some(
                c.predict_proba(x.as_slice())
                    .into_iter()
                    .map(|p| 1.0 - floor_probability(p))
                    .collect(),
            ),
            ConformityScorer::Regression(_) => None,
        }
    }

    pub fn score(&self, x: &Covariates, y: &Label) -> Result<f64> {
        match (self, y) {
            (ConformityScorer::Regression(m), Label::Continuous(v)) => {
                Ok((m.predict(x.as_slice()) - v).abs())
            }
            (ConformityScorer::Classification(c), Label::Categorical(k)) => {
                let p = c.predict_proba(x.as_slice());
                p.get(*k)
                    .map(|&pk| 1.0 - floor_probability(pk))
                    .ok_or_else(|| Error::LabelKind(format!("class {k} out of range")))
            }
            _ => Err(Error::LabelKind(
                "label kind does not match the scorer's task".into(),
            )),
        }
    }
}
