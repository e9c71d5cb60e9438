use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::domain::{Covariates, Task};
use crate::error::{invalid, Error, Result};
use crate::score::ConformityScorer;

/// Agent utility `u: X → ℝ`; higher is better for the agent.
pub trait Utility: Send + Sync {
    fn utility(&self, x: &Covariates) -> f64;
}

impl<F> Utility for F
where
    F: Fn(&Covariates) -> f64 + Send + Sync,
{
    fn utility(&self, x: &Covariates) -> f64 {
        self(x)
    }
}

/// The label region `Ω` an agent wants excluded from its prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRegion {
    Classes(BTreeSet<usize>),
    Interval { lo: f64, hi: f64 },
}

impl TargetRegion {
    pub fn classes(classes: impl IntoIterator<Item = usize>) -> Result<Self> {
        let set: BTreeSet<usize> = classes.into_iter().collect();
        if set.is_empty() {
            return Err(Error::EmptyTargetRegion);
        }
        Ok(TargetRegion::Classes(set))
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(invalid("target interval bounds must be finite"));
        }
        if lo > hi {
            return Err(Error::EmptyTargetRegion);
        }
        Ok(TargetRegion::Interval { lo, hi })
    }

    fn check_task(&self, task: Task) -> Result<()> {
        match (self, task) {
            (TargetRegion::Classes(set), Task::Classification { classes }) => {
                match set.iter().find(|&&c| c >= classes) {
                    Some(c) => Err(invalid(format!("target class {c} out of range"))),
                    None => Ok(()),
                }
            }
            (TargetRegion::Interval { .. }, Task::Regression) => Ok(()),
            _ => Err(invalid("target region does not match the task")),
        }
    }
}

/// Whether the rational utility takes the infimum or the supremum of the
/// score over `Ω`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum UtilityDirection {
    #[default]
    Inf,
    Sup,
}

/// `u(x') = inf_{y ∈ Ω} s(x', y)` (or `sup` when configured).
pub fn rational_utility(
    scorer: &ConformityScorer,
    region: &TargetRegion,
    direction: UtilityDirection,
    x: &Covariates,
) -> Result<f64> {
    region.check_task(scorer.task())?;
    Ok(rational_utility_unchecked(scorer, region, direction, x))
}

fn rational_utility_unchecked(
    scorer: &ConformityScorer,
    region: &TargetRegion,
    direction: UtilityDirection,
    x: &Covariates,
) -> f64 {
    match region {
        TargetRegion::Classes(set) => {
            let scores = scorer.class_scores(x).expect("checked task");
            let it = set.iter().map(|&c| scores[c]);
            match direction {
                UtilityDirection::Inf => it.fold(f64::INFINITY, f64::min),
                UtilityDirection::Sup => it.fold(f64::NEG_INFINITY, f64::max),
            }
        }
        &TargetRegion::Interval { lo, hi } => {
            let mu = scorer.mean(x).expect("checked task");
            match direction {
                UtilityDirection::Inf => (lo - mu).max(mu - hi).max(0.0),
                UtilityDirection::Sup => (mu - lo).abs().max((mu - hi).abs()),
            }
        }
    }
}

/// [`rational_utility`] bound to a scorer and region.
#[derive(Debug, Clone)]
pub struct RationalUtility {
    scorer: ConformityScorer,
    region: TargetRegion,
    direction: UtilityDirection,
}

impl RationalUtility {
    pub fn new(
        scorer: ConformityScorer,
        region: TargetRegion,
        direction: UtilityDirection,
    ) -> Result<Self> {
        region.check_task(scorer.task())?;
        Ok(Self {
            scorer,
            region,
            direction,
        })
    }

    pub fn region(&self) -> &TargetRegion {
        &self.region
    }
}

impl Utility for RationalUtility {
    fn utility(&self, x: &Covariates) -> f64 {
        rational_utility_unchecked(&self.scorer, &self.region, self.direction, x)
    }
}
