//! Threshold calibration and prediction sets.
//!
//! All thresholds come from one rule: with `n` calibration scores, the
//! smallest `t` such that `(#{Sᵢ > t} + 1)/(n + 1) ≤ α`. That is the
//! `⌈(1−α)(n+1)⌉`-th order statistic, or `+∞` when `α < 1/(n+1)`.
//! Strategic calibration feeds it supremum scores `Sᵢ = sup_Δ s(Δ(Xᵢ), Yᵢ)`.

use std::collections::BTreeSet;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Covariates, Example, Label, PredictionSet, Task};
use crate::error::{invalid, Error, Result};
use crate::family::{strategic_score, AlterationFamily};
use crate::rng::{PointKey, Role};
use crate::score::ConformityScorer;

/// Snap `v` to a nearby integer when it is one up to rounding error.
fn snap(v: f64) -> Option<f64> {
    let r = v.round();
    ((v - r).abs() <= 1e-10 * r.abs().max(1.0)).then_some(r)
}

fn ceil_tol(v: f64) -> f64 {
    snap(v).unwrap_or_else(|| v.ceil())
}

fn floor_tol(v: f64) -> f64 {
    snap(v).unwrap_or_else(|| v.floor())
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// `inf{t : (1/m)·Σ 1[vᵢ ≤ t] ≥ β}`, the `⌈βm⌉`-th order statistic.
/// `+∞` entries are allowed.
pub fn empirical_quantile(values: &[f64], beta: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(invalid("quantile of an empty list"));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(invalid(format!(
            "quantile level must be in (0, 1], got {beta}"
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(invalid("quantile of NaN"));
    }
    let m = values.len();
    let rank = (ceil_tol(beta * m as f64) as usize).clamp(1, m);
    Ok(sorted(values)[rank - 1])
}

/// Number of calibration scores allowed to exceed the threshold, or `None`
/// when even zero exceedances violate the level.
fn allowed_exceedances(n: usize, alpha: f64) -> Option<usize> {
    let budget = floor_tol(alpha * (n + 1) as f64) - 1.0;
    (budget >= 0.0).then_some(budget as usize)
}

fn validate_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("alpha must be in (0, 1), got {alpha}")))
    }
}

/// Split-conformal threshold. Returns `+∞` for an empty score list or when
/// `α < 1/(n+1)`.
pub fn calibrate_standard(scores: &[f64], alpha: f64) -> Result<f64> {
    validate_alpha(alpha)?;
    if scores.iter().any(|v| v.is_nan()) {
        return Err(invalid("NaN calibration score"));
    }
    let n = scores.len();
    match allowed_exceedances(n, alpha) {
        Some(e) if e < n => Ok(sorted(scores)[n - e - 1]),
        // e ≥ n needs α(n+1) ≥ n+1, impossible for α < 1
        Some(_) => unreachable!("alpha < 1"),
        None => Ok(f64::INFINITY),
    }
}

/// Supremum scores of the calibration points, realized from
/// `(seed, Calibration, i)` sub-streams.
pub fn sup_scores(
    calib: &[Example],
    scorer: &ConformityScorer,
    family: &AlterationFamily,
    seed: u64,
) -> Result<Vec<f64>> {
    sup_scores_with_role(calib, scorer, family, seed, Role::Calibration)
}

pub(crate) fn sup_scores_with_role(
    points: &[Example],
    scorer: &ConformityScorer,
    family: &AlterationFamily,
    seed: u64,
    role: Role,
) -> Result<Vec<f64>> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, e)| strategic_score(scorer, family, &e.x, &e.y, &PointKey::new(seed, role, i)))
        .collect()
}

/// A named covariate region `G ⊂ X`.
#[derive(Clone)]
pub struct Group {
    name: String,
    predicate: Arc<dyn Fn(&Covariates) -> bool + Send + Sync>,
}

impl std::fmt::Debug for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("Group").field(&self.name).finish()
    }
}

impl Group {
    pub fn new(
        name: impl Into<String>,
        predicate: impl Fn(&Covariates) -> bool + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            predicate: Arc::new(predicate),
        }
    }

    /// `G = X`.
    pub fn universal() -> Self {
        Self::new("all", |_| true)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn contains(&self, x: &Covariates) -> bool {
        (self.predicate)(x)
    }
}

#[derive(Debug, Clone)]
pub enum CalibrationMode {
    Marginal {
        threshold: f64,
    },
    GroupConditional {
        groups: Vec<Group>,
        thresholds: Vec<f64>,
    },
    LabelConditional {
        thresholds: Vec<f64>,
    },
}

/// Serializable summary of a [`CalibrationMode`]; `null` stands for `+∞`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThresholdSummary {
    Marginal { threshold: Option<f64> },
    GroupConditional { groups: Vec<(String, Option<f64>)> },
    LabelConditional { thresholds: Vec<Option<f64>> },
}

fn finite(t: f64) -> Option<f64> {
    t.is_finite().then_some(t)
}

/// A scorer plus calibrated thresholds defining `C_t`.
#[derive(Debug, Clone)]
pub struct CalibratedPredictor {
    scorer: ConformityScorer,
    mode: CalibrationMode,
    alpha: f64,
    family: AlterationFamily,
    n_calib: usize,
    label_range: Option<(f64, f64)>,
}

fn label_range_of(calib: &[Example]) -> Option<(f64, f64)> {
    let ys: Vec<f64> = calib.iter().filter_map(|e| e.y.as_continuous()).collect();
    if ys.is_empty() {
        return None;
    }
    Some(
        ys.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| {
                (lo.min(y), hi.max(y))
            }),
    )
}

fn check_calib(calib: &[Example], scorer: &ConformityScorer) -> Result<()> {
    if calib.is_empty() {
        return Err(invalid("calibration set is empty"));
    }
    let task = scorer.task();
    calib.iter().try_for_each(|e| task.check_label(&e.y))
}

/// How thresholds are split up.
#[derive(Debug, Clone)]
pub enum ModeSpec {
    Marginal,
    GroupConditional(Vec<Group>),
    LabelConditional,
}

/// Calibrates from precomputed supremum scores (one per calibration point,
/// in order), e.g. to reuse them across several levels.
pub fn calibrate_with_scores(
    calib: &[Example],
    scores: &[f64],
    scorer: &ConformityScorer,
    family: &AlterationFamily,
    alpha: f64,
    spec: &ModeSpec,
) -> Result<CalibratedPredictor> {
    validate_alpha(alpha)?;
    check_calib(calib, scorer)?;
    if scores.len() != calib.len() {
        return Err(Error::Dimension {
            expected: calib.len(),
            got: scores.len(),
        });
    }
    let subset = |keep: &dyn Fn(usize) -> bool| -> Result<f64> {
        let picked: Vec<f64> = (0..scores.len())
            .filter(|&i| keep(i))
            .map(|i| scores[i])
            .collect();
        calibrate_standard(&picked, alpha)
    };
    let (mode, label_range) = match spec {
        ModeSpec::Marginal => (
            CalibrationMode::Marginal {
                threshold: calibrate_standard(scores, alpha)?,
            },
            label_range_of(calib),
        ),
        ModeSpec::GroupConditional(groups) => {
            if groups.is_empty() {
                return Err(invalid(
                    "group-conditional calibration needs at least one group",
                ));
            }
            let membership: Vec<Vec<bool>> = calib
                .iter()
                .map(|e| groups.iter().map(|g| g.contains(&e.x)).collect())
                .collect();
            if let Some(index) = membership.iter().position(|m| !m.iter().any(|&b| b)) {
                return Err(Error::Ungrouped { index });
            }
            let thresholds = (0..groups.len())
                .map(|j| subset(&|i| membership[i][j]))
                .collect::<Result<Vec<_>>>()?;
            (
                CalibrationMode::GroupConditional {
                    groups: groups.clone(),
                    thresholds,
                },
                label_range_of(calib),
            )
        }
        ModeSpec::LabelConditional => {
            let Task::Classification { classes } = scorer.task() else {
                return Err(invalid(
                    "label-conditional calibration needs a classification task",
                ));
            };
            let thresholds = (0..classes)
                .map(|k| subset(&|i| calib[i].y == Label::Categorical(k)))
                .collect::<Result<Vec<_>>>()?;
            (CalibrationMode::LabelConditional { thresholds }, None)
        }
    };
    Ok(CalibratedPredictor {
        scorer: scorer.clone(),
        mode,
        alpha,
        family: family.clone(),
        n_calib: calib.len(),
        label_range,
    })
}

fn calibrate_mode(
    calib: &[Example],
    scorer: &ConformityScorer,
    family: &AlterationFamily,
    alpha: f64,
    spec: &ModeSpec,
    seed: u64,
) -> Result<CalibratedPredictor> {
    validate_alpha(alpha)?;
    check_calib(calib, scorer)?;
    // cheap configuration errors first
    match spec {
        ModeSpec::GroupConditional(groups) if groups.is_empty() => {
            return Err(invalid(
                "group-conditional calibration needs at least one group",
            ))
        }
        ModeSpec::GroupConditional(groups) => {
            if let Some(index) = calib
                .iter()
                .position(|e| !groups.iter().any(|g| g.contains(&e.x)))
            {
                return Err(Error::Ungrouped { index });
            }
        }
        ModeSpec::LabelConditional if scorer.task().classes().is_none() => {
            return Err(invalid(
                "label-conditional calibration needs a classification task",
            ))
        }
        _ => {}
    }
    let scores = sup_scores(calib, scorer, family, seed)?;
    calibrate_with_scores(calib, &scores, scorer, family, alpha, spec)
}

/// Marginal strategic calibration.
pub fn calibrate_strategic(
    calib: &[Example],
    scorer: &ConformityScorer,
    family: &AlterationFamily,
    alpha: f64,
    seed: u64,
) -> Result<CalibratedPredictor> {
    calibrate_mode(calib, scorer, family, alpha, &ModeSpec::Marginal, seed)
}

/// Per-group strategic calibration. Each calibration point must lie in at
/// least one group; group membership uses the unaltered covariates.
pub fn calibrate_group_conditional(
    calib: &[Example],
    scorer: &ConformityScorer,
    family: &AlterationFamily,
    alpha: f64,
    groups: Vec<Group>,
    seed: u64,
) -> Result<CalibratedPredictor> {
    calibrate_mode(
        calib,
        scorer,
        family,
        alpha,
        &ModeSpec::GroupConditional(groups),
        seed,
    )
}

/// Per-class strategic calibration; classes absent from `calib` get `+∞`.
pub fn calibrate_label_conditional(
    calib: &[Example],
    scorer: &ConformityScorer,
    family: &AlterationFamily,
    alpha: f64,
    seed: u64,
) -> Result<CalibratedPredictor> {
    calibrate_mode(
        calib,
        scorer,
        family,
        alpha,
        &ModeSpec::LabelConditional,
        seed,
    )
}

impl CalibratedPredictor {
    /// Assembles a predictor from precomputed thresholds, e.g. ones loaded
    /// from a saved calibration.
    pub fn from_parts(
        scorer: ConformityScorer,
        mode: CalibrationMode,
        alpha: f64,
        family: AlterationFamily,
        n_calib: usize,
    ) -> Result<Self> {
        validate_alpha(alpha)?;
        match &mode {
            CalibrationMode::GroupConditional { groups, thresholds }
                if groups.len() != thresholds.len() =>
            {
                return Err(invalid("one threshold per group required"))
            }
            CalibrationMode::LabelConditional { thresholds }
                if scorer.task().classes() != Some(thresholds.len()) =>
            {
                return Err(invalid("one threshold per class required"))
            }
            _ => {}
        }
        Ok(Self {
            scorer,
            mode,
            alpha,
            family,
            n_calib,
            label_range: None,
        })
    }

    /// Label range used to size full regression sets.
    pub fn with_label_range(mut self, range: Option<(f64, f64)>) -> Self {
        self.label_range = range;
        self
    }

    pub fn scorer(&self) -> &ConformityScorer {
        &self.scorer
    }

    pub fn mode(&self) -> &CalibrationMode {
        &self.mode
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn family(&self) -> &AlterationFamily {
        &self.family
    }

    pub fn n_calib(&self) -> usize {
        self.n_calib
    }

    pub fn label_range(&self) -> Option<(f64, f64)> {
        self.label_range
    }

    /// The marginal threshold, if this predictor is marginal.
    pub fn threshold(&self) -> Option<f64> {
        match self.mode {
            CalibrationMode::Marginal { threshold } => Some(threshold),
            _ => None,
        }
    }

    pub fn summary(&self) -> ThresholdSummary {
        match &self.mode {
            CalibrationMode::Marginal { threshold } => ThresholdSummary::Marginal {
                threshold: finite(*threshold),
            },
            CalibrationMode::GroupConditional { groups, thresholds } => {
                ThresholdSummary::GroupConditional {
                    groups: groups
                        .iter()
                        .zip(thresholds)
                        .map(|(g, t)| (g.name.clone(), finite(*t)))
                        .collect(),
                }
            }
            CalibrationMode::LabelConditional { thresholds } => {
                ThresholdSummary::LabelConditional {
                    thresholds: thresholds.iter().copied().map(finite).collect(),
                }
            }
        }
    }

    fn group_threshold(&self, groups: &[Group], thresholds: &[f64], x: &Covariates) -> Result<f64> {
        groups
            .iter()
            .zip(thresholds)
            .filter(|(g, _)| g.contains(x))
            .map(|(_, t)| *t)
            .reduce(f64::max)
            .ok_or(Error::Ungrouped { index: 0 })
    }

    /// Threshold that label `y` is checked against when the agent's
    /// unaltered covariates are `x`.
    pub fn threshold_for(&self, x: &Covariates, y: &Label) -> Result<f64> {
        match &self.mode {
            CalibrationMode::Marginal { threshold } => Ok(*threshold),
            CalibrationMode::GroupConditional { groups, thresholds } => {
                self.group_threshold(groups, thresholds, x)
            }
            CalibrationMode::LabelConditional { thresholds } => y
                .as_class()
                .and_then(|k| thresholds.get(k).copied())
                .ok_or_else(|| Error::LabelKind("label outside the calibrated classes".into())),
        }
    }

    /// `C(x) = {y : s(x, y) ≤ t*(x, y)}`.
    pub fn predict_set(&self, x: &Covariates) -> Result<PredictionSet> {
        let per_class = |thresholds: &dyn Fn(usize) -> f64| -> PredictionSet {
            let scores = self.scorer.class_scores(x).expect("classification scorer");
            PredictionSet::LabelSet(
                scores
                    .iter()
                    .enumerate()
                    .filter(|(k, s)| **s <= thresholds(*k))
                    .map(|(k, _)| k)
                    .collect::<BTreeSet<usize>>(),
            )
        };
        let uniform = |t: f64| -> PredictionSet {
            match self.scorer.mean(x) {
                Some(_) if t.is_infinite() => PredictionSet::Full,
                Some(mu) => PredictionSet::Interval {
                    lo: mu - t,
                    hi: mu + t,
                },
                None => per_class(&|_| t),
            }
        };
        match &self.mode {
            CalibrationMode::Marginal { threshold } => Ok(uniform(*threshold)),
            CalibrationMode::GroupConditional { groups, thresholds } => {
                Ok(uniform(self.group_threshold(groups, thresholds, x)?))
            }
            CalibrationMode::LabelConditional { thresholds } => Ok(per_class(&|k| thresholds[k])),
        }
    }

    /// Size of the set at `x`: interval length, class count, or the label
    /// range's length for full regression sets.
    pub fn set_size(&self, x: &Covariates) -> Result<f64> {
        let full = match (self.scorer.task(), self.label_range) {
            (Task::Classification { classes }, _) => classes as f64,
            (Task::Regression, Some((lo, hi))) => hi - lo,
            (Task::Regression, None) => f64::INFINITY,
        };
        Ok(self.predict_set(x)?.size(full))
    }
}
