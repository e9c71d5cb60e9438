//! Coverage and size estimators, bootstrap intervals, and the Gaussian
//! total-variation oracle.

use rayon::prelude::*;
use serde::Serialize;

use crate::calibrate::{
    calibrate_strategic, empirical_quantile, sup_scores_with_role, CalibratedPredictor,
};
use crate::domain::{Covariates, Example};
use crate::error::{invalid, Result};
use crate::family::AlterationFamily;
use crate::rng::{derive_seed, rng_from, PointKey, Role, StreamRng};
use crate::score::ConformityScorer;

/// Default bootstrap resample count.
pub const DEFAULT_BOOTSTRAP_B: usize = 1000;

/// Outcome for one test point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointOutcome {
    /// `sup_Δ s(Δ(x), y)` over the evaluation family.
    pub sup_score: f64,
    /// `s(x, y)` at the unaltered covariates.
    pub plain_score: f64,
    /// The threshold `y` is checked against.
    pub threshold: f64,
}

impl PointOutcome {
    /// `y` lies in the set at every realized alteration.
    pub fn strategically_covered(&self) -> bool {
        self.sup_score <= self.threshold
    }

    pub fn plainly_covered(&self) -> bool {
        self.plain_score <= self.threshold
    }
}

/// Evaluates every test point under `family`, realized from
/// `(seed, Test, i)` sub-streams.
pub fn evaluate_points(
    pred: &CalibratedPredictor,
    test: &[Example],
    family: &AlterationFamily,
    seed: u64,
) -> Result<Vec<PointOutcome>> {
    if test.is_empty() {
        return Err(invalid("test set is empty"));
    }
    let sups = sup_scores_with_role(test, pred.scorer(), family, seed, Role::Test)?;
    outcomes_from_scores(pred, test, &sups)
}

/// Like [`evaluate_points`] with the supremum scores already computed.
pub fn outcomes_from_scores(
    pred: &CalibratedPredictor,
    test: &[Example],
    sup_scores: &[f64],
) -> Result<Vec<PointOutcome>> {
    if test.is_empty() {
        return Err(invalid("test set is empty"));
    }
    if sup_scores.len() != test.len() {
        return Err(crate::error::Error::Dimension {
            expected: test.len(),
            got: sup_scores.len(),
        });
    }
    let scorer = pred.scorer();
    test.par_iter()
        .zip(sup_scores)
        .map(|(e, &sup_score)| {
            Ok(PointOutcome {
                sup_score,
                plain_score: scorer.score(&e.x, &e.y)?,
                threshold: pred.threshold_for(&e.x, &e.y)?,
            })
        })
        .collect()
}

/// Supremum scores of test points, realized from `(seed, Test, i)` streams.
pub fn test_sup_scores(
    scorer: &ConformityScorer,
    test: &[Example],
    family: &AlterationFamily,
    seed: u64,
) -> Result<Vec<f64>> {
    sup_scores_with_role(test, scorer, family, seed, Role::Test)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Fraction of test points whose label is covered for all family members
/// simultaneously.
pub fn strategic_coverage(
    pred: &CalibratedPredictor,
    test: &[Example],
    family: &AlterationFamily,
    seed: u64,
) -> Result<f64> {
    let out = evaluate_points(pred, test, family, seed)?;
    Ok(out.iter().filter(|o| o.strategically_covered()).count() as f64 / out.len() as f64)
}

/// Coverage at the unaltered covariates.
pub fn plain_coverage(pred: &CalibratedPredictor, test: &[Example]) -> Result<f64> {
    strategic_coverage(pred, test, &AlterationFamily::identity(), 0)
}

/// Interval length, member count, or label-range length for full
/// regression sets.
pub fn set_size(pred: &CalibratedPredictor, x: &Covariates) -> Result<f64> {
    pred.set_size(x)
}

/// Per-point `size(C_strat(xᵢ)) − size(C_std(xᵢ))` at unaltered `xᵢ`.
pub fn size_diffs(
    strategic: &CalibratedPredictor,
    standard: &CalibratedPredictor,
    test: &[Example],
) -> Result<Vec<f64>> {
    if strategic.scorer().task() != standard.scorer().task() {
        return Err(invalid("predictors must share a task"));
    }
    test.par_iter()
        .map(|e| Ok(strategic.set_size(&e.x)? - standard.set_size(&e.x)?))
        .collect()
}

pub fn avg_size_diff(
    strategic: &CalibratedPredictor,
    standard: &CalibratedPredictor,
    test: &[Example],
) -> Result<f64> {
    if test.is_empty() {
        return Err(invalid("test set is empty"));
    }
    Ok(mean(&size_diffs(strategic, standard, test)?))
}

/// Percentile bootstrap interval for the mean of `values`. Resample `b` is
/// drawn from its own `(seed, Bootstrap, b)` stream. The interval is widened
/// if needed so that it contains the sample mean.
pub fn bootstrap_ci(values: &[f64], b: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(invalid("bootstrap of an empty sample"));
    }
    if b < 100 {
        return Err(invalid(format!(
            "need at least 100 bootstrap resamples, got {b}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid(format!(
            "confidence level must be in (0, 1), got {level}"
        )));
    }
    let n = values.len();
    let means: Vec<f64> = (0..b)
        .into_par_iter()
        .map(|r| {
            use rand::Rng;
            let mut rng: StreamRng = PointKey::new(seed, Role::Bootstrap, r).member(0);
            (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64
        })
        .collect();
    let tail = (1.0 - level) / 2.0;
    let lo = empirical_quantile(&means, tail)?;
    let hi = empirical_quantile(&means, 1.0 - tail)?;
    let m = mean(values);
    Ok((lo.min(m), hi.max(m)))
}

/// Total variation between `N(μ₁, Σ)` and `N(μ₂, Σ)` with `‖μ₁ − μ₂‖_Σ = d`:
/// `2Φ(d/2) − 1 = erf(d / (2√2))`.
pub fn gaussian_tv(d: f64) -> Result<f64> {
    if d.is_nan() || d < 0.0 {
        return Err(invalid(format!("distance must be non-negative, got {d}")));
    }
    Ok(statrs::function::erf::erf(
        d / (2.0 * std::f64::consts::SQRT_2),
    ))
}

/// `√(p(1 − p)/n)`.
pub fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// `(lo, hi)` with `null` standing for non-finite endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

impl From<(f64, f64)> for Interval {
    fn from((lo, hi): (f64, f64)) -> Self {
        Self {
            lo: lo.is_finite().then_some(lo),
            hi: hi.is_finite().then_some(hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ci95 {
    pub strategic_coverage: Interval,
    pub plain_coverage: Interval,
    pub avg_set_size: Interval,
    pub avg_size_diff: Option<Interval>,
}

/// Summary of one predictor on one test set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub strategic_coverage: f64,
    pub plain_coverage: f64,
    pub avg_set_size: Option<f64>,
    /// Only when a standard-CP predictor was supplied for comparison.
    pub avg_size_diff: Option<f64>,
    pub ci95: Ci95,
    pub n_test: usize,
    pub alpha: f64,
}

/// Builds a [`CoverageReport`]; `standard`, when given, is the baseline for
/// the size difference.
pub fn coverage_report(
    pred: &CalibratedPredictor,
    standard: Option<&CalibratedPredictor>,
    test: &[Example],
    family: &AlterationFamily,
    seed: u64,
    bootstrap_b: usize,
) -> Result<CoverageReport> {
    let out = evaluate_points(pred, test, family, seed)?;
    report_from_outcomes(pred, standard, test, &out, seed, bootstrap_b)
}

/// [`coverage_report`] from already evaluated points; `seed` only keys the
/// bootstrap.
pub fn report_from_outcomes(
    pred: &CalibratedPredictor,
    standard: Option<&CalibratedPredictor>,
    test: &[Example],
    out: &[PointOutcome],
    seed: u64,
    bootstrap_b: usize,
) -> Result<CoverageReport> {
    let strat: Vec<f64> = out
        .iter()
        .map(|o| indicator(o.strategically_covered()))
        .collect();
    let plain: Vec<f64> = out.iter().map(|o| indicator(o.plainly_covered())).collect();
    let sizes: Vec<f64> = test
        .par_iter()
        .map(|e| pred.set_size(&e.x))
        .collect::<Result<_>>()?;
    let diffs = standard.map(|s| size_diffs(pred, s, test)).transpose()?;
    let ci = |v: &[f64], salt: u64| -> Result<Interval> {
        if v.iter().any(|x| !x.is_finite()) {
            return Ok((f64::NAN, f64::NAN).into());
        }
        Ok(bootstrap_ci(v, bootstrap_b, 0.95, derive_seed(&[seed, salt]))?.into())
    };
    let finite_mean = |v: &[f64]| {
        let m = mean(v);
        m.is_finite().then_some(m)
    };
    Ok(CoverageReport {
        strategic_coverage: mean(&strat),
        plain_coverage: mean(&plain),
        avg_set_size: finite_mean(&sizes),
        avg_size_diff: diffs.as_deref().and_then(finite_mean),
        ci95: Ci95 {
            strategic_coverage: ci(&strat, 1)?,
            plain_coverage: ci(&plain, 2)?,
            avg_set_size: ci(&sizes, 3)?,
            avg_size_diff: diffs.as_deref().map(|d| ci(d, 4)).transpose()?,
        },
        n_test: test.len(),
        alpha: pred.alpha(),
    })
}

/// Empirical coverage under a (possibly misspecified) true family against
/// the lower bound `1 − α − tv_bound`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessReport {
    pub coverage: f64,
    pub bound: f64,
    pub se: f64,
    pub n_test: usize,
    /// Coverage below the bound by more than three standard errors.
    pub violated: bool,
}

pub fn robustness_gap_check(
    pred: &CalibratedPredictor,
    test: &[Example],
    true_family: &AlterationFamily,
    tv_bound: f64,
    seed: u64,
) -> Result<RobustnessReport> {
    if !(0.0..=1.0).contains(&tv_bound) {
        return Err(invalid(format!(
            "TV bound must be in [0, 1], got {tv_bound}"
        )));
    }
    let coverage = strategic_coverage(pred, test, true_family, seed)?;
    let bound = 1.0 - pred.alpha() - tv_bound;
    // SE at the bound, floored so degenerate bounds keep a tolerance
    let se = binomial_se(bound.clamp(0.01, 0.99), test.len());
    Ok(RobustnessReport {
        coverage,
        bound,
        se,
        n_test: test.len(),
        violated: coverage < bound - 3.0 * se,
    })
}

/// Mean interval length of a regression predictor against `2M`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TightnessReport {
    pub mean_length: f64,
    pub bound: f64,
    pub holds: bool,
}

/// For `μ(X) = Y + ε` with `|ε| ≤ M`, scores never exceed `M`, so the
/// calibrated intervals have length at most `2M`.
pub fn tightness_check(
    pred: &CalibratedPredictor,
    test: &[Example],
    noise_bound: f64,
) -> Result<TightnessReport> {
    if pred
        .scorer()
        .mean(&test.first().ok_or_else(|| invalid("test set is empty"))?.x)
        .is_none()
    {
        return Err(invalid("tightness check needs a regression predictor"));
    }
    if noise_bound.is_nan() || noise_bound < 0.0 {
        return Err(invalid("noise bound must be non-negative"));
    }
    let lengths = test
        .par_iter()
        .map(|e| pred.set_size(&e.x))
        .collect::<Result<Vec<_>>>()?;
    let mean_length = mean(&lengths);
    let bound = 2.0 * noise_bound;
    Ok(TightnessReport {
        mean_length,
        bound,
        holds: mean_length <= bound,
    })
}

/// Sizes and levels for [`training_conditional_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainingConditionalSetup {
    pub n_calib: usize,
    pub n_test: usize,
    pub alpha: f64,
    pub delta: f64,
    pub repetitions: usize,
    pub seed: u64,
}

impl TrainingConditionalSetup {
    /// `1 − α − √(log(1/δ) / 2n)`.
    pub fn coverage_floor(&self) -> f64 {
        1.0 - self.alpha - ((1.0 / self.delta).ln() / (2.0 * self.n_calib as f64)).sqrt()
    }

    /// `1 − δ − 3·√(δ(1 − δ)/R)`.
    pub fn required_pass_fraction(&self) -> f64 {
        1.0 - self.delta - 3.0 * binomial_se(self.delta, self.repetitions)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingConditionalReport {
    pub coverages: Vec<f64>,
    pub floor: f64,
    pub pass_fraction: f64,
    pub required: f64,
    pub holds: bool,
}

/// Repeats calibration on fresh draws and checks how often the conditional
/// coverage, estimated on a fresh test set, clears the floor.
/// `draw(rng, n)` must return `n` i.i.d. examples.
pub fn training_conditional_check<D>(
    scorer: &ConformityScorer,
    family: &AlterationFamily,
    draw: D,
    setup: TrainingConditionalSetup,
) -> Result<TrainingConditionalReport>
where
    D: Fn(&mut StreamRng, usize) -> Vec<Example> + Sync,
{
    if setup.repetitions == 0 || setup.n_calib == 0 || setup.n_test == 0 {
        return Err(invalid("repetitions and sample sizes must be positive"));
    }
    if !(setup.delta > 0.0 && setup.delta < 1.0) {
        return Err(invalid(format!(
            "delta must be in (0, 1), got {}",
            setup.delta
        )));
    }
    let coverages = (0..setup.repetitions)
        .into_par_iter()
        .map(|r| {
            let rep = derive_seed(&[setup.seed, r as u64]);
            let calib = draw(&mut rng_from(&[rep, 1]), setup.n_calib);
            let test = draw(&mut rng_from(&[rep, 2]), setup.n_test);
            let pred = calibrate_strategic(&calib, scorer, family, setup.alpha, rep)?;
            strategic_coverage(&pred, &test, family, rep)
        })
        .collect::<Result<Vec<_>>>()?;
    let floor = setup.coverage_floor();
    let pass_fraction =
        coverages.iter().filter(|&&c| c >= floor).count() as f64 / coverages.len() as f64;
    let required = setup.required_pass_fraction();
    Ok(TrainingConditionalReport {
        coverages,
        floor,
        pass_fraction,
        required,
        holds: pass_fraction >= required,
    })
}
