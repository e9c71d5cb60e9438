//! Experiment configuration, the shared data → model → family pipeline, and
//! the sweep runners behind the CLI. Every runner is a pure function of its
//! config and writes its files only after all rows are computed.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alterations::{
    build_iterative_family, build_simulator_family, build_utility_cost_family, misspecify,
    Covariance, GaussianWalk, MahalanobisCost, RationalUtility, SearchConfig, TargetRegion,
    UtilityDirection,
};
use crate::calibrate::{
    calibrate_with_scores, sup_scores, CalibratedPredictor, CalibrationMode, Group, ModeSpec,
    ThresholdSummary,
};
use crate::data::{generate_synthetic, ingest_csv, SyntheticSpec, TaskKind};
use crate::domain::{Covariates, Example, SplitDataset, SplitFractions, Task};
use crate::error::{invalid, Error, Result};
use crate::family::AlterationFamily;
use crate::metrics::{
    binomial_se, outcomes_from_scores, report_from_outcomes, test_sup_scores, CoverageReport,
    DEFAULT_BOOTSTRAP_B,
};
use crate::models::{
    repeated_risk_minimization, BaseModel, Learner, RrmVariant, DEFAULT_RRM_ROUNDS,
};
use crate::rng::{derive_seed, PointKey, Role};
use crate::score::ConformityScorer;

/// Distinct values a group column may take before `group_split` is required.
const MAX_GROUP_VALUES: usize = 16;

/// The Table-1 rule: standard CP more than 30 points below nominal.
pub const FLAG_MARGIN: f64 = 0.30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyChoice {
    UtilityCost,
    IterSearch,
    /// Gaussian random walk `x ↦ x + N(0, step_scale·Σ)` with `k_max` steps.
    Simulator,
    Identity,
}

impl FamilyChoice {
    pub fn name(self) -> &'static str {
        match self {
            FamilyChoice::UtilityCost => "utility-cost",
            FamilyChoice::IterSearch => "iter-search",
            FamilyChoice::Simulator => "simulator",
            FamilyChoice::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    Plain,
    /// Fit by repeated risk minimization against the configured family.
    Strategic,
}

impl ModelChoice {
    pub fn name(self) -> &'static str {
        match self {
            ModelChoice::Plain => "plain",
            ModelChoice::Strategic => "strategic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModeChoice {
    #[default]
    Marginal,
    Group,
    Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        label_col: String,
        task: TaskKind,
    },
    Synthetic {
        spec: SyntheticSpec,
    },
}

/// Fully resolved settings of one experiment; embedded in every JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub alpha: f64,
    /// Levels for the α sweep; empty means `[alpha]`.
    pub alpha_grid: Vec<f64>,
    pub data: DataSource,
    pub fractions: SplitFractions,
    pub family: FamilyChoice,
    pub search: SearchConfig,
    pub direction: UtilityDirection,
    pub model: ModelChoice,
    pub rrm_rounds: usize,
    pub rrm_variant: RrmVariant,
    /// `Ω`: comma-separated class names, or `a..b` for regression.
    pub omega: Option<String>,
    pub mode: ModeChoice,
    pub group_col: Option<String>,
    /// Split the group column at this value instead of by distinct values.
    pub group_split: Option<f64>,
    pub bootstrap_b: usize,
}

impl ExperimentConfig {
    /// Defaults for everything except the data source.
    pub fn new(data: DataSource) -> Self {
        Self {
            seed: 0,
            alpha: 0.1,
            alpha_grid: Vec::new(),
            data,
            fractions: SplitFractions::default(),
            family: FamilyChoice::UtilityCost,
            search: SearchConfig::default(),
            direction: UtilityDirection::Inf,
            model: ModelChoice::Plain,
            rrm_rounds: DEFAULT_RRM_ROUNDS,
            rrm_variant: RrmVariant::FromOriginal,
            omega: None,
            mode: ModeChoice::Marginal,
            group_col: None,
            group_split: None,
            bootstrap_b: DEFAULT_BOOTSTRAP_B,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |a: f64| a > 0.0 && a < 1.0;
        if !in_unit(self.alpha) {
            return Err(invalid(format!(
                "alpha must be in (0, 1), got {}",
                self.alpha
            )));
        }
        if let Some(a) = self.alpha_grid.iter().find(|a| !in_unit(**a)) {
            return Err(invalid(format!("alpha grid value {a} outside (0, 1)")));
        }
        self.fractions.validate()?;
        self.search.validate()?;
        if self.bootstrap_b < 100 {
            return Err(invalid("bootstrap resamples must be at least 100"));
        }
        if self.mode == ModeChoice::Group && self.group_col.is_none() {
            return Err(invalid("group mode needs a group column"));
        }
        if let DataSource::Synthetic { spec } = &self.data {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn alphas(&self) -> Vec<f64> {
        if self.alpha_grid.is_empty() {
            vec![self.alpha]
        } else {
            self.alpha_grid.clone()
        }
    }

    fn rrm_seed(&self) -> u64 {
        derive_seed(&[self.seed, 0x0072_726d])
    }
}

/// Parses `Ω` against a dataset; `None` picks the default region (the first
/// class, or the lower half of the label range).
pub fn parse_omega(spec: Option<&str>, data: &SplitDataset) -> Result<TargetRegion> {
    match (data.task, spec) {
        (Task::Classification { .. }, None) => TargetRegion::classes([0]),
        (Task::Regression, None) => {
            let (lo, hi) = data
                .label_range
                .ok_or_else(|| invalid("no label range for a default target region"))?;
            TargetRegion::interval(lo, lo + (hi - lo) / 2.0)
        }
        (Task::Classification { .. }, Some(s)) => {
            let classes = s
                .split(',')
                .map(str::trim)
                .filter(|n| !n.is_empty())
                .map(|name| {
                    data.class_names
                        .iter()
                        .position(|c| c == name)
                        .ok_or_else(|| invalid(format!("unknown class '{name}' in target region")))
                })
                .collect::<Result<BTreeSet<_>>>()?;
            TargetRegion::classes(classes)
        }
        (Task::Regression, Some(s)) => {
            let (a, b) = s.split_once("..").ok_or_else(|| {
                invalid(format!(
                    "regression target region must be 'a..b', got '{s}'"
                ))
            })?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| invalid(format!("bad bound '{v}' in target region")))
            };
            TargetRegion::interval(parse(a)?, parse(b)?)
        }
    }
}

/// Builds the configured family against `scorer`.
pub fn build_family(
    choice: FamilyChoice,
    scorer: &ConformityScorer,
    omega: &TargetRegion,
    direction: UtilityDirection,
    covariance: &Arc<Covariance>,
    search: &SearchConfig,
) -> Result<AlterationFamily> {
    let utility = || -> Result<Arc<RationalUtility>> {
        Ok(Arc::new(RationalUtility::new(
            scorer.clone(),
            omega.clone(),
            direction,
        )?))
    };
    match choice {
        FamilyChoice::UtilityCost => {
            build_utility_cost_family(utility()?, MahalanobisCost::new(covariance.clone()), search)
        }
        FamilyChoice::IterSearch => build_iterative_family(utility()?, covariance.clone(), search),
        FamilyChoice::Simulator => {
            search.validate()?;
            Ok(build_simulator_family(
                Arc::new(GaussianWalk::new(covariance.clone(), search.step_scale)),
                search.k_max,
            ))
        }
        FamilyChoice::Identity => Ok(AlterationFamily::identity()),
    }
}

fn build_groups(cfg: &ExperimentConfig, data: &SplitDataset) -> Result<Vec<Group>> {
    let Some(col) = &cfg.group_col else {
        return Ok(Vec::new());
    };
    let j = data
        .feature_names
        .iter()
        .position(|f| f == col)
        .ok_or_else(|| Error::MissingColumn(col.clone()))?;
    if let Some(t) = cfg.group_split {
        return Ok(vec![
            Group::new(format!("{col}<{t}"), move |x: &Covariates| x[j] < t),
            Group::new(format!("{col}>={t}"), move |x: &Covariates| x[j] >= t),
        ]);
    }
    let mut values: Vec<f64> = data
        .train
        .iter()
        .chain(&data.calib)
        .chain(&data.test)
        .map(|e| e.x[j])
        .collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    if values.len() > MAX_GROUP_VALUES {
        return Err(invalid(format!(
            "group column '{col}' has {} distinct values; give a split value",
            values.len()
        )));
    }
    Ok(values
        .into_iter()
        .map(|v| Group::new(format!("{col}={v}"), move |x: &Covariates| x[j] == v))
        .collect())
}

/// Loaded data, fitted model, and the family built against it.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub data: SplitDataset,
    /// Estimated from the training covariates.
    pub covariance: Arc<Covariance>,
    pub omega: TargetRegion,
    pub model: BaseModel,
    pub scorer: ConformityScorer,
    pub family: AlterationFamily,
    pub groups: Vec<Group>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<SplitDataset> {
    match &cfg.data {
        DataSource::Csv {
            path,
            label_col,
            task,
        } => ingest_csv(path, label_col, *task, cfg.fractions, cfg.seed),
        DataSource::Synthetic { spec } => generate_synthetic(spec, cfg.seed, cfg.fractions),
    }
}

impl Pipeline {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        Self::prepare_with_model(cfg, None)
    }

    /// Like [`Pipeline::prepare`], reusing `model` instead of fitting one.
    pub fn prepare_with_model(cfg: &ExperimentConfig, model: Option<BaseModel>) -> Result<Self> {
        cfg.validate()?;
        let data = load_data(cfg)?;
        if data.train.is_empty() || data.test.is_empty() {
            return Err(invalid("train and test splits must be nonempty"));
        }
        let xs: Vec<Covariates> = data.train.iter().map(|e| e.x.clone()).collect();
        let covariance = Arc::new(Covariance::estimate(&xs)?);
        let omega = parse_omega(cfg.omega.as_deref(), &data)?;
        let groups = build_groups(cfg, &data)?;
        if cfg.mode == ModeChoice::Label && data.task.classes().is_none() {
            return Err(invalid("label mode needs a classification task"));
        }
        let model = match model {
            Some(m) => {
                if m.task() != data.task {
                    return Err(invalid("saved model does not match the data's task"));
                }
                m
            }
            None => {
                let learner = Learner::for_task(data.task);
                let rounds = match cfg.model {
                    ModelChoice::Plain => 0,
                    ModelChoice::Strategic => cfg.rrm_rounds,
                };
                repeated_risk_minimization(
                    &data.train,
                    &learner,
                    |m: &BaseModel| {
                        build_family(
                            cfg.family,
                            &m.scorer(),
                            &omega,
                            cfg.direction,
                            &covariance,
                            &cfg.search,
                        )
                        .map(|f| f.most_effortful())
                    },
                    rounds,
                    cfg.rrm_seed(),
                    cfg.rrm_variant,
                )?
            }
        };
        let scorer = model.scorer();
        let family = build_family(
            cfg.family,
            &scorer,
            &omega,
            cfg.direction,
            &covariance,
            &cfg.search,
        )?;
        Ok(Self {
            config: cfg.clone(),
            data,
            covariance,
            omega,
            model,
            scorer,
            family,
            groups,
        })
    }

    pub fn mode_spec(&self) -> ModeSpec {
        match self.config.mode {
            ModeChoice::Marginal => ModeSpec::Marginal,
            ModeChoice::Group => ModeSpec::GroupConditional(self.groups.clone()),
            ModeChoice::Label => ModeSpec::LabelConditional,
        }
    }

    /// Calibration supremum scores under `family`.
    pub fn calib_scores(&self, family: &AlterationFamily) -> Result<Vec<f64>> {
        sup_scores(&self.data.calib, &self.scorer, family, self.config.seed)
    }

    /// Test supremum scores under `family`.
    pub fn test_scores(&self, family: &AlterationFamily) -> Result<Vec<f64>> {
        test_sup_scores(&self.scorer, &self.data.test, family, self.config.seed)
    }

    pub fn calibrate_from(
        &self,
        scores: &[f64],
        family: &AlterationFamily,
        alpha: f64,
    ) -> Result<CalibratedPredictor> {
        let pred = calibrate_with_scores(
            &self.data.calib,
            scores,
            &self.scorer,
            family,
            alpha,
            &self.mode_spec(),
        )?;
        Ok(match self.data.task {
            Task::Regression => pred.with_label_range(self.data.label_range),
            Task::Classification { .. } => pred,
        })
    }

    /// Strategic predictor (configured family) and standard predictor
    /// (identity family) at level `alpha`.
    pub fn calibrate_pair(&self, alpha: f64) -> Result<(CalibratedPredictor, CalibratedPredictor)> {
        let identity = AlterationFamily::identity();
        let strat = self.calibrate_from(&self.calib_scores(&self.family)?, &self.family, alpha)?;
        let std = self.calibrate_from(&self.calib_scores(&identity)?, &identity, alpha)?;
        Ok((strat, std))
    }

    /// Rebuilds a predictor from saved thresholds.
    pub fn restore(
        &self,
        summary: &ThresholdSummary,
        family: &AlterationFamily,
        alpha: f64,
    ) -> Result<CalibratedPredictor> {
        let t = |v: &Option<f64>| v.unwrap_or(f64::INFINITY);
        let mode = match summary {
            ThresholdSummary::Marginal { threshold } => CalibrationMode::Marginal {
                threshold: t(threshold),
            },
            ThresholdSummary::GroupConditional { groups } => {
                let thresholds = self
                    .groups
                    .iter()
                    .map(|g| {
                        groups
                            .iter()
                            .find(|(name, _)| name == g.name())
                            .map(|(_, v)| t(v))
                            .ok_or_else(|| {
                                invalid(format!("saved calibration lacks group '{}'", g.name()))
                            })
                    })
                    .collect::<Result<Vec<_>>>()?;
                CalibrationMode::GroupConditional {
                    groups: self.groups.clone(),
                    thresholds,
                }
            }
            ThresholdSummary::LabelConditional { thresholds } => {
                CalibrationMode::LabelConditional {
                    thresholds: thresholds.iter().map(t).collect(),
                }
            }
        };
        let pred = CalibratedPredictor::from_parts(
            self.scorer.clone(),
            mode,
            alpha,
            family.clone(),
            self.data.calib.len(),
        )?;
        Ok(pred.with_label_range(self.data.label_range))
    }
}

/// Paths of the files a runner wrote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outputs {
    pub csv: PathBuf,
    pub json: PathBuf,
}

fn write_outputs<R: Serialize, J: Serialize>(
    dir: &Path,
    stem: &str,
    rows: &[R],
    report: &J,
) -> Result<Outputs> {
    fs::create_dir_all(dir)?;
    let csv = dir.join(format!("{stem}.csv"));
    let json = dir.join(format!("{stem}.json"));
    let mut w = csv::Writer::from_path(&csv)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut body = serde_json::to_string_pretty(report)?;
    body.push('\n');
    fs::write(&json, body)?;
    Ok(Outputs { csv, json })
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// One row of `alpha_sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub method: String,
    pub strategic_coverage: f64,
    pub coverage_lo: Option<f64>,
    pub coverage_hi: Option<f64>,
    pub plain_coverage: f64,
    pub avg_set_size: Option<f64>,
    pub size_lo: Option<f64>,
    pub size_hi: Option<f64>,
    /// Marginal threshold; empty when infinite or not marginal.
    pub threshold: Option<f64>,
    pub n_calib: usize,
    pub n_test: usize,
}

impl AlphaRow {
    fn new(method: &str, pred: &CalibratedPredictor, r: &CoverageReport) -> Self {
        Self {
            alpha: pred.alpha(),
            method: method.to_owned(),
            strategic_coverage: r.strategic_coverage,
            coverage_lo: r.ci95.strategic_coverage.lo,
            coverage_hi: r.ci95.strategic_coverage.hi,
            plain_coverage: r.plain_coverage,
            avg_set_size: r.avg_set_size,
            size_lo: r.ci95.avg_set_size.lo,
            size_hi: r.ci95.avg_set_size.hi,
            threshold: pred.threshold().and_then(finite),
            n_calib: pred.n_calib(),
            n_test: r.n_test,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AlphaSweep {
    pub config: ExperimentConfig,
    pub family_members: usize,
    pub rows: Vec<AlphaRow>,
}

/// For each α: calibrate standard and strategic predictors and evaluate both
/// under the configured family.
pub fn run_alpha_sweep(cfg: &ExperimentConfig) -> Result<AlphaSweep> {
    let p = Pipeline::prepare(cfg)?;
    let identity = AlterationFamily::identity();
    let strat_scores = p.calib_scores(&p.family)?;
    let std_scores = p.calib_scores(&identity)?;
    let test_scores = p.test_scores(&p.family)?;
    let mut rows = Vec::new();
    for alpha in cfg.alphas() {
        let strat = p.calibrate_from(&strat_scores, &p.family, alpha)?;
        let std = p.calibrate_from(&std_scores, &identity, alpha)?;
        for (method, pred) in [("strategic", &strat), ("standard", &std)] {
            let out = outcomes_from_scores(pred, &p.data.test, &test_scores)?;
            let report =
                report_from_outcomes(pred, None, &p.data.test, &out, cfg.seed, cfg.bootstrap_b)?;
            rows.push(AlphaRow::new(method, pred, &report));
        }
    }
    Ok(AlphaSweep {
        config: cfg.clone(),
        family_members: p.family.len(),
        rows,
    })
}

/// One cell of the `k_cal × k_test` matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KmaxRow {
    pub k_cal: usize,
    pub k_test: usize,
    pub strategic_coverage: f64,
    pub coverage_lo: Option<f64>,
    pub coverage_hi: Option<f64>,
    pub se: f64,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct KmaxSweep {
    pub config: ExperimentConfig,
    pub k_cal: Vec<usize>,
    pub k_test: Vec<usize>,
    pub rows: Vec<KmaxRow>,
}

/// Per-point scores of every trajectory state `X⁽⁰⁾..X⁽ᴷ⁾`.
fn state_scores(
    scorer: &ConformityScorer,
    family: &AlterationFamily,
    points: &[Example],
    seed: u64,
    role: Role,
) -> Result<Vec<Vec<f64>>> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            family
                .realize(&e.x, &PointKey::new(seed, role, i))
                .iter()
                .map(|x| scorer.score(x, &e.y))
                .collect()
        })
        .collect()
}

/// `max(scores[0..=k])` per point: the supremum score under the family
/// truncated to `k` steps.
fn prefix_sup(states: &[Vec<f64>], k: usize) -> Vec<f64> {
    states
        .iter()
        .map(|s| s[..=k].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Calibrates with trajectories of `k_cal` steps and evaluates under
/// `k_test` steps, for every pair. Needs a shared-trajectory family.
pub fn run_kmax_sweep(
    cfg: &ExperimentConfig,
    k_cal: &[usize],
    k_test: &[usize],
) -> Result<KmaxSweep> {
    if k_cal.is_empty() || k_test.is_empty() {
        return Err(invalid("k lists must be nonempty"));
    }
    let k_top = k_cal.iter().chain(k_test).copied().max().expect("nonempty");
    let mut cfg_top = cfg.clone();
    cfg_top.search.k_max = k_top;
    let p = Pipeline::prepare(&cfg_top)?;
    if !p.family.is_shared_trajectory() {
        return Err(invalid(format!(
            "the k_max sweep needs a trajectory family, not {}",
            cfg.family.name()
        )));
    }
    let calib_states = state_scores(
        &p.scorer,
        &p.family,
        &p.data.calib,
        cfg.seed,
        Role::Calibration,
    )?;
    let test_states = state_scores(&p.scorer, &p.family, &p.data.test, cfg.seed, Role::Test)?;
    let n_test = p.data.test.len();
    let mut rows = Vec::new();
    for &kc in k_cal {
        let fam = p.family.truncated(kc + 1)?;
        let pred = p.calibrate_from(&prefix_sup(&calib_states, kc), &fam, cfg.alpha)?;
        for &kt in k_test {
            let out = outcomes_from_scores(&pred, &p.data.test, &prefix_sup(&test_states, kt))?;
            let report =
                report_from_outcomes(&pred, None, &p.data.test, &out, cfg.seed, cfg.bootstrap_b)?;
            rows.push(KmaxRow {
                k_cal: kc,
                k_test: kt,
                strategic_coverage: report.strategic_coverage,
                coverage_lo: report.ci95.strategic_coverage.lo,
                coverage_hi: report.ci95.strategic_coverage.hi,
                se: binomial_se(report.strategic_coverage, n_test),
                threshold: pred.threshold().and_then(finite),
            });
        }
    }
    Ok(KmaxSweep {
        config: cfg.clone(),
        k_cal: k_cal.to_vec(),
        k_test: k_test.to_vec(),
        rows,
    })
}

/// One `(model, family)` cell of the table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub model: String,
    pub family: String,
    pub ours_coverage: f64,
    pub ours_lo: Option<f64>,
    pub ours_hi: Option<f64>,
    pub standard_coverage: f64,
    pub standard_lo: Option<f64>,
    pub standard_hi: Option<f64>,
    pub avg_size_diff: Option<f64>,
    pub diff_lo: Option<f64>,
    pub diff_hi: Option<f64>,
    /// Standard CP more than 30 points below `1 − α`.
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Table {
    pub config: ExperimentConfig,
    pub rows: Vec<TableRow>,
}

/// Strategic coverage of ours vs standard CP, and the set-size difference,
/// for every model × family combination.
pub fn run_table(
    cfg: &ExperimentConfig,
    models: &[ModelChoice],
    families: &[FamilyChoice],
) -> Result<Table> {
    if models.is_empty() || families.is_empty() {
        return Err(invalid("table needs at least one model and one family"));
    }
    let mut rows = Vec::new();
    for &model in models {
        for &family in families {
            let cell_cfg = ExperimentConfig {
                model,
                family,
                ..cfg.clone()
            };
            let p = Pipeline::prepare(&cell_cfg)?;
            let (strat, std) = p.calibrate_pair(cfg.alpha)?;
            let test_scores = p.test_scores(&p.family)?;
            let test = &p.data.test;
            let ours_out = outcomes_from_scores(&strat, test, &test_scores)?;
            let std_out = outcomes_from_scores(&std, test, &test_scores)?;
            let ours = report_from_outcomes(
                &strat,
                Some(&std),
                test,
                &ours_out,
                cfg.seed,
                cfg.bootstrap_b,
            )?;
            let standard =
                report_from_outcomes(&std, None, test, &std_out, cfg.seed, cfg.bootstrap_b)?;
            let diff_ci = ours.ci95.avg_size_diff;
            rows.push(TableRow {
                model: model.name().to_owned(),
                family: family.name().to_owned(),
                ours_coverage: ours.strategic_coverage,
                ours_lo: ours.ci95.strategic_coverage.lo,
                ours_hi: ours.ci95.strategic_coverage.hi,
                standard_coverage: standard.strategic_coverage,
                standard_lo: standard.ci95.strategic_coverage.lo,
                standard_hi: standard.ci95.strategic_coverage.hi,
                avg_size_diff: ours.avg_size_diff,
                diff_lo: diff_ci.and_then(|c| c.lo),
                diff_hi: diff_ci.and_then(|c| c.hi),
                flagged: standard.strategic_coverage < 1.0 - cfg.alpha - FLAG_MARGIN,
            });
        }
    }
    Ok(Table {
        config: cfg.clone(),
        rows,
    })
}

/// One point of the misspecification curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MisspecRow {
    pub lambda_noise: f64,
    pub strategic_coverage: f64,
    pub coverage_lo: Option<f64>,
    pub coverage_hi: Option<f64>,
    pub se: f64,
    /// `1 − α − TV`, only where the TV term has a closed form (`λ = 0`).
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MisspecSweep {
    pub config: ExperimentConfig,
    pub rows: Vec<MisspecRow>,
}

/// Calibrates once with the clean family, then evaluates under
/// `misspecify(family, λ, Σ)` for each `λ` in `grid`.
pub fn run_misspec_sweep(cfg: &ExperimentConfig, grid: &[f64]) -> Result<MisspecSweep> {
    if grid.is_empty() {
        return Err(invalid("noise grid must be nonempty"));
    }
    let p = Pipeline::prepare(cfg)?;
    let pred = p.calibrate_from(&p.calib_scores(&p.family)?, &p.family, cfg.alpha)?;
    let n_test = p.data.test.len();
    let rows = grid
        .iter()
        .map(|&lambda| {
            let fam = misspecify(&p.family, lambda, p.covariance.clone())?;
            let out = outcomes_from_scores(&pred, &p.data.test, &p.test_scores(&fam)?)?;
            let r =
                report_from_outcomes(&pred, None, &p.data.test, &out, cfg.seed, cfg.bootstrap_b)?;
            Ok(MisspecRow {
                lambda_noise: lambda,
                strategic_coverage: r.strategic_coverage,
                coverage_lo: r.ci95.strategic_coverage.lo,
                coverage_hi: r.ci95.strategic_coverage.hi,
                se: binomial_se(r.strategic_coverage, n_test),
                bound: (lambda == 0.0).then_some(1.0 - cfg.alpha),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MisspecSweep {
        config: cfg.clone(),
        rows,
    })
}

/// Contents of `calibration.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedCalibration {
    pub config: ExperimentConfig,
    pub model: BaseModel,
    pub alpha: f64,
    pub n_calib: usize,
    pub strategic: ThresholdSummary,
    pub standard: ThresholdSummary,
}

/// One row of `calibration.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdRow {
    pub method: String,
    /// `all`, a group name, or a class name.
    pub stratum: String,
    /// Empty means `+∞` (every label is included).
    pub threshold: Option<f64>,
}

fn threshold_rows(method: &str, s: &ThresholdSummary, class_names: &[String]) -> Vec<ThresholdRow> {
    let row = |stratum: String, threshold: Option<f64>| ThresholdRow {
        method: method.to_owned(),
        stratum,
        threshold,
    };
    match s {
        ThresholdSummary::Marginal { threshold } => vec![row("all".into(), *threshold)],
        ThresholdSummary::GroupConditional { groups } => {
            groups.iter().map(|(g, t)| row(g.clone(), *t)).collect()
        }
        ThresholdSummary::LabelConditional { thresholds } => thresholds
            .iter()
            .enumerate()
            .map(|(k, t)| {
                row(
                    class_names.get(k).cloned().unwrap_or_else(|| k.to_string()),
                    *t,
                )
            })
            .collect(),
    }
}

pub fn run_calibrate(cfg: &ExperimentConfig) -> Result<(SavedCalibration, Vec<ThresholdRow>)> {
    let p = Pipeline::prepare(cfg)?;
    let (strat, std) = p.calibrate_pair(cfg.alpha)?;
    let saved = SavedCalibration {
        config: cfg.clone(),
        model: p.model.clone(),
        alpha: cfg.alpha,
        n_calib: strat.n_calib(),
        strategic: strat.summary(),
        standard: std.summary(),
    };
    let mut rows = threshold_rows("strategic", &saved.strategic, &p.data.class_names);
    rows.extend(threshold_rows(
        "standard",
        &saved.standard,
        &p.data.class_names,
    ));
    Ok((saved, rows))
}

/// One row of `evaluate.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluateRow {
    pub method: String,
    pub strategic_coverage: f64,
    pub coverage_lo: Option<f64>,
    pub coverage_hi: Option<f64>,
    pub plain_coverage: f64,
    pub avg_set_size: Option<f64>,
    pub size_lo: Option<f64>,
    pub size_hi: Option<f64>,
    pub avg_size_diff: Option<f64>,
}

impl EvaluateRow {
    fn new(method: &str, r: &CoverageReport) -> Self {
        Self {
            method: method.to_owned(),
            strategic_coverage: r.strategic_coverage,
            coverage_lo: r.ci95.strategic_coverage.lo,
            coverage_hi: r.ci95.strategic_coverage.hi,
            plain_coverage: r.plain_coverage,
            avg_set_size: r.avg_set_size,
            size_lo: r.ci95.avg_set_size.lo,
            size_hi: r.ci95.avg_set_size.hi,
            avg_size_diff: r.avg_size_diff,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    pub config: ExperimentConfig,
    pub strategic: CoverageReport,
    pub standard: CoverageReport,
}

/// Evaluates strategic and standard predictors on the test split, either
/// freshly calibrated from `cfg` or restored from a saved calibration.
pub fn run_evaluate(
    cfg: &ExperimentConfig,
    saved: Option<&SavedCalibration>,
) -> Result<Evaluation> {
    let (cfg, p, strat, std) = match saved {
        Some(s) => {
            let cfg = s.config.clone();
            let p = Pipeline::prepare_with_model(&cfg, Some(s.model.clone()))?;
            let strat = p.restore(&s.strategic, &p.family, s.alpha)?;
            let std = p.restore(&s.standard, &AlterationFamily::identity(), s.alpha)?;
            (cfg, p, strat, std)
        }
        None => {
            let p = Pipeline::prepare(cfg)?;
            let (strat, std) = p.calibrate_pair(cfg.alpha)?;
            (cfg.clone(), p, strat, std)
        }
    };
    let test = &p.data.test;
    let test_scores = p.test_scores(&p.family)?;
    let ours = report_from_outcomes(
        &strat,
        Some(&std),
        test,
        &outcomes_from_scores(&strat, test, &test_scores)?,
        cfg.seed,
        cfg.bootstrap_b,
    )?;
    let standard = report_from_outcomes(
        &std,
        None,
        test,
        &outcomes_from_scores(&std, test, &test_scores)?,
        cfg.seed,
        cfg.bootstrap_b,
    )?;
    Ok(Evaluation {
        config: cfg,
        strategic: ours,
        standard,
    })
}

pub fn write_alpha_sweep(dir: &Path, s: &AlphaSweep) -> Result<Outputs> {
    write_outputs(dir, "alpha_sweep", &s.rows, s)
}

pub fn write_kmax_sweep(dir: &Path, s: &KmaxSweep) -> Result<Outputs> {
    write_outputs(dir, "kmax_sweep", &s.rows, s)
}

pub fn write_table(dir: &Path, t: &Table) -> Result<Outputs> {
    write_outputs(dir, "table", &t.rows, t)
}

pub fn write_misspec_sweep(dir: &Path, s: &MisspecSweep) -> Result<Outputs> {
    write_outputs(dir, "misspec", &s.rows, s)
}

pub fn write_calibration(
    dir: &Path,
    saved: &SavedCalibration,
    rows: &[ThresholdRow],
) -> Result<Outputs> {
    write_outputs(dir, "calibration", rows, saved)
}

pub fn write_evaluation(dir: &Path, e: &Evaluation) -> Result<Outputs> {
    let rows = [
        EvaluateRow::new("strategic", &e.strategic),
        EvaluateRow::new("standard", &e.standard),
    ];
    write_outputs(dir, "evaluate", &rows, e)
}

pub fn read_calibration(path: &Path) -> Result<SavedCalibration> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticKind;
    use crate::family::strategic_score;

    fn small_cls() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(DataSource::Synthetic {
            spec: SyntheticSpec {
                d: 3,
                n: 300,
                kind: SyntheticKind::LogisticClassification { classes: 3 },
                weight_seed: 1,
                weight_scale: 2.0,
            },
        });
        cfg.family = FamilyChoice::IterSearch;
        cfg.bootstrap_b = 200;
        cfg.seed = 4;
        cfg
    }

    fn small_reg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(DataSource::Synthetic {
            spec: SyntheticSpec {
                d: 2,
                n: 200,
                kind: SyntheticKind::LinearRegression { noise: 0.5 },
                weight_seed: 3,
                weight_scale: 1.0,
            },
        });
        cfg.bootstrap_b = 200;
        cfg.search.candidate_count = 50;
        cfg
    }

    #[test]
    fn omega_parsing() {
        let cfg = small_cls();
        let data = load_data(&cfg).unwrap();
        assert_eq!(
            parse_omega(Some("1, 2"), &data).unwrap(),
            TargetRegion::classes([1, 2]).unwrap()
        );
        assert_eq!(
            parse_omega(None, &data).unwrap(),
            TargetRegion::classes([0]).unwrap()
        );
        assert!(parse_omega(Some("7"), &data).is_err());
        let reg = load_data(&small_reg()).unwrap();
        assert_eq!(
            parse_omega(Some("-1..2.5"), &reg).unwrap(),
            TargetRegion::interval(-1.0, 2.5).unwrap()
        );
        assert!(parse_omega(Some("3"), &reg).is_err());
        let (lo, hi) = reg.label_range.unwrap();
        assert_eq!(
            parse_omega(None, &reg).unwrap(),
            TargetRegion::interval(lo, lo + (hi - lo) / 2.0).unwrap()
        );
    }

    #[test]
    fn prefix_scores_match_truncated_families() {
        let mut cfg = small_cls();
        cfg.search.k_max = 4;
        let p = Pipeline::prepare(&cfg).unwrap();
        let states = state_scores(
            &p.scorer,
            &p.family,
            &p.data.calib,
            cfg.seed,
            Role::Calibration,
        )
        .unwrap();
        for k in [0, 2, 4] {
            let fam = p.family.truncated(k + 1).unwrap();
            let direct = sup_scores(&p.data.calib, &p.scorer, &fam, cfg.seed).unwrap();
            assert_eq!(prefix_sup(&states, k), direct);
        }
        // and against the per-point primitive
        let e = &p.data.calib[3];
        let s = strategic_score(
            &p.scorer,
            &p.family,
            &e.x,
            &e.y,
            &PointKey::new(cfg.seed, Role::Calibration, 3),
        )
        .unwrap();
        assert_eq!(s, prefix_sup(&states, 4)[3]);
    }

    #[test]
    fn identity_sweep_rows_coincide() {
        let mut cfg = small_reg();
        cfg.family = FamilyChoice::Identity;
        cfg.alpha_grid = vec![0.1, 0.2];
        let s = run_alpha_sweep(&cfg).unwrap();
        assert_eq!(s.rows.len(), 4);
        for pair in s.rows.chunks(2) {
            assert_eq!(pair[0].strategic_coverage, pair[1].strategic_coverage);
            assert_eq!(pair[0].threshold, pair[1].threshold);
        }
    }

    #[test]
    fn kmax_sweep_rejects_member_families() {
        let cfg = small_reg();
        assert!(run_kmax_sweep(&cfg, &[1], &[1]).is_err());
        assert!(run_kmax_sweep(&small_cls(), &[], &[1]).is_err());
    }

    #[test]
    fn kmax_diagonal_cells_are_protected() {
        let cfg = small_cls();
        let s = run_kmax_sweep(&cfg, &[0, 2], &[0, 2]).unwrap();
        assert_eq!(s.rows.len(), 4);
        // k_test ≤ k_cal: the calibration family dominates the test family
        for r in s.rows.iter().filter(|r| r.k_test <= r.k_cal) {
            assert!(r.strategic_coverage >= 0.9 - 3.0 * 0.03 - 0.05, "{r:?}");
        }
        // a fixed threshold can only lose coverage as k_test grows
        let by = |kc, kt| {
            s.rows
                .iter()
                .find(|r| r.k_cal == kc && r.k_test == kt)
                .unwrap()
                .strategic_coverage
        };
        assert!(by(0, 2) <= by(0, 0));
    }

    #[test]
    fn group_mode_needs_groups_and_builds_them() {
        let mut cfg = small_reg();
        cfg.mode = ModeChoice::Group;
        assert!(cfg.validate().is_err());
        cfg.group_col = Some("x0".into());
        assert!(Pipeline::prepare(&cfg).is_err());
        cfg.group_split = Some(0.0);
        let p = Pipeline::prepare(&cfg).unwrap();
        assert_eq!(p.groups.len(), 2);
        let (strat, _) = p.calibrate_pair(0.1).unwrap();
        assert!(matches!(
            strat.mode(),
            CalibrationMode::GroupConditional { .. }
        ));
        cfg.group_col = Some("nope".into());
        assert!(matches!(
            Pipeline::prepare(&cfg),
            Err(Error::MissingColumn(_))
        ));
    }

    #[test]
    fn saved_calibration_restores_identical_evaluation() {
        let mut cfg = small_cls();
        cfg.mode = ModeChoice::Label;
        let (saved, rows) = run_calibrate(&cfg).unwrap();
        assert_eq!(rows.len(), 6);
        let json = serde_json::to_string(&saved).unwrap();
        let back: SavedCalibration = serde_json::from_str(&json).unwrap();
        let fresh = run_evaluate(&cfg, None).unwrap();
        let restored = run_evaluate(&cfg, Some(&back)).unwrap();
        assert_eq!(fresh.strategic, restored.strategic);
        assert_eq!(fresh.standard, restored.standard);
    }

    #[test]
    fn strategic_model_and_table_run() {
        let mut cfg = small_reg();
        cfg.rrm_rounds = 2;
        let t = run_table(
            &cfg,
            &[ModelChoice::Plain, ModelChoice::Strategic],
            &[FamilyChoice::UtilityCost],
        )
        .unwrap();
        assert_eq!(t.rows.len(), 2);
        for r in &t.rows {
            // the family contains a near-identity member
            assert!(r.avg_size_diff.unwrap() >= -1e-12, "{r:?}");
        }
    }

    #[test]
    fn misspec_zero_noise_reports_bound() {
        let mut cfg = small_cls();
        cfg.search.k_max = 1;
        let s = run_misspec_sweep(&cfg, &[0.0, 0.5]).unwrap();
        assert_eq!(s.rows[0].bound, Some(0.9));
        assert_eq!(s.rows[1].bound, None);
    }
}
