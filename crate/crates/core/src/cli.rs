//! Command-line front end. Every subcommand resolves its flags into an
//! [`ExperimentConfig`], runs, and writes CSV + JSON into `--out`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::alterations::{SearchConfig, UtilityDirection};
use crate::data::{write_csv, SyntheticKind, SyntheticSpec, TaskKind};
use crate::domain::SplitFractions;
use crate::error::{invalid, Result};
use crate::experiment::{
    read_calibration, run_alpha_sweep, run_calibrate, run_evaluate, run_kmax_sweep,
    run_misspec_sweep, run_table, write_alpha_sweep, write_calibration, write_evaluation,
    write_kmax_sweep, write_misspec_sweep, write_table, DataSource, ExperimentConfig, FamilyChoice,
    ModeChoice, ModelChoice, Outputs,
};
use crate::models::RrmVariant;

#[derive(Debug, Parser)]
#[command(
    name = "strategic-cp",
    version,
    about = "Conformal prediction under strategic covariate alterations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CliTask {
    Reg,
    Cls,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset to <out>/data.csv.
    Gen(Common),
    /// Calibrate strategic and standard thresholds.
    Calibrate(Common),
    /// Evaluate strategic and standard predictors on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// A calibration.json to restore instead of calibrating afresh; its
        /// embedded config replaces the other flags.
        #[arg(long)]
        predictor: Option<PathBuf>,
    },
    /// Coverage and set size over a grid of α.
    SweepAlpha(Common),
    /// Coverage for every (k_cal, k_test) pair of trajectory lengths.
    SweepKmax {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        k_cal: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6")]
        k_test: Vec<usize>,
    },
    /// Ours vs standard CP over models × families.
    Table {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "plain,strategic")]
        models: Vec<ModelChoice>,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "utility-cost,iter-search,simulator"
        )]
        families: Vec<FamilyChoice>,
    },
    /// Coverage under Gaussian-perturbed alterations.
    Misspec {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.5,1")]
        noise_grid: Vec<f64>,
    },
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, value_delimiter = ',')]
    pub alpha_grid: Vec<f64>,
    /// Input CSV with a header row; synthetic data when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "y")]
    pub label_col: String,
    #[arg(long, value_enum, default_value = "cls")]
    pub task: CliTask,
    #[arg(long, value_enum, default_value = "utility-cost")]
    pub family: FamilyChoice,
    #[arg(long, default_value_t = 3)]
    pub kmax: usize,
    #[arg(long, value_delimiter = ',', default_value = "1e-7,1,5")]
    pub lambda_grid: Vec<f64>,
    /// Proposals for the one-shot utility-cost search.
    #[arg(long, default_value_t = 500)]
    pub candidates: usize,
    /// Proposals per iterative step.
    #[arg(long, default_value_t = 2)]
    pub step_candidates: usize,
    /// Proposal covariance is this multiple of Σ.
    #[arg(long, default_value_t = 0.2)]
    pub step_scale: f64,
    #[arg(long, value_enum, default_value = "inf")]
    pub direction: UtilityDirection,
    /// Target region: class names `a,b` or an interval `lo..hi`.
    #[arg(long, allow_hyphen_values = true)]
    pub omega: Option<String>,
    #[arg(long, value_enum, default_value = "marginal")]
    pub mode: ModeChoice,
    #[arg(long)]
    pub group_col: Option<String>,
    /// Split the group column at this value (two groups).
    #[arg(long)]
    pub group_split: Option<f64>,
    #[arg(long, value_enum, default_value = "plain")]
    pub model: ModelChoice,
    #[arg(long, default_value_t = 10)]
    pub rrm_rounds: usize,
    #[arg(long, value_enum, default_value = "from-original")]
    pub rrm_variant: RrmVariant,
    /// train,calib,test fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.4,0.3,0.3")]
    pub fractions: Vec<f64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub bootstrap_b: usize,
    /// Synthetic: number of points.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Synthetic: dimension.
    #[arg(long, default_value_t = 5)]
    pub d: usize,
    /// Synthetic classification: number of classes.
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Synthetic regression: label noise standard deviation.
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub weight_seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub weight_scale: f64,
}

impl Common {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            d: self.d,
            n: self.n,
            kind: match self.task {
                CliTask::Reg => SyntheticKind::LinearRegression { noise: self.noise },
                CliTask::Cls => SyntheticKind::LogisticClassification {
                    classes: self.classes,
                },
            },
            weight_seed: self.weight_seed,
            weight_scale: self.weight_scale,
        }
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        let data = match &self.data {
            Some(path) => DataSource::Csv {
                path: path.clone(),
                label_col: self.label_col.clone(),
                task: match self.task {
                    CliTask::Reg => TaskKind::Regression,
                    CliTask::Cls => TaskKind::Classification,
                },
            },
            None => DataSource::Synthetic {
                spec: self.synthetic_spec(),
            },
        };
        let [train, calib, test] = self.fractions[..] else {
            return Err(invalid("--fractions needs three values"));
        };
        let cfg = ExperimentConfig {
            seed: self.seed,
            alpha: self.alpha,
            alpha_grid: self.alpha_grid.clone(),
            data,
            fractions: SplitFractions { train, calib, test },
            family: self.family,
            search: SearchConfig {
                candidates_per_step: self.step_candidates,
                step_scale: self.step_scale,
                include_zero_step: true,
                k_max: self.kmax,
                candidate_count: self.candidates,
                lambda_grid: self.lambda_grid.clone(),
            },
            direction: self.direction,
            model: self.model,
            rrm_rounds: self.rrm_rounds,
            rrm_variant: self.rrm_variant,
            omega: self.omega.clone(),
            mode: self.mode,
            group_col: self.group_col.clone(),
            group_split: self.group_split,
            bootstrap_b: self.bootstrap_b,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn gen(common: &Common) -> Result<Vec<PathBuf>> {
    if common.data.is_some() {
        return Err(invalid("gen writes synthetic data; drop --data"));
    }
    let spec = common.synthetic_spec();
    let source = spec.source(common.seed)?;
    std::fs::create_dir_all(&common.out)?;
    let csv = common.out.join("data.csv");
    write_csv(
        &csv,
        &source,
        &spec.feature_names(),
        &common.label_col,
        &spec.class_names(),
    )?;
    let json = common.out.join("gen.json");
    let meta =
        serde_json::json!({ "seed": common.seed, "label_col": common.label_col, "spec": spec });
    std::fs::write(&json, serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(vec![csv, json])
}

/// Runs one parsed command and returns the files it wrote.
pub fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    let files = |o: Outputs| vec![o.csv, o.json];
    match cli.command {
        Command::Gen(c) => gen(&c),
        Command::Calibrate(c) => {
            let (saved, rows) = run_calibrate(&c.config()?)?;
            write_calibration(&c.out, &saved, &rows).map(files)
        }
        Command::Evaluate { common, predictor } => {
            let saved = predictor.as_deref().map(read_calibration).transpose()?;
            let cfg = match &saved {
                Some(s) => s.config.clone(),
                None => common.config()?,
            };
            write_evaluation(&common.out, &run_evaluate(&cfg, saved.as_ref())?).map(files)
        }
        Command::SweepAlpha(c) => {
            write_alpha_sweep(&c.out, &run_alpha_sweep(&c.config()?)?).map(files)
        }
        Command::SweepKmax {
            common,
            k_cal,
            k_test,
        } => {
            let s = run_kmax_sweep(&common.config()?, &k_cal, &k_test)?;
            write_kmax_sweep(&common.out, &s).map(files)
        }
        Command::Table {
            common,
            models,
            families,
        } => write_table(
            &common.out,
            &run_table(&common.config()?, &models, &families)?,
        )
        .map(files),
        Command::Misspec { common, noise_grid } => {
            let s = run_misspec_sweep(&common.config()?, &noise_grid)?;
            write_misspec_sweep(&common.out, &s).map(files)
        }
    }
}
