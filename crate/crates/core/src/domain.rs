//! Data types shared by every stage: covariates, labels, splits and
//! prediction sets.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// A finite real feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Covariates(Vec<f64>);

impl Covariates {
    /// Builds covariates, rejecting empty vectors and non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("covariates must have at least one entry"));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self(values))
    }

    /// Skips validation. Used on the hot path by alterations whose outputs are
    /// sums of finite values.
    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `self + delta`, elementwise.
    pub fn shifted(&self, delta: &[f64]) -> Self {
        debug_assert_eq!(delta.len(), self.0.len());
        Self(self.0.iter().zip(delta).map(|(a, b)| a + b).collect())
    }
}

impl std::ops::Index<usize> for Covariates {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Continuous(f64),
    Categorical(usize),
}

impl Label {
    pub fn as_continuous(&self) -> Option<f64> {
        match *self {
            Label::Continuous(v) => Some(v),
            Label::Categorical(_) => None,
        }
    }

    pub fn as_class(&self) -> Option<usize> {
        match *self {
            Label::Categorical(c) => Some(c),
            Label::Continuous(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Regression,
    Classification { classes: usize },
}

impl Task {
    /// Checks a label against the task's label space.
    pub fn check_label(&self, label: &Label) -> Result<()> {
        match (self, label) {
            (Task::Regression, Label::Continuous(v)) if v.is_finite() => Ok(()),
            (Task::Regression, Label::Continuous(_)) => {
                Err(Error::LabelKind("continuous label is not finite".into()))
            }
            (Task::Classification { classes }, Label::Categorical(c)) if c < classes => Ok(()),
            (Task::Classification { classes }, Label::Categorical(c)) => Err(Error::LabelKind(
                format!("class {c} out of range for {classes} classes"),
            )),
            (Task::Regression, Label::Categorical(_)) => Err(Error::LabelKind(
                "categorical label in a regression task".into(),
            )),
            (Task::Classification { .. }, Label::Continuous(_)) => Err(Error::LabelKind(
                "continuous label in a classification task".into(),
            )),
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match *self {
            Task::Classification { classes } => Some(classes),
            Task::Regression => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Covariates,
    pub y: Label,
}

impl Example {
    pub fn new(x: Covariates, y: Label) -> Self {
        Self { x, y }
    }
}

/// Train / calibration / test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub calib: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.4,
            calib: 0.3,
            test: 0.3,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.calib, self.test];
        if parts.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(invalid("split fractions must be positive"));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("split fractions sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Split sizes for `n` points; the test split absorbs rounding.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = ((self.train * n as f64).round() as usize).min(n);
        let calib = ((self.calib * n as f64).round() as usize).min(n - train);
        (train, calib, n - train - calib)
    }
}

/// Train, calibration and test splits drawn from one source list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<Example>,
    pub calib: Vec<Example>,
    pub test: Vec<Example>,
    pub dim: usize,
    pub task: Task,
    /// `[min, max]` of continuous labels over all splits.
    pub label_range: Option<(f64, f64)>,
    pub feature_names: Vec<String>,
    /// Class names in index order (classification only).
    pub class_names: Vec<String>,
}

impl SplitDataset {
    /// Shuffles `source` deterministically and splits it by `fractions`.
    pub fn from_source(
        source: Vec<Example>,
        task: Task,
        fractions: SplitFractions,
        seed: u64,
        feature_names: Vec<String>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        use rand::seq::SliceRandom;

        fractions.validate()?;
        let dim = source
            .first()
            .map(|e| e.x.dim())
            .ok_or_else(|| invalid("dataset is empty"))?;
        for e in &source {
            if e.x.dim() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: e.x.dim(),
                });
            }
            task.check_label(&e.y)?;
        }
        let label_range = match task {
            Task::Regression => {
                let ys = source.iter().filter_map(|e| e.y.as_continuous());
                let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| {
                    (lo.min(y), hi.max(y))
                });
                Some((lo, hi))
            }
            Task::Classification { .. } => None,
        };

        let mut shuffled = source;
        let mut rng = crate::rng::rng_from(&[seed, 0x5b11_7000]);
        shuffled.shuffle(&mut rng);
        let (n_train, n_calib, _) = fractions.sizes(shuffled.len());
        let test = shuffled.split_off(n_train + n_calib);
        let calib = shuffled.split_off(n_train);
        if calib.is_empty() {
            return Err(invalid("calibration split is empty"));
        }
        Ok(Self {
            train: shuffled,
            calib,
            test,
            dim,
            task,
            label_range,
            feature_names,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.calib.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Output of a set predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PredictionSet {
    Interval {
        lo: f64,
        hi: f64,
    },
    LabelSet(BTreeSet<usize>),
    /// The whole label space.
    Full,
}

impl PredictionSet {
    pub fn contains(&self, y: &Label) -> bool {
        match (self, y) {
            (PredictionSet::Full, _) => true,
            (PredictionSet::Interval { lo, hi }, Label::Continuous(v)) => lo <= v && v <= hi,
            (PredictionSet::LabelSet(members), Label::Categorical(c)) => members.contains(c),
            _ => false,
        }
    }

    /// Lebesgue measure for intervals, counting measure for label sets; a
    /// full set measures `full_size`.
    pub fn size(&self, full_size: f64) -> f64 {
        match self {
            PredictionSet::Interval { lo, hi } => hi - lo,
            PredictionSet::LabelSet(members) => members.len() as f64,
            PredictionSet::Full => full_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(v: f64) -> Example {
        Example::new(Covariates::new(vec![v]).unwrap(), Label::Continuous(v))
    }

    #[test]
    fn covariates_reject_non_finite() {
        assert!(matches!(
            Covariates::new(vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(Covariates::new(vec![]).is_err());
        assert!(Covariates::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn ten_points_split_four_three_three() {
        let src: Vec<_> = (0..10).map(|i| ex(i as f64)).collect();
        let ds = SplitDataset::from_source(
            src,
            Task::Regression,
            SplitFractions::default(),
            1,
            vec!["x".into()],
            vec![],
        )
        .unwrap();
        assert_eq!((ds.train.len(), ds.calib.len(), ds.test.len()), (4, 3, 3));
        assert_eq!(ds.label_range, Some((0.0, 9.0)));
        let mut all: Vec<f64> = ds
            .train
            .iter()
            .chain(&ds.calib)
            .chain(&ds.test)
            .map(|e| e.x[0])
            .collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..10).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let bad = SplitFractions {
            train: 0.5,
            calib: 0.3,
            test: 0.3,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn label_kind_checked() {
        let t = Task::Classification { classes: 3 };
        assert!(t.check_label(&Label::Categorical(2)).is_ok());
        assert!(t.check_label(&Label::Categorical(3)).is_err());
        assert!(t.check_label(&Label::Continuous(1.0)).is_err());
        assert!(Task::Regression
            .check_label(&Label::Continuous(f64::NAN))
            .is_err());
    }

    #[test]
    fn set_membership_and_size() {
        let iv = PredictionSet::Interval { lo: 1.5, hi: 2.5 };
        assert!(iv.contains(&Label::Continuous(2.0)));
        assert!(!iv.contains(&Label::Continuous(2.6)));
        assert_eq!(iv.size(10.0), 1.0);
        let ls = PredictionSet::LabelSet([0, 1].into_iter().collect());
        assert_eq!(ls.size(3.0), 2.0);
        assert!(!ls.contains(&Label::Categorical(2)));
        assert_eq!(PredictionSet::Full.size(10.0), 10.0);
        assert!(PredictionSet::Full.contains(&Label::Continuous(1e300)));
    }
}
