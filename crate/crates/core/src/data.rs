//! CSV ingestion, synthetic data, and CSV export.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{Covariates, Example, Label, SplitDataset, SplitFractions, Task};
use crate::error::{invalid, Error, Result};
use crate::rng::{rng_from, PointKey, Role, StreamRng};

/// Task requested for an input file; the class count is discovered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Orders class labels: numerically when every label parses as a number,
/// lexicographically otherwise.
fn ordered_classes(labels: &[String]) -> Vec<String> {
    let distinct: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
    let mut names: Vec<String> = distinct.into_iter().map(str::to_owned).collect();
    let numeric: Option<Vec<f64>> = names.iter().map(|s| s.parse::<f64>().ok()).collect();
    if let Some(values) = numeric {
        let mut paired: Vec<(f64, String)> = values.into_iter().zip(names).collect();
        paired.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        names = paired.into_iter().map(|(_, s)| s).collect();
    }
    names
}

/// Reads a headed CSV. Every column other than `label_column` is a feature
/// and must hold finite reals. Row numbers in errors are file line numbers.
pub fn ingest_csv(
    path: impl AsRef<Path>,
    label_column: &str,
    task: TaskKind,
    fractions: SplitFractions,
    seed: u64,
) -> Result<SplitDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::MissingColumn(label_column.to_owned()))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    if feature_names.is_empty() {
        return Err(invalid("no feature columns"));
    }

    let mut rows = Vec::new();
    let mut raw_labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != headers.len() {
            return Err(Error::Csv {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let mut features = Vec::with_capacity(feature_names.len());
        for (i, cell) in record.iter().enumerate() {
            if i == label_idx {
                continue;
            }
            let value = cell.parse::<f64>().ok().filter(|v| v.is_finite());
            features.push(value.ok_or_else(|| Error::Csv {
                row,
                column: headers[i].clone(),
                message: format!("'{cell}' is not a finite number"),
            })?);
        }
        let label = &record[label_idx];
        if label.is_empty() {
            return Err(Error::Csv {
                row,
                column: label_column.to_owned(),
                message: "empty label".into(),
            });
        }
        if task == TaskKind::Regression && !label.parse::<f64>().is_ok_and(f64::is_finite) {
            return Err(Error::Csv {
                row,
                column: label_column.to_owned(),
                message: format!("'{label}' is not a finite number"),
            });
        }
        rows.push(features);
        raw_labels.push(label.to_owned());
    }

    let (task, class_names, labels): (Task, Vec<String>, Vec<Label>) = match task {
        TaskKind::Regression => (
            Task::Regression,
            Vec::new(),
            raw_labels
                .iter()
                .map(|s| Label::Continuous(s.parse().expect("checked above")))
                .collect(),
        ),
        TaskKind::Classification => {
            let names = ordered_classes(&raw_labels);
            if names.len() < 2 {
                return Err(invalid("classification needs at least two classes"));
            }
            let labels = raw_labels
                .iter()
                .map(|s| Label::Categorical(names.iter().position(|n| n == s).expect("collected")))
                .collect();
            (
                Task::Classification {
                    classes: names.len(),
                },
                names,
                labels,
            )
        }
    };
    let source = rows
        .into_iter()
        .zip(labels)
        .map(|(x, y)| Example::new(Covariates::from_vec_unchecked(x), y))
        .collect();
    SplitDataset::from_source(source, task, fractions, seed, feature_names, class_names)
}

/// Writes examples as `x0,…,x{d−1},<label>` (or the given feature names).
/// Values use the shortest representation that parses back to the same bits.
pub fn write_csv(
    path: impl AsRef<Path>,
    examples: &[Example],
    feature_names: &[String],
    label_column: &str,
    class_names: &[String],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = feature_names.iter().map(String::as_str).collect();
    header.push(label_column);
    w.write_record(&header)?;
    for e in examples {
        if e.x.dim() != feature_names.len() {
            return Err(Error::Dimension {
                expected: feature_names.len(),
                got: e.x.dim(),
            });
        }
        let mut fields: Vec<String> = e.x.as_slice().iter().map(|v| format!("{v}")).collect();
        fields.push(match e.y {
            Label::Continuous(v) => format!("{v}"),
            Label::Categorical(k) => class_names.get(k).cloned().unwrap_or_else(|| k.to_string()),
        });
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SyntheticKind {
    /// `y = wᵀx + N(0, noise²)`.
    LinearRegression { noise: f64 },
    /// `y ~ Categorical(softmax(Wx))`.
    LogisticClassification { classes: usize },
}

/// Gaussian-design synthetic data. Weights come from `weight_seed`, points
/// from the generation seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub d: usize,
    pub n: usize,
    pub kind: SyntheticKind,
    pub weight_seed: u64,
    /// Multiplies the standard-normal weights; larger means less label noise
    /// in classification.
    pub weight_scale: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(invalid("synthetic dimension must be at least 1"));
        }
        if self.n < 30 {
            return Err(invalid(format!(
                "synthetic n must be at least 30, got {}",
                self.n
            )));
        }
        if !(self.weight_scale.is_finite() && self.weight_scale >= 0.0) {
            return Err(invalid("weight scale must be finite and non-negative"));
        }
        match self.kind {
            SyntheticKind::LinearRegression { noise } if !(noise.is_finite() && noise >= 0.0) => {
                Err(invalid("noise must be finite and non-negative"))
            }
            SyntheticKind::LogisticClassification { classes } if classes < 2 => {
                Err(invalid("need at least two classes"))
            }
            _ => Ok(()),
        }
    }

    pub fn task(&self) -> Task {
        match self.kind {
            SyntheticKind::LinearRegression { .. } => Task::Regression,
            SyntheticKind::LogisticClassification { classes } => Task::Classification { classes },
        }
    }

    /// Weight rows: one for regression, `K` for classification.
    pub fn weights(&self) -> Vec<Vec<f64>> {
        let rows = match self.kind {
            SyntheticKind::LinearRegression { .. } => 1,
            SyntheticKind::LogisticClassification { classes } => classes,
        };
        let mut rng = rng_from(&[self.weight_seed, 0x7765_6967_6874]);
        (0..rows)
            .map(|_| {
                (0..self.d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        self.weight_scale * z
                    })
                    .collect()
            })
            .collect()
    }

    fn draw_with(&self, weights: &[Vec<f64>], rng: &mut StreamRng) -> Example {
        let x: Vec<f64> = (0..self.d).map(|_| StandardNormal.sample(rng)).collect();
        let dot = |w: &[f64]| w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
        let y = match self.kind {
            SyntheticKind::LinearRegression { noise } => {
                let eps: f64 = StandardNormal.sample(rng);
                Label::Continuous(dot(&weights[0]) + noise * eps)
            }
            SyntheticKind::LogisticClassification { .. } => {
                let logits: Vec<f64> = weights.iter().map(|w| dot(w)).collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let total: f64 = exp.iter().sum();
                let u: f64 = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let k = exp
                    .iter()
                    .position(|e| {
                        acc += e;
                        u < acc
                    })
                    .unwrap_or(exp.len() - 1);
                Label::Categorical(k)
            }
        };
        Example::new(Covariates::from_vec_unchecked(x), y)
    }

    /// `n` fresh i.i.d. examples from `rng`.
    pub fn draw(&self, rng: &mut StreamRng, n: usize) -> Vec<Example> {
        let w = self.weights();
        (0..n).map(|_| self.draw_with(&w, rng)).collect()
    }

    /// The `n` source points for `seed`, point `i` from its own stream.
    pub fn source(&self, seed: u64) -> Result<Vec<Example>> {
        self.validate()?;
        let w = self.weights();
        Ok((0..self.n)
            .map(|i| self.draw_with(&w, &mut PointKey::new(seed, Role::Synthetic, i).member(0)))
            .collect())
    }

    pub fn feature_names(&self) -> Vec<String> {
        (0..self.d).map(|j| format!("x{j}")).collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        match self.kind {
            SyntheticKind::LinearRegression { .. } => Vec::new(),
            SyntheticKind::LogisticClassification { classes } => {
                (0..classes).map(|k| k.to_string()).collect()
            }
        }
    }
}

/// Draws `spec.n` points and splits them with the same seed.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    seed: u64,
    fractions: SplitFractions,
) -> Result<SplitDataset> {
    SplitDataset::from_source(
        spec.source(seed)?,
        spec.task(),
        fractions,
        seed,
        spec.feature_names(),
        spec.class_names(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{fit_logistic, fit_ridge, LogisticConfig};
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::File::create(&path)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        path
    }

    #[test]
    fn ten_rows_split_four_three_three() {
        let dir = tempfile::tempdir().unwrap();
        let body: String = std::iter::once("a,b,y\n".to_owned())
            .chain((0..10).map(|i| format!("{i},{},{}\n", i * 2, i % 2)))
            .collect();
        let path = write(&dir, "d.csv", &body);
        let ds = ingest_csv(
            &path,
            "y",
            TaskKind::Classification,
            SplitFractions::default(),
            1,
        )
        .unwrap();
        assert_eq!((ds.train.len(), ds.calib.len(), ds.test.len()), (4, 3, 3));
        assert_eq!(ds.feature_names, ["a", "b"]);
        assert_eq!(ds.task, Task::Classification { classes: 2 });
    }

    #[test]
    fn nan_cell_rejected_with_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "d.csv", "a,y\n1,2\nNaN,3\n");
        match ingest_csv(
            &path,
            "y",
            TaskKind::Regression,
            SplitFractions::default(),
            0,
        ) {
            Err(Error::Csv { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "a");
            }
            other => panic!("unexpected {other:?}"),
        }
        let path = write(&dir, "e.csv", "a,y\n1,2\n2,oops\n");
        assert!(matches!(
            ingest_csv(
                &path,
                "y",
                TaskKind::Regression,
                SplitFractions::default(),
                0
            ),
            Err(Error::Csv { row: 3, .. })
        ));
    }

    #[test]
    fn missing_label_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "d.csv", "a,b\n1,2\n");
        assert!(matches!(
            ingest_csv(&path, "y", TaskKind::Regression, SplitFractions::default(), 0),
            Err(Error::MissingColumn(c)) if c == "y"
        ));
    }

    #[test]
    fn class_names_sorted_numerically_when_possible() {
        let names = ordered_classes(&["10".into(), "2".into(), "2".into(), "-1".into()]);
        assert_eq!(names, ["-1", "2", "10"]);
        let names = ordered_classes(&["spam".into(), "ham".into(), "eggs".into()]);
        assert_eq!(names, ["eggs", "ham", "spam"]);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [
            SyntheticKind::LinearRegression { noise: 0.3 },
            SyntheticKind::LogisticClassification { classes: 3 },
        ] {
            let spec = SyntheticSpec {
                d: 4,
                n: 57,
                kind,
                weight_seed: 8,
                weight_scale: 1.0,
            };
            let ds = generate_synthetic(&spec, 5, SplitFractions::default()).unwrap();
            let path = dir.path().join("syn.csv");
            write_csv(
                &path,
                &spec.source(5).unwrap(),
                &spec.feature_names(),
                "y",
                &spec.class_names(),
            )
            .unwrap();
            let task = match kind {
                SyntheticKind::LinearRegression { .. } => TaskKind::Regression,
                _ => TaskKind::Classification,
            };
            let back = ingest_csv(&path, "y", task, SplitFractions::default(), 5).unwrap();
            assert_eq!(back, ds);
            let bits = |d: &SplitDataset| -> Vec<u64> {
                d.train
                    .iter()
                    .flat_map(|e| e.x.as_slice().iter().map(|v| v.to_bits()))
                    .collect()
            };
            assert_eq!(bits(&back), bits(&ds));
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            d: 3,
            n: 40,
            kind: SyntheticKind::LinearRegression { noise: 1.0 },
            weight_seed: 1,
            weight_scale: 1.0,
        };
        let a = generate_synthetic(&spec, 2, SplitFractions::default()).unwrap();
        let b = generate_synthetic(&spec, 2, SplitFractions::default()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&spec, 3, SplitFractions::default()).unwrap();
        assert_ne!(a, c);
        assert!(SyntheticSpec { n: 29, ..spec }.validate().is_err());
        assert!(SyntheticSpec { d: 0, ..spec }.validate().is_err());
    }

    #[test]
    fn noiseless_linear_is_fit_exactly() {
        let spec = SyntheticSpec {
            d: 5,
            n: 300,
            kind: SyntheticKind::LinearRegression { noise: 0.0 },
            weight_seed: 4,
            weight_scale: 1.0,
        };
        let ds = generate_synthetic(&spec, 9, SplitFractions::default()).unwrap();
        let model = fit_ridge(&ds.train, 1e-9).unwrap();
        use crate::models::Regressor;
        let worst = ds
            .test
            .iter()
            .map(|e| (model.predict(e.x.as_slice()) - e.y.as_continuous().unwrap()).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn large_weights_are_nearly_separable() {
        let spec = SyntheticSpec {
            d: 2,
            n: 1000,
            kind: SyntheticKind::LogisticClassification { classes: 2 },
            weight_seed: 2,
            weight_scale: 10.0,
        };
        let ds = generate_synthetic(&spec, 1, SplitFractions::default()).unwrap();
        let fit = fit_logistic(&ds.train, 2, LogisticConfig::default()).unwrap();
        let acc = ds
            .test
            .iter()
            .filter(|e| Some(fit.predict_class(e.x.as_slice())) == e.y.as_class())
            .count() as f64
            / ds.test.len() as f64;
        assert!(acc > 0.9, "{acc}");
    }
}
