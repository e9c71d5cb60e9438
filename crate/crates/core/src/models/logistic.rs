use serde::{Deserialize, Serialize};

use crate::domain::Example;
use crate::error::{invalid, Error, Result};
use crate::models::Classifier;

/// Full-batch gradient descent settings for [`fit_logistic`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub step: f64,
    pub epochs: usize,
    /// L2 strength on the non-bias weights.
    pub l2: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            step: 0.1,
            epochs: 500,
            l2: 1e-3,
        }
    }
}

/// Multinomial logistic regression. `weights` is `classes × (dim + 1)` in
/// row-major order; the last entry of each row is that class's bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticClassifier {
    pub classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub config: LogisticConfig,
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in logits.iter_mut() {
        *v /= total;
    }
}

fn probabilities(weights: &[f64], classes: usize, x: &[f64]) -> Vec<f64> {
    let stride = x.len() + 1;
    let mut out: Vec<f64> = (0..classes)
        .map(|k| {
            let row = &weights[k * stride..(k + 1) * stride];
            x.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() + row[stride - 1]
        })
        .collect();
    softmax_in_place(&mut out);
    out
}

/// Regularized mean cross-entropy and its gradient with respect to the
/// flattened weights.
pub fn loss_and_gradient(
    weights: &[f64],
    classes: usize,
    data: &[Example],
    l2: f64,
) -> (f64, Vec<f64>) {
    let dim = data[0].x.dim();
    let stride = dim + 1;
    let n = data.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; weights.len()];
    for e in data {
        let x = e.x.as_slice();
        let y = e.y.as_class().expect("classification labels");
        let p = probabilities(weights, classes, x);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        for (k, pk) in p.iter().enumerate() {
            let r = pk - if k == y { 1.0 } else { 0.0 };
            let row = &mut grad[k * stride..(k + 1) * stride];
            for j in 0..dim {
                row[j] += r * x[j];
            }
            row[dim] += r;
        }
    }
    loss /= n;
    for g in grad.iter_mut() {
        *g /= n;
    }
    for k in 0..classes {
        for j in 0..dim {
            let w = weights[k * stride + j];
            loss += 0.5 * l2 * w * w;
            grad[k * stride + j] += l2 * w;
        }
    }
    (loss, grad)
}

fn loss_only(weights: &[f64], classes: usize, data: &[Example], l2: f64) -> f64 {
    let stride = data[0].x.dim() + 1;
    let mut loss = 0.0;
    for e in data {
        let p = probabilities(weights, classes, e.x.as_slice());
        loss -= p[e.y.as_class().expect("classification labels")]
            .max(f64::MIN_POSITIVE)
            .ln();
    }
    loss /= data.len() as f64;
    for k in 0..classes {
        for j in 0..stride - 1 {
            let w = weights[k * stride + j];
            loss += 0.5 * l2 * w * w;
        }
    }
    loss
}

/// Result of a fit, with the per-epoch loss trace.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub model: LogisticClassifier,
    pub losses: Vec<f64>,
}

pub fn fit_logistic(
    train: &[Example],
    classes: usize,
    config: LogisticConfig,
) -> Result<LogisticClassifier> {
    fit_logistic_traced(train, classes, config).map(|f| f.model)
}

/// Like [`fit_logistic`] but also returns the loss after every epoch.
pub fn fit_logistic_traced(
    train: &[Example],
    classes: usize,
    config: LogisticConfig,
) -> Result<LogisticFit> {
    if train.is_empty() {
        return Err(invalid("logistic regression needs training data"));
    }
    if classes == 0 {
        return Err(invalid("need at least one class"));
    }
    if !(config.step > 0.0 && config.l2 >= 0.0) {
        return Err(invalid("step must be positive and l2 non-negative"));
    }
    let mut seen = vec![false; classes];
    for e in train {
        match e.y.as_class() {
            Some(c) if c < classes => seen[c] = true,
            _ => return Err(invalid("logistic regression needs class labels in range")),
        }
    }
    if let Some(class) = seen.iter().position(|s| !s) {
        return Err(Error::MissingClass { class });
    }

    let dim = train[0].x.dim();
    let mut weights = vec![0.0; classes * (dim + 1)];
    let mut step = config.step;
    let (mut loss, mut grad) = loss_and_gradient(&weights, classes, train, config.l2);
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        loop {
            let candidate: Vec<f64> = weights
                .iter()
                .zip(&grad)
                .map(|(w, g)| w - step * g)
                .collect();
            let candidate_loss = loss_only(&candidate, classes, train, config.l2);
            if candidate_loss <= loss {
                weights = candidate;
                break;
            }
            step *= 0.5;
            if step < 1e-14 {
                break;
            }
        }
        let (l, g) = loss_and_gradient(&weights, classes, train, config.l2);
        loss = l;
        grad = g;
        losses.push(loss);
    }
    Ok(LogisticFit {
        model: LogisticClassifier {
            classes,
            dim,
            weights,
            config,
        },
        losses,
    })
}

impl LogisticClassifier {
    pub fn predict_class(&self, x: &[f64]) -> usize {
        let p = self.predict_proba(x);
        (0..p.len())
            .max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a)))
            .unwrap_or(0)
    }
}

impl Classifier for LogisticClassifier {
    fn classes(&self) -> usize {
        self.classes
    }

    fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        probabilities(&self.weights, self.classes, x)
    }
}
