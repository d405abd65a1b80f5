//! Multinomial logistic regression on image embeddings, trained by
//! full-batch gradient descent.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            lr: 0.5,
            epochs: 300,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxClassifier {
    /// Sorted class labels; position is the class index.
    pub labels: Vec<String>,
    /// `n_classes × dim`, acting on standardized features.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub feature_mean: DVector<f64>,
    pub feature_scale: DVector<f64>,
}

impl SoftmaxClassifier {
    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    fn standardize(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            x.iter()
                .zip(self.feature_mean.iter().zip(self.feature_scale.iter()))
                .map(|(v, (m, s))| (v - m) / s),
        )
    }

    pub fn logits(&self, x: &[f64]) -> DVector<f64> {
        &self.weights * self.standardize(x) + &self.bias
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        softmax(self.logits(x).as_slice())
    }

    /// Argmax class index and its probability.
    pub fn predict(&self, x: &[f64]) -> (usize, f64) {
        let p = self.predict_proba(x);
        let (i, &pi) = p
            .iter()
            .enumerate()
            .fold((0, &p[0]), |best, cur| if cur.1 > best.1 { cur } else { best });
        (i, pi)
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], labels: &[String]) -> f64 {
        let hits = xs
            .iter()
            .zip(labels)
            .filter(|(x, l)| self.labels[self.predict(x).0] == **l)
            .count();
        hits as f64 / xs.len().max(1) as f64
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean cross-entropy over `(x, y)` pairs and its gradient with respect to
/// weights and bias. Inputs are already standardized.
pub fn loss_and_grad(weights: &DMatrix<f64>, bias: &DVector<f64>, xs: &[DVector<f64>], ys: &[usize]) -> (f64, DMatrix<f64>, DVector<f64>) {
    let mut gw = DMatrix::zeros(weights.nrows(), weights.ncols());
    let mut gb = DVector::zeros(bias.len());
    let mut loss = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z = weights * x + bias;
        let p = softmax(z.as_slice());
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        let mut delta = DVector::from_vec(p);
        delta[y] -= 1.0;
        gw += &delta * x.transpose();
        gb += delta;
    }
    let n = xs.len() as f64;
    (loss / n, gw / n, gb / n)
}

pub fn train_classifier(dataset: &Corpus, cfg: &ClassifierConfig) -> Result<SoftmaxClassifier> {
    let labels: Vec<String> = dataset
        .records()
        .iter()
        .map(|r| r.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if labels.len() < 2 {
        return Err(Error::SingleClass(labels.len()));
    }
    if !(cfg.lr >= 0.0) {
        return Err(Error::Config("classifier lr must be non-negative".into()));
    }

    // Canonical id order makes the full-batch sums independent of input order.
    let mut recs: Vec<_> = dataset.records().iter().collect();
    recs.sort_by(|a, b| a.id.cmp(&b.id));

    let d = dataset.dim_image();
    let n = recs.len() as f64;
    let mut mean = DVector::zeros(d);
    for r in &recs {
        mean += DVector::from_column_slice(&r.image_vec);
    }
    mean /= n;
    let mut var = DVector::zeros(d);
    for r in &recs {
        let c = DVector::from_column_slice(&r.image_vec) - &mean;
        var += c.component_mul(&c);
    }
    let scale = (var / n).map(|v: f64| if v > 0.0 { v.sqrt() } else { 1.0 });

    let xs: Vec<DVector<f64>> = recs
        .iter()
        .map(|r| (DVector::from_column_slice(&r.image_vec) - &mean).component_div(&scale))
        .collect();
    let ys: Vec<usize> = recs.iter().map(|r| labels.binary_search(&r.label).unwrap()).collect();

    let mut g = rng::seeded(cfg.seed);
    let c = labels.len();
    let mut weights = DMatrix::from_fn(c, d, |_, _| 0.01 * rng::normal(&mut g));
    let mut bias = DVector::zeros(c);
    for _ in 0..cfg.epochs {
        let (_, gw, gb) = loss_and_grad(&weights, &bias, &xs, &ys);
        weights -= gw * cfg.lr;
        bias -= gb * cfg.lr;
    }
    Ok(SoftmaxClassifier {
        labels,
        weights,
        bias,
        feature_mean: mean,
        feature_scale: scale,
    })
}
