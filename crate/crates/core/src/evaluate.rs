//! Fréchet distance between fitted Gaussians, an Inception-Score analogue
//! over the softmax classifier, and the early-stop rule.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::detect::SoftmaxClassifier;
use crate::error::{Error, Result};

/// Eigenvalues down to this are treated as rounding noise and clamped to zero.
pub const EIGEN_CLAMP: f64 = -1e-9;

/// Feature sets up to this width are compared on raw vectors.
pub const RAW_FEATURE_MAX_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased sample covariance.
pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<GaussianStats> {
    if features.len() < 2 {
        return Err(Error::TooFew {
            requested: 2,
            available: features.len(),
        });
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature vectors have differing lengths".into()));
    }
    let n = features.len();
    let mut mean = DVector::zeros(d);
    for f in features {
        mean += DVector::from_column_slice(f);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let c = DVector::from_column_slice(f) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov, n })
}

fn clamped_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (m + m.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    for v in e.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < EIGEN_CLAMP {
                log::debug!("clamping eigenvalue {v:e}");
            }
            *v = 0.0;
        }
    }
    e
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = clamped_eigen(m);
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    &e.eigenvectors * s * e.eigenvectors.transpose()
}

/// `|μa − μb|² + Tr(Σa + Σb − 2 (Σa^½ Σb Σa^½)^½)`, never negative.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("dimension {} vs {}", a.dim(), b.dim())));
    }
    let dmu = (&a.mean - &b.mean).norm_squared();
    let ra = sym_sqrt(&a.cov);
    let inner = &ra * &b.cov * &ra;
    let tr_sqrt: f64 = clamped_eigen(&inner).eigenvalues.iter().map(|v| v.sqrt()).sum();
    Ok((dmu + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Fréchet distance between the Gaussians fitted to two feature sets.
pub fn frechet_between(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    frechet_distance(&fit_gaussian(real)?, &fit_gaussian(generated)?)
}

/// `exp(mean_x KL(p(y|x) ‖ p(y)))` with `p(y)` the mean posterior.
pub fn inception_score_from_probs(probs: &[Vec<f64>]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Empty("inception score samples"));
    }
    let c = probs[0].len();
    if probs.iter().any(|p| p.len() != c) {
        return Err(Error::Shape("posteriors have differing class counts".into()));
    }
    let n = probs.len() as f64;
    let mut marginal = vec![0.0; c];
    for p in probs {
        for (m, v) in marginal.iter_mut().zip(p) {
            *m += v / n;
        }
    }
    let kl: f64 = probs
        .iter()
        .map(|p| {
            p.iter()
                .zip(&marginal)
                .filter(|(v, _)| **v > 0.0)
                .map(|(v, m)| v * (v.ln() - m.ln()))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    Ok(kl.max(0.0).exp())
}

pub fn inception_score(samples: &[Vec<f64>], clf: &SoftmaxClassifier) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("inception score samples"));
    }
    if let Some(bad) = samples.iter().find(|s| s.len() != clf.dim()) {
        return Err(Error::Shape(format!("sample has length {}, classifier expects {}", bad.len(), clf.dim())));
    }
    let probs: Vec<Vec<f64>> = samples.iter().map(|s| clf.predict_proba(s)).collect();
    inception_score_from_probs(&probs)
}

/// Feature map for the Fréchet metric: raw vectors up to
/// [`RAW_FEATURE_MAX_DIM`], classifier logits above it.
pub fn metric_features(xs: &[Vec<f64>], clf: Option<&SoftmaxClassifier>) -> Result<Vec<Vec<f64>>> {
    let d = xs.first().map_or(0, |x| x.len());
    if d <= RAW_FEATURE_MAX_DIM {
        return Ok(xs.to_vec());
    }
    let clf = clf.ok_or_else(|| Error::Config(format!("{d}-dimensional features need a classifier for the Fréchet metric")))?;
    Ok(xs.iter().map(|x| clf.logits(x).as_slice().to_vec()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "decision")]
pub enum StopDecision {
    Continue,
    /// `at` is the index of the eval that triggered the stop.
    Stop { at: usize, best_index: usize },
}

/// Stops once `patience` consecutive evals sit strictly above the running
/// best, and points at that best.
pub fn early_stop_monitor(history: &[f64], patience: usize) -> StopDecision {
    let patience = patience.max(1);
    let mut best = 0;
    let mut worse = 0;
    for (i, &m) in history.iter().enumerate() {
        if i == 0 || m <= history[best] {
            if i > 0 && m < history[best] {
                best = i;
            }
            worse = 0;
        } else {
            worse += 1;
            if worse >= patience {
                return StopDecision::Stop { at: i, best_index: best };
            }
        }
    }
    StopDecision::Continue
}
