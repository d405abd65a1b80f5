//! Web-record purification: a per-keyword K-means filter for irrelevant
//! outliers and a classifier filter for similar outliers.

mod classifier;
mod kmeans;

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use classifier::{loss_and_grad, softmax, train_classifier, ClassifierConfig, SoftmaxClassifier};
pub use kmeans::{kmeans_fit, kmeans_pp_init, lloyd, KMeansModel, MAX_ITER};

use crate::corpus::{dist, Corpus, EmbeddingRecord};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Statistic {
    /// Distance from the record's cluster centroid to the keyword's dataset centroid.
    ClusterDistance { cluster: usize, distance: f64, threshold: f64 },
    Predicted { label: String, probability: f64 },
    /// Keyword had no dataset counterpart; record passed through.
    Unfiltered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub id: String,
    pub kept: bool,
    #[serde(flatten)]
    pub statistic: Statistic,
}

/// Outcome of a filter, in canonical (ascending id) order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: Vec<String>,
    pub removed: Vec<String>,
    pub decisions: Vec<Decision>,
    /// Keywords that could not be checked.
    pub warnings: Vec<String>,
}

impl FilterReport {
    fn from_decisions(mut decisions: Vec<Decision>, mut warnings: Vec<String>) -> Self {
        decisions.sort_by(|a, b| a.id.cmp(&b.id));
        warnings.sort();
        let (kept, removed) = decisions.iter().fold((Vec::new(), Vec::new()), |(mut k, mut r), d| {
            if d.kept {
                k.push(d.id.clone());
            } else {
                r.push(d.id.clone());
            }
            (k, r)
        });
        FilterReport {
            kept,
            removed,
            decisions,
            warnings,
        }
    }

    pub fn kept_set(&self) -> HashSet<String> {
        self.kept.iter().cloned().collect()
    }

    /// Writes one JSON decision per line.
    pub fn write_audit(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        for d in &self.decisions {
            let line = serde_json::to_string(d).map_err(|e| Error::Serde(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        for warn in &self.warnings {
            writeln!(w, "{}", serde_json::json!({ "warning": warn })).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterFilterConfig {
    /// Clusters per keyword; clamped to the group size.
    pub k: usize,
    /// Removal threshold in units of the class's mean member distance.
    pub tau_sigma: f64,
    pub seed: u64,
}

impl Default for ClusterFilterConfig {
    fn default() -> Self {
        ClusterFilterConfig {
            k: 5,
            tau_sigma: 3.0,
            seed: 0,
        }
    }
}

fn group_by_label(records: &[EmbeddingRecord]) -> BTreeMap<&str, Vec<&EmbeddingRecord>> {
    let mut groups: BTreeMap<&str, Vec<&EmbeddingRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.label.as_str()).or_default().push(r);
    }
    groups
}

/// Centroid of a class and the mean distance of its members to it.
pub fn class_spread(members: &[&EmbeddingRecord]) -> (Vec<f64>, f64) {
    let d = members[0].image_vec.len();
    let n = members.len() as f64;
    let mut mu = vec![0.0; d];
    for m in members {
        for (a, x) in mu.iter_mut().zip(&m.image_vec) {
            *a += x;
        }
    }
    mu.iter_mut().for_each(|a| *a /= n);
    let s = members.iter().map(|m| dist(&m.image_vec, &mu)).sum::<f64>() / n;
    (mu, s)
}

pub fn cluster_filter(web: &Corpus, dataset: &Corpus, cfg: &ClusterFilterConfig) -> Result<FilterReport> {
    if cfg.k == 0 || !(cfg.tau_sigma >= 0.0) {
        return Err(Error::Config("cluster filter needs k >= 1 and tau_sigma >= 0".into()));
    }
    let reference = group_by_label(dataset.records());
    let groups: Vec<(usize, &str, Vec<&EmbeddingRecord>)> = group_by_label(web.records())
        .into_iter()
        .enumerate()
        .map(|(i, (l, g))| (i, l, g))
        .collect();

    let per_group: Vec<(Vec<Decision>, Option<String>)> = groups
        .par_iter()
        .map(|(gi, label, members)| {
            let Some(ds) = reference.get(label) else {
                let ds = members
                    .iter()
                    .map(|r| Decision {
                        id: r.id.clone(),
                        kept: true,
                        statistic: Statistic::Unfiltered,
                    })
                    .collect();
                return Ok((ds, Some(format!("keyword `{label}` has no dataset records; left unfiltered"))));
            };
            let (mu, spread) = class_spread(ds);
            let threshold = cfg.tau_sigma * spread;
            let points: Vec<Vec<f64>> = members.iter().map(|r| r.image_vec.clone()).collect();
            let k = cfg.k.min(points.len());
            let model = kmeans_fit(&points, k, rng::derive(cfg.seed, &format!("cluster/{gi}")))?;
            let distances: Vec<f64> = model.centroids.iter().map(|c| dist(c, &mu)).collect();
            let ds = members
                .iter()
                .zip(&model.assignments)
                .map(|(r, &a)| Decision {
                    id: r.id.clone(),
                    kept: distances[a] <= threshold,
                    statistic: Statistic::ClusterDistance {
                        cluster: a,
                        distance: distances[a],
                        threshold,
                    },
                })
                .collect();
            Ok((ds, None))
        })
        .collect::<Result<_>>()?;

    let mut decisions = Vec::with_capacity(web.len());
    let mut warnings = Vec::new();
    for (ds, w) in per_group {
        decisions.extend(ds);
        warnings.extend(w);
    }
    Ok(FilterReport::from_decisions(decisions, warnings))
}

/// Keeps a record iff the classifier's top label equals its keyword.
pub fn classifier_filter(web: &Corpus, clf: &SoftmaxClassifier) -> Result<FilterReport> {
    let decisions = web
        .records()
        .par_iter()
        .map(|r| {
            let want = clf.label_index(&r.label).ok_or_else(|| Error::UnknownLabel(r.label.clone()))?;
            let (got, p) = clf.predict(&r.image_vec);
            Ok(Decision {
                id: r.id.clone(),
                kept: got == want,
                statistic: Statistic::Predicted {
                    label: clf.labels[got].clone(),
                    probability: p,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FilterReport::from_decisions(decisions, Vec::new()))
}
