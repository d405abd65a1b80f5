//! Embedding corpora: records, the line-delimited file format, and the
//! synthetic world generator used as a stand-in for encoded web retrieval.
//!
//! File layout: the first line is a schema object
//! `{"schema_version":1,"dim_image":D,"dim_text":Ds}`; every following
//! non-blank line is one JSON-encoded [`EmbeddingRecord`]. Optional fields are
//! omitted when absent and floats are written in shortest round-trip form, so
//! `load_corpus(save_corpus(c)) == c` bit for bit.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Dataset,
    Web,
}

/// Ground-truth kind for synthetic outliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutlierKind {
    /// Drawn far from the keyword's class manifold.
    Irrelevant,
    /// Drawn from a different class but labelled with this keyword.
    Similar,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    /// Class name, doubling as the retrieval keyword for web records.
    pub label: String,
    pub split: Split,
    pub image_vec: Vec<f64>,
    #[serde(default)]
    pub text_vecs: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outlier_truth: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outlier_kind: Option<OutlierKind>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub extrapolated: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub generated: bool,
}

impl EmbeddingRecord {
    pub fn new(id: impl Into<String>, label: impl Into<String>, split: Split, image_vec: Vec<f64>) -> Self {
        EmbeddingRecord {
            id: id.into(),
            label: label.into(),
            split,
            image_vec,
            text_vecs: Vec::new(),
            outlier_truth: None,
            outlier_kind: None,
            extrapolated: false,
            generated: false,
        }
    }

    pub fn with_text(mut self, text_vecs: Vec<Vec<f64>>) -> Self {
        self.text_vecs = text_vecs;
        self
    }

    /// Element-wise mean of the stored caption features.
    pub fn canonical_text(&self) -> Option<Vec<f64>> {
        let first = self.text_vecs.first()?;
        let mut mean = vec![0.0; first.len()];
        for v in &self.text_vecs {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        let n = self.text_vecs.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Some(mean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct SchemaLine {
    schema_version: u32,
    dim_image: usize,
    dim_text: usize,
}

/// A dimension-consistent, id-unique collection of records.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    dim_image: usize,
    dim_text: usize,
    records: Vec<EmbeddingRecord>,
}

impl Corpus {
    pub fn empty(dim_image: usize, dim_text: usize) -> Result<Self> {
        Self::new(dim_image, dim_text, Vec::new())
    }

    pub fn new(dim_image: usize, dim_text: usize, records: Vec<EmbeddingRecord>) -> Result<Self> {
        if dim_image == 0 || dim_text == 0 {
            return Err(Error::Config("corpus dimensions must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            check_record(r, dim_image, dim_text)?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Corpus {
            dim_image,
            dim_text,
            records,
        })
    }

    pub fn dim_image(&self) -> usize {
        self.dim_image
    }

    pub fn dim_text(&self) -> usize {
        self.dim_text
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EmbeddingRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    /// Distinct labels in first-appearance order.
    pub fn labels(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.label.as_str()))
            .map(|r| r.label.clone())
            .collect()
    }

    /// Keeps the records whose id is in `ids`, preserving corpus order.
    pub fn retain_ids(&self, ids: &HashSet<String>) -> Corpus {
        Corpus {
            dim_image: self.dim_image,
            dim_text: self.dim_text,
            records: self.records.iter().filter(|r| ids.contains(&r.id)).cloned().collect(),
        }
    }

    pub fn filter_split(&self, split: Split) -> Corpus {
        Corpus {
            dim_image: self.dim_image,
            dim_text: self.dim_text,
            records: self.records.iter().filter(|r| r.split == split).cloned().collect(),
        }
    }

    /// Concatenation; fails on dimension mismatch or id collision.
    pub fn concat(&self, other: &Corpus) -> Result<Corpus> {
        if self.dim_image != other.dim_image || self.dim_text != other.dim_text {
            return Err(Error::Shape(format!(
                "cannot join corpora of dims ({}, {}) and ({}, {})",
                self.dim_image, self.dim_text, other.dim_image, other.dim_text
            )));
        }
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        Corpus::new(self.dim_image, self.dim_text, records)
    }

    /// Copy with every image and text vector scaled to unit L2 norm.
    /// Zero vectors are left untouched.
    pub fn l2_normalized(&self) -> Corpus {
        let mut out = self.clone();
        for r in &mut out.records {
            normalize_in_place(&mut r.image_vec);
            for t in &mut r.text_vecs {
                normalize_in_place(t);
            }
        }
        out
    }
}

fn normalize_in_place(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn check_record(r: &EmbeddingRecord, dim_image: usize, dim_text: usize) -> Result<()> {
    if r.image_vec.len() != dim_image {
        return Err(Error::DimensionMismatch {
            id: r.id.clone(),
            field: "image_vec",
            got: r.image_vec.len(),
            expected: dim_image,
        });
    }
    if let Some(t) = r.text_vecs.iter().find(|t| t.len() != dim_text) {
        return Err(Error::DimensionMismatch {
            id: r.id.clone(),
            field: "text_vec",
            got: t.len(),
            expected: dim_text,
        });
    }
    if r.split == Split::Dataset && r.text_vecs.is_empty() {
        return Err(Error::MissingText(r.id.clone()));
    }
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let schema_text = match lines.next() {
        Some(line) => line.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::MissingSchema { path: path.into() }),
    };
    let schema: SchemaLine = serde_json::from_str(&schema_text).map_err(|_| Error::MissingSchema { path: path.into() })?;
    if schema.schema_version != SCHEMA_VERSION {
        return Err(Error::Malformed {
            path: path.into(),
            line: 1,
            reason: format!("unsupported schema_version {}", schema.schema_version),
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.into(),
            line: i + 2,
            reason: e.to_string(),
        })?;
        records.push(rec);
    }
    Corpus::new(schema.dim_image, schema.dim_text, records)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let schema = SchemaLine {
        schema_version: SCHEMA_VERSION,
        dim_image: corpus.dim_image,
        dim_text: corpus.dim_text,
    };
    let ser = |e: serde_json::Error| Error::Serde(e.to_string());
    writeln!(w, "{}", serde_json::to_string(&schema).map_err(ser)?).map_err(|e| Error::io(path, e))?;
    for r in &corpus.records {
        writeln!(w, "{}", serde_json::to_string(r).map_err(ser)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub dataset_per_class: usize,
    pub web_per_class: usize,
    /// Share of web records drawn from a displaced irrelevant component.
    pub outlier_fraction: f64,
    /// Share of web records drawn from another class's distribution.
    pub similar_fraction: f64,
    /// Minimum distance between class centers, in units of `within_std`.
    pub separation: f64,
    /// RMS distance of a class member from its center.
    pub within_std: f64,
    /// Norm of a shared offset added to every class center, in units of `within_std`.
    pub domain_offset: f64,
    pub dim_image: usize,
    pub dim_text: usize,
    pub captions_per_image: usize,
    /// Per-caption noise added to `M·x` when `joint_map` is off.
    pub caption_noise: f64,
    /// Every text vector equals `M·image_vec` for one fixed matrix `M`.
    pub joint_map: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 4,
            dataset_per_class: 30,
            web_per_class: 60,
            outlier_fraction: 0.2,
            similar_fraction: 0.0,
            separation: 6.0,
            within_std: 1.0,
            domain_offset: 20.0,
            dim_image: 16,
            dim_text: 8,
            captions_per_image: 3,
            caption_noise: 0.1,
            joint_map: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.similar_fraction) || self.outlier_fraction + self.similar_fraction > 1.0 {
            return bad("similar_fraction must lie in [0, 1 - outlier_fraction]");
        }
        if !(self.separation > 0.0) || !(self.within_std > 0.0) || self.domain_offset < 0.0 {
            return bad("separation and within_std must be positive");
        }
        if self.n_classes == 0 || self.dim_image == 0 || self.dim_text == 0 || self.captions_per_image == 0 {
            return bad("class count, dimensions and captions per image must be positive");
        }
        if self.similar_fraction > 0.0 && self.n_classes < 2 {
            return bad("similar outliers need at least two classes");
        }
        Ok(())
    }
}

/// Everything the generator drew, including the hidden structure tests need.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub dataset: Corpus,
    pub web: Corpus,
    /// `dim_text × dim_image` map from image to text features.
    pub text_map: DMatrix<f64>,
    pub class_centers: Vec<Vec<f64>>,
    pub labels: Vec<String>,
}

pub fn class_label(c: usize) -> String {
    format!("class_{c:03}")
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<(Corpus, Corpus)> {
    let world = generate_world(config)?;
    Ok((world.dataset, world.web))
}

pub fn generate_world(cfg: &SynthConfig) -> Result<SynthWorld> {
    cfg.validate()?;
    let d = cfg.dim_image;
    let ds = cfg.dim_text;
    let mut rng = rng::seeded(cfg.seed);

    let mut centers: Vec<Vec<f64>> = (0..cfg.n_classes).map(|_| rng::normal_vec(&mut rng, d)).collect();
    let scale = if cfg.n_classes >= 2 {
        let mut dmin = f64::INFINITY;
        for i in 0..centers.len() {
            for j in i + 1..centers.len() {
                dmin = dmin.min(dist(&centers[i], &centers[j]));
            }
        }
        cfg.separation * cfg.within_std / dmin
    } else {
        cfg.separation * cfg.within_std / (2.0 * d as f64).sqrt()
    };
    let offset = unit(rng::normal_vec(&mut rng, d));
    for c in &mut centers {
        for (x, o) in c.iter_mut().zip(&offset) {
            *x = *x * scale + o * cfg.domain_offset * cfg.within_std;
        }
    }
    let irrelevant_centers: Vec<Vec<f64>> = centers
        .iter()
        .map(|c| {
            let u = unit(rng::normal_vec(&mut rng, d));
            c.iter().zip(&u).map(|(x, u)| x + cfg.separation * cfg.within_std * u).collect()
        })
        .collect();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let text_map = DMatrix::from_fn(ds, d, |_, _| rng::normal(&mut rng) * inv_sqrt_d);
    let coord_std = cfg.within_std * inv_sqrt_d;

    let draw = |rng: &mut rng::Rng, center: &[f64]| -> Vec<f64> {
        center.iter().map(|c| c + coord_std * rng::normal(rng)).collect()
    };
    let labels: Vec<String> = (0..cfg.n_classes).map(class_label).collect();

    let mut dataset = Vec::with_capacity(cfg.n_classes * cfg.dataset_per_class);
    for (c, label) in labels.iter().enumerate() {
        for i in 0..cfg.dataset_per_class {
            let x = draw(&mut rng, &centers[c]);
            let xv = DVector::from_column_slice(&x);
            let base = &text_map * &xv;
            let texts = (0..cfg.captions_per_image)
                .map(|_| {
                    if cfg.joint_map {
                        base.iter().copied().collect()
                    } else {
                        base.iter().map(|b| b + cfg.caption_noise * rng::normal(&mut rng)).collect()
                    }
                })
                .collect();
            dataset.push(EmbeddingRecord::new(format!("d{c:03}-{i:05}"), label.clone(), Split::Dataset, x).with_text(texts));
        }
    }

    let n_web = cfg.n_classes * cfg.web_per_class;
    let n_irr = (cfg.outlier_fraction * n_web as f64).round() as usize;
    let n_sim = ((cfg.similar_fraction * n_web as f64).round() as usize).min(n_web - n_irr);
    let mut order: Vec<usize> = (0..n_web).collect();
    order.shuffle(&mut rng);
    let mut kind = vec![None; n_web];
    for &i in &order[..n_irr] {
        kind[i] = Some(OutlierKind::Irrelevant);
    }
    for &i in &order[n_irr..n_irr + n_sim] {
        kind[i] = Some(OutlierKind::Similar);
    }

    let mut web = Vec::with_capacity(n_web);
    for (idx, k) in kind.iter().enumerate() {
        let c = idx / cfg.web_per_class.max(1);
        let i = idx % cfg.web_per_class.max(1);
        let x = match k {
            None => draw(&mut rng, &centers[c]),
            Some(OutlierKind::Irrelevant) => draw(&mut rng, &irrelevant_centers[c]),
            Some(OutlierKind::Similar) => {
                let shift = 1 + (rand::Rng::random_range(&mut rng, 0..cfg.n_classes - 1));
                draw(&mut rng, &centers[(c + shift) % cfg.n_classes])
            }
        };
        let mut rec = EmbeddingRecord::new(format!("w{c:03}-{i:05}"), labels[c].clone(), Split::Web, x);
        rec.outlier_truth = Some(k.is_some());
        rec.outlier_kind = *k;
        web.push(rec);
    }

    Ok(SynthWorld {
        dataset: Corpus::new(d, ds, dataset)?,
        web: Corpus::new(d, ds, web)?,
        text_map,
        class_centers: centers,
        labels,
    })
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    normalize_in_place(&mut v);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn two_records() -> Corpus {
        let a = EmbeddingRecord::new("a", "x", Split::Dataset, vec![0.1, -2.5e-17]).with_text(vec![vec![1.0]]);
        let mut b = EmbeddingRecord::new("b", "y", Split::Web, vec![1.0 / 3.0, 7.0]);
        b.outlier_truth = Some(true);
        Corpus::new(2, 1, vec![a, b]).unwrap()
    }

    #[test]
    fn two_record_round_trip() {
        let dir = tmp();
        let p = dir.path().join("c.jsonl");
        let c = two_records();
        save_corpus(&c, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(load_corpus(&p).unwrap(), c);
    }

    #[test]
    fn empty_corpus_is_schema_only() {
        let dir = tmp();
        let p = dir.path().join("e.jsonl");
        save_corpus(&Corpus::empty(3, 2).unwrap(), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1);
        let c = load_corpus(&p).unwrap();
        assert!(c.is_empty());
        assert_eq!((c.dim_image(), c.dim_text()), (3, 2));
    }

    #[test]
    fn absent_optionals_are_omitted() {
        let dir = tmp();
        let p = dir.path().join("o.jsonl");
        save_corpus(&two_records(), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let first = text.lines().nth(1).unwrap();
        assert!(!first.contains("outlier_truth"));
        assert!(!first.contains("null"));
        assert!(!first.contains("extrapolated"));
        assert!(text.lines().nth(2).unwrap().contains("\"outlier_truth\":true"));
    }

    #[test]
    fn dimension_mismatch_names_the_record() {
        let dir = tmp();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(
            &p,
            "{\"schema_version\":1,\"dim_image\":2,\"dim_text\":1}\n\
             {\"id\":\"ok\",\"label\":\"a\",\"split\":\"web\",\"image_vec\":[1,2]}\n\
             {\"id\":\"bad-one\",\"label\":\"a\",\"split\":\"web\",\"image_vec\":[1,2,3]}\n",
        )
        .unwrap();
        match load_corpus(&p) {
            Err(Error::DimensionMismatch { id, .. }) => assert_eq!(id, "bad-one"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_errors() {
        let dir = tmp();
        assert!(matches!(load_corpus(dir.path().join("missing")), Err(Error::Io { .. })));

        let p = dir.path().join("noschema.jsonl");
        std::fs::write(&p, "{\"id\":\"a\",\"label\":\"a\",\"split\":\"web\",\"image_vec\":[1]}\n").unwrap();
        assert!(matches!(load_corpus(&p), Err(Error::MissingSchema { .. })));

        std::fs::write(&p, "").unwrap();
        assert!(matches!(load_corpus(&p), Err(Error::MissingSchema { .. })));

        let p = dir.path().join("dup.jsonl");
        std::fs::write(
            &p,
            "{\"schema_version\":1,\"dim_image\":1,\"dim_text\":1}\n\
             {\"id\":\"a\",\"label\":\"a\",\"split\":\"web\",\"image_vec\":[1]}\n\
             {\"id\":\"a\",\"label\":\"b\",\"split\":\"web\",\"image_vec\":[2]}\n",
        )
        .unwrap();
        assert!(matches!(load_corpus(&p), Err(Error::DuplicateId(id)) if id == "a"));

        let p = dir.path().join("garbage.jsonl");
        std::fs::write(&p, "{\"schema_version\":1,\"dim_image\":1,\"dim_text\":1}\nnot json\n").unwrap();
        assert!(matches!(load_corpus(&p), Err(Error::Malformed { line: 2, .. })));
    }

    #[test]
    fn canonical_text_is_the_mean() {
        let r = EmbeddingRecord::new("a", "x", Split::Dataset, vec![0.0]).with_text(vec![vec![1.0, 0.0], vec![0.0, 3.0]]);
        assert_eq!(r.canonical_text().unwrap(), vec![0.5, 1.5]);
    }

    #[test]
    fn synth_outlier_quota_is_exact() {
        let cfg = SynthConfig {
            n_classes: 10,
            web_per_class: 100,
            outlier_fraction: 0.2,
            ..Default::default()
        };
        let (_, web) = generate_synthetic(&cfg).unwrap();
        assert_eq!(web.len(), 1000);
        let flagged = web.records().iter().filter(|r| r.outlier_truth == Some(true)).count();
        assert_eq!(flagged, 200);
    }

    #[test]
    fn synth_without_outliers() {
        let cfg = SynthConfig {
            outlier_fraction: 0.0,
            ..Default::default()
        };
        let (_, web) = generate_synthetic(&cfg).unwrap();
        assert!(web.records().iter().all(|r| r.outlier_truth == Some(false)));
    }

    #[test]
    fn synth_is_deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap().0, generate_synthetic(&other).unwrap().0);
    }

    #[test]
    fn synth_joint_map_text_is_linear_in_image() {
        let cfg = SynthConfig {
            joint_map: true,
            ..Default::default()
        };
        let w = generate_world(&cfg).unwrap();
        for r in w.dataset.records() {
            let x = DVector::from_column_slice(&r.image_vec);
            let expect = &w.text_map * x;
            for t in &r.text_vecs {
                assert_eq!(t.as_slice(), expect.as_slice());
            }
        }
    }

    #[test]
    fn synth_rejects_bad_config() {
        let bad = SynthConfig {
            outlier_fraction: 1.5,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&bad), Err(Error::Config(_))));
        let bad = SynthConfig {
            separation: 0.0,
            ..Default::default()
        };
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn synth_class_separation_holds() {
        let cfg = SynthConfig::default();
        let w = generate_world(&cfg).unwrap();
        let mut dmin = f64::INFINITY;
        for i in 0..w.class_centers.len() {
            for j in i + 1..w.class_centers.len() {
                dmin = dmin.min(dist(&w.class_centers[i], &w.class_centers[j]));
            }
        }
        assert!((dmin - cfg.separation * cfg.within_std).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(
            vals in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 6),
            truth in proptest::option::of(any::<bool>()),
        ) {
            let dir = tmp();
            let p = dir.path().join("p.jsonl");
            let mut r = EmbeddingRecord::new("r", "lbl", Split::Dataset, vals[..3].to_vec())
                .with_text(vec![vals[3..].to_vec()]);
            r.outlier_truth = truth;
            let c = Corpus::new(3, 3, vec![r]).unwrap();
            save_corpus(&c, &p).unwrap();
            let back = load_corpus(&p).unwrap();
            for (a, b) in back.records()[0].image_vec.iter().zip(&c.records()[0].image_vec) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(back, c);
        }
    }
}
