//! Config-driven orchestration: corpus → filter → extrapolate → train →
//! finetune → sample → eval, with a hashed artifact manifest.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{generate_synthetic, load_corpus, save_corpus, Corpus, EmbeddingRecord, Split, SynthConfig};
use crate::denoiser::{init_denoiser, save_checkpoint, DenoiserConfig, DenoiserParams};
use crate::detect::{classifier_filter, cluster_filter, train_classifier, ClassifierConfig, ClusterFilterConfig, SoftmaxClassifier};
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::evaluate::{frechet_between, inception_score, metric_features};
use crate::extrapolate::{extrapolate_corpus, ExtrapolateConfig};
use crate::rng;
use crate::sample::{make_null_condition, sample_conditions, GuidanceConfig, NullMode};
use crate::training::{fine_tune, train, FrechetMonitor, TrainConfig, TrainHistory};

pub const MANIFEST: &str = "manifest.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const REPORT_CSV: &str = "report.csv";

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Corpus,
    Filter,
    Extrapolate,
    Train,
    Finetune,
    Sample,
    Eval,
    Report,
}

pub const STAGE_ORDER: [Stage; 7] = [Stage::Corpus, Stage::Filter, Stage::Extrapolate, Stage::Train, Stage::Finetune, Stage::Sample, Stage::Eval];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Corpus => "corpus",
            Stage::Filter => "filter",
            Stage::Extrapolate => "extrapolate",
            Stage::Train => "train",
            Stage::Finetune => "finetune",
            Stage::Sample => "sample",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    /// Process exit code when this stage fails.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Corpus => 10,
            Stage::Filter => 11,
            Stage::Extrapolate => 12,
            Stage::Train => 13,
            Stage::Finetune => 14,
            Stage::Sample => 15,
            Stage::Eval => 16,
            Stage::Report => 17,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        self.stage.exit_code()
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    Synth,
    Import,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub source: CorpusSource,
    /// L2-normalize image and text vectors after loading or synthesis.
    pub normalize: bool,
    pub dataset_path: Option<PathBuf>,
    pub web_path: Option<PathBuf>,
    pub synth: SynthConfig,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            source: CorpusSource::Synth,
            normalize: false,
            dataset_path: None,
            web_path: None,
            synth: SynthConfig {
                domain_offset: 0.0,
                ..SynthConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub cluster: ClusterFilterConfig,
    pub classifier: ClassifierConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub guidance: GuidanceConfig,
    pub samples_per_label: usize,
    /// Guidance ratios to sample and evaluate; empty means `guidance.eta` only.
    pub sweep: Vec<f64>,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            guidance: GuidanceConfig::default(),
            samples_per_label: 200,
            sweep: Vec::new(),
        }
    }
}

impl SampleSection {
    pub fn etas(&self) -> Vec<f64> {
        if self.sweep.is_empty() {
            vec![self.guidance.eta]
        } else {
            self.sweep.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Samples per label drawn by the fine-tuning monitor.
    pub monitor_samples_per_label: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            monitor_samples_per_label: 64,
        }
    }
}

/// Component switches. Both detectors off sends the raw web corpus to
/// extrapolation; `rat` off disables the recurrent text state; `null_guidance`
/// off samples with the plain conditional estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub cluster_filter: bool,
    pub classifier_filter: bool,
    pub extrapolate: bool,
    pub rat: bool,
    pub train: bool,
    pub finetune: bool,
    pub null_guidance: bool,
    pub sample: bool,
    pub eval: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages {
            cluster_filter: true,
            classifier_filter: true,
            extrapolate: true,
            rat: true,
            train: true,
            finetune: true,
            null_guidance: true,
            sample: true,
            eval: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Mixed into every stage's own seed.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub stages: Stages,
    pub corpus: CorpusSection,
    pub detect: DetectSection,
    pub extrapolate: ExtrapolateConfig,
    pub diffusion: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub training: TrainConfig,
    pub sample: SampleSection,
    pub evaluate: EvaluateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            stages: Stages::default(),
            corpus: CorpusSection::default(),
            detect: DetectSection::default(),
            extrapolate: ExtrapolateConfig::default(),
            diffusion: ScheduleConfig::default(),
            denoiser: DenoiserConfig {
                n_layers: 4,
                layers_per_rat: 2,
                ..DenoiserConfig::default()
            },
            training: TrainConfig {
                lr: 1e-3,
                max_epochs: 40,
                finetune_max_epochs: 10,
                ..TrainConfig::default()
            },
            sample: SampleSection::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses a possibly partial config. Keys missing at any depth keep
    /// the values of [`RunConfig::default`].
    pub fn from_toml(text: &str) -> Result<Self> {
        let over: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, over);
        toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Structural checks that need no data.
    pub fn validate(&self) -> Result<()> {
        if self.corpus.source == CorpusSource::Import {
            for (what, p) in [("dataset_path", &self.corpus.dataset_path), ("web_path", &self.corpus.web_path)] {
                match p {
                    None => return Err(Error::Config(format!("corpus.source = \"import\" needs corpus.{what}"))),
                    Some(p) if !p.exists() => return Err(Error::Config(format!("corpus.{what} {} does not exist", p.display()))),
                    _ => {}
                }
            }
        } else {
            self.corpus.synth.validate()?;
        }
        self.denoiser.validate()?;
        self.training.validate()?;
        self.diffusion.build()?;
        if self.sample.samples_per_label < 2 || self.evaluate.monitor_samples_per_label < 2 {
            return Err(Error::Config("sample and monitor counts per label must be >= 2".into()));
        }
        if self.sample.etas().iter().any(|e| !e.is_finite()) {
            return Err(Error::Config("guidance ratios must be finite".into()));
        }
        Ok(())
    }

    /// Effective seed for one stage: the global seed mixed with the
    /// stage's own configured seed.
    pub fn stage_seed(&self, stage: &str, own: u64) -> u64 {
        rng::derive(self.seed, &format!("{stage}/{own}"))
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            recurrent: self.denoiser.recurrent && self.stages.rat,
            seed: self.stage_seed("denoiser", self.denoiser.seed),
            ..self.denoiser.clone()
        }
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            seed: self.stage_seed("classifier", self.detect.classifier.seed),
            ..self.detect.classifier.clone()
        }
    }

    pub fn cluster_config(&self) -> ClusterFilterConfig {
        ClusterFilterConfig {
            seed: self.stage_seed("cluster", self.detect.cluster.seed),
            ..self.detect.cluster.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed("train", self.training.seed),
            ..self.training.clone()
        }
    }

    pub fn sample_seed(&self, eta: f64) -> u64 {
        self.stage_seed("sample", eta.to_bits())
    }

    pub fn monitor_seed(&self) -> u64 {
        self.stage_seed("monitor", 0)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub stage: Stage,
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<ArtifactEntry>,
}

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.artifacts.iter().map(|a| (a.path.clone(), a.sha256.clone())).collect()
    }
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Checks that every artifact in the manifest exists with its recorded hash.
pub fn verify_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let m = Manifest::load(dir)?;
    for a in &m.artifacts {
        let got = sha256_file(dir.join(&a.path))?;
        if got != a.sha256 {
            return Err(Error::Checkpoint(format!("{} hash {} differs from manifest {}", a.path, got, a.sha256)));
        }
    }
    Ok(m)
}

struct Run<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
    manifest: Manifest,
}

impl Run<'_> {
    fn record(&mut self, stage: Stage, name: &str) -> Result<()> {
        let path = self.dir.join(name);
        let bytes = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
        self.manifest.artifacts.push(ArtifactEntry {
            stage,
            path: name.to_string(),
            sha256: sha256_file(&path)?,
            bytes,
        });
        Ok(())
    }

    fn write(&mut self, stage: Stage, name: &str, contents: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.record(stage, name)
    }

    fn write_json<T: Serialize>(&mut self, stage: Stage, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
        text.push(b'\n');
        self.write(stage, name, &text)
    }

    fn save_corpus(&mut self, stage: Stage, name: &str, c: &Corpus) -> Result<()> {
        save_corpus(c, self.dir.join(name))?;
        self.record(stage, name)
    }

    fn save_model(&mut self, stage: Stage, name: &str, p: &DenoiserParams) -> Result<()> {
        save_checkpoint(p, self.dir.join(name))?;
        self.record(stage, name)
    }

    fn mark(&mut self, stage: Stage, status: StageStatus) {
        self.manifest.stages.push(StageRecord { stage, status });
    }

    fn save_manifest(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST);
        let mut text = serde_json::to_vec_pretty(&self.manifest).map_err(|e| Error::Serde(e.to_string()))?;
        text.push(b'\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// One evaluated sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub eta: f64,
    /// Mean over labels of the per-label Fréchet distance.
    pub frechet: f64,
    pub inception_score: f64,
    /// Share of samples the classifier assigns to their conditioning label.
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub eval: Vec<EvalRow>,
}

/// Corpus preparation: synthesize or import, then optional L2 normalization.
pub fn prepare_corpora(cfg: &RunConfig) -> Result<(Corpus, Corpus)> {
    let (dataset, web) = match cfg.corpus.source {
        CorpusSource::Synth => generate_synthetic(&SynthConfig {
            seed: cfg.stage_seed("synth", cfg.corpus.synth.seed),
            ..cfg.corpus.synth.clone()
        })?,
        CorpusSource::Import => {
            let d = load_corpus(cfg.corpus.dataset_path.as_ref().ok_or_else(|| Error::Config("missing corpus.dataset_path".into()))?)?;
            let w = load_corpus(cfg.corpus.web_path.as_ref().ok_or_else(|| Error::Config("missing corpus.web_path".into()))?)?;
            (d.filter_split(Split::Dataset), w.filter_split(Split::Web))
        }
    };
    if dataset.is_empty() {
        return Err(Error::Empty("dataset split"));
    }
    if cfg.corpus.normalize {
        Ok((dataset.l2_normalized(), web.l2_normalized()))
    } else {
        Ok((dataset, web))
    }
}

/// Mean canonical text feature per label, labels in first-appearance order.
pub fn label_conditions(dataset: &Corpus) -> Result<Vec<(String, Vec<f64>)>> {
    dataset
        .labels()
        .into_iter()
        .map(|l| {
            let members: Vec<EmbeddingRecord> = dataset.records().iter().filter(|r| r.label == l).cloned().collect();
            let group = Corpus::new(dataset.dim_image(), dataset.dim_text(), members)?;
            Ok((l, make_null_condition(&group, &NullMode::MeanText)?))
        })
        .collect()
}

/// `n` samples per label, each tagged with its conditioning label and
/// `generated = true`.
#[allow(clippy::too_many_arguments)]
pub fn generate_labelled(
    params: &DenoiserParams,
    dataset: &Corpus,
    guidance: &GuidanceConfig,
    null_guidance: bool,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<Corpus> {
    let mut g = guidance.resolve(dataset, sched)?;
    if !null_guidance {
        g.eta = 1.0;
    }
    let conds = label_conditions(dataset)?;
    let mut records = Vec::new();
    for (li, (label, cond)) in conds.iter().enumerate() {
        let xs = if null_guidance {
            sample_conditions(params, params.config.latent_len(), &vec![cond.clone(); n], &g, sched, rng::derive(seed, label))?
        } else {
            crate::sample::sample_unguided(params, params.config.latent_len(), cond, g.steps, sched, n, rng::derive(seed, label))?
        };
        for (i, x) in xs.into_iter().enumerate() {
            let mut r = EmbeddingRecord::new(format!("g{li:03}-{i:05}"), label.clone(), Split::Web, x).with_text(vec![cond.clone()]);
            r.generated = true;
            records.push(r);
        }
    }
    Corpus::new(dataset.dim_image(), dataset.dim_text(), records)
}

/// Fréchet (per label, averaged), Inception-Score analogue and label
/// accuracy of `generated` against `real`.
pub fn evaluate_generated(real: &Corpus, generated: &Corpus, clf: &SoftmaxClassifier, eta: f64) -> Result<EvalRow> {
    let labels = real.labels();
    let mut total = 0.0;
    let mut used = 0;
    for l in &labels {
        let r: Vec<Vec<f64>> = real.records().iter().filter(|x| &x.label == l).map(|x| x.image_vec.clone()).collect();
        let g: Vec<Vec<f64>> = generated.records().iter().filter(|x| &x.label == l).map(|x| x.image_vec.clone()).collect();
        if r.len() < 2 || g.len() < 2 {
            continue;
        }
        total += frechet_between(&metric_features(&r, Some(clf))?, &metric_features(&g, Some(clf))?)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Empty("labels with at least two real and two generated records"));
    }
    let xs: Vec<Vec<f64>> = generated.records().iter().map(|r| r.image_vec.clone()).collect();
    let labels: Vec<String> = generated.records().iter().map(|r| r.label.clone()).collect();
    Ok(EvalRow {
        eta,
        frechet: total / used as f64,
        inception_score: inception_score(&xs, clf)?,
        accuracy: clf.accuracy(&xs, &labels),
    })
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("eta,frechet,inception_score,accuracy\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.eta, r.frechet, r.inception_score, r.accuracy);
    }
    s
}

pub fn samples_file(eta: f64) -> String {
    format!("samples_eta{eta}.jsonl")
}

/// Runs every enabled stage in [`STAGE_ORDER`], writing artifacts and a
/// manifest under `cfg.out_dir`. On failure the manifest records the failed
/// stage and everything written so far stays in place.
pub fn run_pipeline(cfg: &RunConfig) -> std::result::Result<RunSummary, StageError> {
    cfg.validate().at(Stage::Config)?;
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e)).at(Stage::Config)?;
    let config_text = cfg.to_toml().at(Stage::Config)?;
    let mut run = Run {
        cfg,
        dir,
        manifest: Manifest {
            config_sha256: hex::encode(Sha256::digest(config_text.as_bytes())),
            stages: Vec::new(),
            artifacts: Vec::new(),
        },
    };
    run.write(Stage::Config, "config.toml", config_text.as_bytes()).at(Stage::Config)?;
    let result = stages(&mut run);
    if let Err(e) = &result {
        run.mark(e.stage, StageStatus::Failed);
    }
    run.save_manifest().at(Stage::Report)?;
    let eval = result?;
    Ok(RunSummary {
        dir: run.dir.clone(),
        manifest: run.manifest.clone(),
        eval,
    })
}

fn stages(run: &mut Run) -> std::result::Result<Vec<EvalRow>, StageError> {
    let cfg = run.cfg;
    let on = &cfg.stages;

    let s = Stage::Corpus;
    let (dataset, web) = prepare_corpora(cfg).at(s)?;
    run.save_corpus(s, "dataset.jsonl", &dataset).at(s)?;
    run.save_corpus(s, "web.jsonl", &web).at(s)?;
    run.mark(s, StageStatus::Ran);

    let s = Stage::Filter;
    let clf = train_classifier(&dataset, &cfg.classifier_config()).at(s)?;
    run.write_json(s, "classifier.json", &clf).at(s)?;
    let mut kept = web.clone();
    if on.cluster_filter {
        let rep = cluster_filter(&kept, &dataset, &cfg.cluster_config()).at(s)?;
        for w in &rep.warnings {
            log::warn!("{w}");
        }
        rep.write_audit(run.dir.join("filter_cluster.jsonl")).at(s)?;
        run.record(s, "filter_cluster.jsonl").at(s)?;
        kept = kept.retain_ids(&rep.kept_set());
    }
    if on.classifier_filter {
        let rep = classifier_filter(&kept, &clf).at(s)?;
        rep.write_audit(run.dir.join("filter_classifier.jsonl")).at(s)?;
        run.record(s, "filter_classifier.jsonl").at(s)?;
        kept = kept.retain_ids(&rep.kept_set());
    }
    run.save_corpus(s, "web_kept.jsonl", &kept).at(s)?;
    run.mark(s, if on.cluster_filter || on.classifier_filter { StageStatus::Ran } else { StageStatus::Skipped });
    log::info!("filter: kept {} of {} web records", kept.len(), web.len());

    let s = Stage::Extrapolate;
    let train_corpus = if on.extrapolate {
        let c = extrapolate_corpus(&kept, &dataset, &cfg.extrapolate).at(s)?;
        run.save_corpus(s, "extrapolated.jsonl", &c).at(s)?;
        run.mark(s, StageStatus::Ran);
        c
    } else {
        run.mark(s, StageStatus::Skipped);
        dataset.clone()
    };

    let sched = cfg.diffusion.build().at(Stage::Train)?;
    let s = Stage::Train;
    let init = init_denoiser(&cfg.denoiser_config()).at(s)?;
    let train_cfg = cfg.train_config();
    let mut model = if on.train {
        let (p, h) = train(&train_corpus, &init, &sched, &train_cfg).at(s)?;
        log::info!("train: {} epochs in {:.1}s", h.epochs(), h.wall_clock_secs);
        run.save_model(s, "model_train.ckpt", &p).at(s)?;
        run.write(s, "train_metrics.csv", h.to_csv().as_bytes()).at(s)?;
        run.write_json(s, "train_history.json", &h).at(s)?;
        run.mark(s, StageStatus::Ran);
        p
    } else {
        run.mark(s, StageStatus::Skipped);
        init
    };

    let s = Stage::Finetune;
    if on.finetune {
        let mut guidance = cfg.sample.guidance.resolve(&dataset, &sched).at(s)?;
        if !on.null_guidance {
            guidance.eta = 1.0;
        }
        let mut monitor = FrechetMonitor {
            reference: &dataset,
            sched: &sched,
            guidance,
            samples_per_label: cfg.evaluate.monitor_samples_per_label,
            seed: cfg.monitor_seed(),
            classifier: Some(&clf),
        };
        let (p, h): (DenoiserParams, TrainHistory) = fine_tune(&model, &dataset, &sched, &train_cfg, &mut monitor).at(s)?;
        log::info!("finetune: {} epochs, best eval {:?}, {:.1}s", h.epochs(), h.best_eval, h.wall_clock_secs);
        run.save_model(s, "model_finetune.ckpt", &p).at(s)?;
        run.write(s, "finetune_metrics.csv", h.to_csv().as_bytes()).at(s)?;
        run.write_json(s, "finetune_history.json", &h).at(s)?;
        run.mark(s, StageStatus::Ran);
        model = p;
    } else {
        run.mark(s, StageStatus::Skipped);
    }

    let s = Stage::Sample;
    let etas = cfg.sample.etas();
    let mut generated = Vec::new();
    if on.sample {
        for &eta in &etas {
            let g = GuidanceConfig {
                eta,
                ..cfg.sample.guidance.clone()
            };
            let c = generate_labelled(
                &model,
                &dataset,
                &g,
                on.null_guidance,
                &sched,
                cfg.sample.samples_per_label,
                cfg.sample_seed(eta),
            )
            .at(s)?;
            run.save_corpus(s, &samples_file(eta), &c).at(s)?;
            generated.push((eta, c));
        }
        run.mark(s, StageStatus::Ran);
    } else {
        run.mark(s, StageStatus::Skipped);
    }

    let s = Stage::Eval;
    let mut rows = Vec::new();
    if on.eval && !generated.is_empty() {
        for (eta, c) in &generated {
            rows.push(evaluate_generated(&dataset, c, &clf, *eta).at(s)?);
        }
        run.write(s, EVAL_CSV, eval_csv(&rows).as_bytes()).at(s)?;
        run.mark(s, StageStatus::Ran);
    } else {
        run.mark(s, StageStatus::Skipped);
    }
    Ok(rows)
}

/// Runs the pipeline once with the guidance sweep replaced by `etas`.
pub fn run_sweep(cfg: &RunConfig, etas: &[f64]) -> std::result::Result<RunSummary, StageError> {
    let mut c = cfg.clone();
    c.sample.sweep = etas.to_vec();
    run_pipeline(&c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub csv: PathBuf,
    pub svgs: Vec<PathBuf>,
    pub rows: usize,
}

fn read_history(path: &Path) -> Result<Option<TrainHistory>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map(Some).map_err(|e| Error::Serde(e.to_string()))
}

fn parse_eval_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("eta,frechet,inception_score,accuracy") {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            line: 1,
            reason: "unexpected header".into(),
        });
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                line: i + 2,
                reason: e.to_string(),
            })?;
            if v.len() != 4 {
                return Err(Error::Malformed {
                    path: path.to_path_buf(),
                    line: i + 2,
                    reason: format!("expected 4 fields, got {}", v.len()),
                });
            }
            Ok(EvalRow {
                eta: v[0],
                frechet: v[1],
                inception_score: v[2],
                accuracy: v[3],
            })
        })
        .collect()
}

/// Aggregates a finished run into `report.csv`, and for 2-D latents one
/// real-versus-generated scatter SVG per sweep point.
pub fn emit_report(dir: impl AsRef<Path>) -> Result<ReportSummary> {
    let dir = dir.as_ref();
    let rows = parse_eval_csv(&dir.join(EVAL_CSV))?;
    let train = read_history(&dir.join("train_history.json"))?;
    let fine = read_history(&dir.join("finetune_history.json"))?;
    let final_loss = train.as_ref().and_then(|h| h.epoch_losses.last().copied());
    let best_metric = fine.as_ref().and_then(|h| h.best_eval.map(|i| h.evals[i].metric));
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();

    let mut csv = String::from("eta,frechet,inception_score,accuracy,train_final_loss,finetune_best_metric\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.eta,
            r.frechet,
            r.inception_score,
            r.accuracy,
            opt(final_loss),
            opt(best_metric)
        );
    }
    let csv_path = dir.join(REPORT_CSV);
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let mut svgs = Vec::new();
    let real = load_corpus(dir.join("dataset.jsonl"))?;
    if real.dim_image() == 2 {
        for r in &rows {
            let gen = load_corpus(dir.join(samples_file(r.eta)))?;
            let path = dir.join(format!("scatter_eta{}.svg", r.eta));
            fs::write(&path, scatter_svg(&real, &gen, &format!("eta = {}", r.eta))).map_err(|e| Error::io(&path, e))?;
            svgs.push(path);
        }
    }
    Ok(ReportSummary {
        csv: csv_path,
        svgs,
        rows: rows.len(),
    })
}

/// Real points as hollow circles, generated points filled, one colour per label.
pub fn scatter_svg(real: &Corpus, generated: &Corpus, title: &str) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 30.0;
    const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];
    let pts = real.records().iter().chain(generated.records());
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for r in pts.clone() {
        for d in 0..2 {
            lo[d] = lo[d].min(r.image_vec[d]);
            hi[d] = hi[d].max(r.image_vec[d]);
        }
    }
    let span = |d: usize| (hi[d] - lo[d]).max(1e-12);
    let px = |v: f64, d: usize| {
        let u = (v - lo[d]) / span(d);
        if d == 0 {
            PAD + u * (SIZE - 2.0 * PAD)
        } else {
            SIZE - PAD - u * (SIZE - 2.0 * PAD)
        }
    };
    let labels = real.labels();
    let color = |l: &str| COLORS[labels.iter().position(|x| x == l).unwrap_or(0) % COLORS.len()];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<text x=\"{PAD}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n"
    );
    for r in real.records() {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"none\" stroke=\"{}\"/>",
            px(r.image_vec[0], 0),
            px(r.image_vec[1], 1),
            color(&r.label)
        );
    }
    for r in generated.records() {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.5\" fill=\"{}\" fill-opacity=\"0.6\"/>",
            px(r.image_vec[0], 0),
            px(r.image_vec[1], 1),
            color(&r.label)
        );
    }
    s.push_str("</svg>\n");
    s
}
