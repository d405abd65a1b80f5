use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use linex::corpus::{load_corpus, save_corpus, Corpus, Split};
use linex::denoiser::{init_denoiser, load_checkpoint, save_checkpoint};
use linex::detect::{classifier_filter, cluster_filter, train_classifier, SoftmaxClassifier};
use linex::extrapolate::extrapolate_corpus;
use linex::pipeline::{
    emit_report, eval_csv, evaluate_generated, generate_labelled, prepare_corpora, run_pipeline, run_sweep, CorpusSource, RunConfig,
    RunSummary, Stage, StageError,
};
use linex::sample::GuidanceConfig;
use linex::training::{fine_tune, train, FrechetMonitor};

#[derive(Parser)]
#[command(name = "linex", version, about = "Text-feature extrapolation and a toy guided diffusion pipeline")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset/web corpus pair.
    Synth(OutDir),
    /// Load, validate and optionally normalize external corpus files.
    Import {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        web: PathBuf,
        #[arg(long)]
        no_normalize: bool,
        #[command(flatten)]
        out: OutDir,
    },
    /// Write a corpus as CSV (id, label, split, image_*, text_*).
    Export {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove web outliers with the cluster and/or classifier detector.
    Filter {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        web: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_cluster: bool,
        #[arg(long)]
        no_classifier: bool,
        /// Directory for per-record decision files.
        #[arg(long)]
        audit_dir: Option<PathBuf>,
    },
    /// Synthesize text features for web records from their dataset neighbours.
    Extrapolate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        web: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser on a corpus with text features.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Fine-tune on the original dataset with Fréchet-based early stopping.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Generate latents for every dataset label.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, short)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare generated latents against real ones.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        /// Guidance ratio recorded in the output row.
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every enabled stage and write a manifest.
    Pipeline(OutDir),
    /// Run the pipeline over several guidance ratios.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = [1.25, 1.5, 2.0])]
        etas: Vec<f64>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
    /// Aggregate a finished run into report.csv and scatter plots.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print the default configuration, or write it to a file.
    Init {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct OutDir {
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, env = "LINEX_OUT")]
    out_dir: Option<PathBuf>,
}

struct Failure {
    code: i32,
    err: anyhow::Error,
}

trait Code<T> {
    fn code(self, stage: Stage) -> std::result::Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Code<T> for std::result::Result<T, E> {
    fn code(self, stage: Stage) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure {
            code: stage.exit_code(),
            err: e.into(),
        })
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        Failure {
            code: e.exit_code(),
            err: e.into(),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn out_dir(cfg: &RunConfig, o: &OutDir) -> PathBuf {
    o.out_dir.clone().unwrap_or_else(|| cfg.out_dir.clone())
}

fn save(c: &Corpus, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_corpus(c, path).with_context(|| format!("writing {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn export_csv(c: &Corpus) -> String {
    let mut s = String::from("id,label,split");
    for i in 0..c.dim_image() {
        let _ = write!(s, ",image_{i}");
    }
    for i in 0..c.dim_text() {
        let _ = write!(s, ",text_{i}");
    }
    s.push('\n');
    for r in c.records() {
        let split = match r.split {
            Split::Dataset => "dataset",
            Split::Web => "web",
        };
        let _ = write!(s, "{},{},{}", r.id, r.label, split);
        for v in &r.image_vec {
            let _ = write!(s, ",{v}");
        }
        match r.canonical_text() {
            Some(t) => t.iter().for_each(|v| {
                let _ = write!(s, ",{v}");
            }),
            None => (0..c.dim_text()).for_each(|_| s.push(',')),
        }
        s.push('\n');
    }
    s
}

fn print_summary(s: &RunSummary) {
    println!("run directory: {}", s.dir.display());
    println!("artifacts: {}", s.manifest.artifacts.len());
    if !s.eval.is_empty() {
        print!("{}", eval_csv(&s.eval));
    }
}

fn classifier_for(cfg: &RunConfig, dataset: &Corpus) -> linex::Result<SoftmaxClassifier> {
    train_classifier(dataset, &cfg.classifier_config())
}

fn run(cli: Cli) -> Outcome {
    let cfg = load_config(cli.config.as_deref()).code(Stage::Config)?;
    match cli.command {
        Command::Config {
            action: ConfigAction::Init { out },
        } => {
            let text = RunConfig::default().to_toml().code(Stage::Config)?;
            match out {
                Some(p) => write(&p, &text).code(Stage::Config)?,
                None => print!("{text}"),
            }
        }
        Command::Synth(o) => {
            let dir = out_dir(&cfg, &o);
            let mut c = cfg.clone();
            c.corpus.source = CorpusSource::Synth;
            let (d, w) = prepare_corpora(&c).code(Stage::Corpus)?;
            save(&d, &dir.join("dataset.jsonl")).code(Stage::Corpus)?;
            save(&w, &dir.join("web.jsonl")).code(Stage::Corpus)?;
            println!("dataset: {} records, web: {} records -> {}", d.len(), w.len(), dir.display());
        }
        Command::Import {
            dataset,
            web,
            no_normalize,
            out,
        } => {
            let dir = out_dir(&cfg, &out);
            let mut c = cfg.clone();
            c.corpus.source = CorpusSource::Import;
            c.corpus.dataset_path = Some(dataset);
            c.corpus.web_path = Some(web);
            c.corpus.normalize = !no_normalize;
            let (d, w) = prepare_corpora(&c).code(Stage::Corpus)?;
            save(&d, &dir.join("dataset.jsonl")).code(Stage::Corpus)?;
            save(&w, &dir.join("web.jsonl")).code(Stage::Corpus)?;
            println!("dataset: {} records, web: {} records -> {}", d.len(), w.len(), dir.display());
        }
        Command::Export { corpus, out } => {
            let c = load_corpus(&corpus).code(Stage::Corpus)?;
            write(&out, &export_csv(&c)).code(Stage::Corpus)?;
        }
        Command::Filter {
            dataset,
            web,
            out,
            no_cluster,
            no_classifier,
            audit_dir,
        } => {
            let s = Stage::Filter;
            let d = load_corpus(&dataset).code(s)?;
            let w = load_corpus(&web).code(s)?;
            let mut kept = w.clone();
            if let Some(a) = &audit_dir {
                fs::create_dir_all(a).code(s)?;
            }
            if !no_cluster {
                let rep = cluster_filter(&kept, &d, &cfg.cluster_config()).code(s)?;
                for warning in &rep.warnings {
                    log::warn!("{warning}");
                }
                if let Some(a) = &audit_dir {
                    rep.write_audit(a.join("filter_cluster.jsonl")).code(s)?;
                }
                kept = kept.retain_ids(&rep.kept_set());
            }
            if !no_classifier {
                let clf = classifier_for(&cfg, &d).code(s)?;
                let rep = classifier_filter(&kept, &clf).code(s)?;
                if let Some(a) = &audit_dir {
                    rep.write_audit(a.join("filter_classifier.jsonl")).code(s)?;
                }
                kept = kept.retain_ids(&rep.kept_set());
            }
            save(&kept, &out).code(s)?;
            println!("kept {} of {} web records", kept.len(), w.len());
        }
        Command::Extrapolate { dataset, web, out } => {
            let s = Stage::Extrapolate;
            let d = load_corpus(&dataset).code(s)?;
            let w = load_corpus(&web).code(s)?;
            let c = extrapolate_corpus(&w, &d, &cfg.extrapolate).code(s)?;
            save(&c, &out).code(s)?;
            println!("{} records ({} extrapolated)", c.len(), c.len() - d.len());
        }
        Command::Train { corpus, init, out, metrics } => {
            let s = Stage::Train;
            let c = load_corpus(&corpus).code(s)?;
            let sched = cfg.diffusion.build().code(s)?;
            let p0 = match init {
                Some(p) => load_checkpoint(&p).code(s)?,
                None => init_denoiser(&cfg.denoiser_config()).code(s)?,
            };
            let (p, h) = train(&c, &p0, &sched, &cfg.train_config()).code(s)?;
            let hash = save_checkpoint(&p, &out).code(s)?;
            if let Some(m) = metrics {
                write(&m, &h.to_csv()).code(s)?;
            }
            println!("{} epochs, final loss {:?}, {hash}", h.epochs(), h.epoch_losses.last());
        }
        Command::Finetune {
            model,
            dataset,
            out,
            metrics,
        } => {
            let s = Stage::Finetune;
            let p0 = load_checkpoint(&model).code(s)?;
            let d = load_corpus(&dataset).code(s)?;
            let sched = cfg.diffusion.build().code(s)?;
            let clf = classifier_for(&cfg, &d).code(s)?;
            let mut monitor = FrechetMonitor {
                reference: &d,
                sched: &sched,
                guidance: cfg.sample.guidance.resolve(&d, &sched).code(s)?,
                samples_per_label: cfg.evaluate.monitor_samples_per_label,
                seed: cfg.monitor_seed(),
                classifier: Some(&clf),
            };
            let (p, h) = fine_tune(&p0, &d, &sched, &cfg.train_config(), &mut monitor).code(s)?;
            let hash = save_checkpoint(&p, &out).code(s)?;
            if let Some(m) = metrics {
                write(&m, &h.to_csv()).code(s)?;
            }
            println!("{} epochs, best eval {:?}, stopped early: {}, {hash}", h.epochs(), h.best_eval, h.stopped_early);
        }
        Command::Sample {
            model,
            dataset,
            out,
            eta,
            n,
            seed,
        } => {
            let s = Stage::Sample;
            let p = load_checkpoint(&model).code(s)?;
            let d = load_corpus(&dataset).code(s)?;
            let sched = cfg.diffusion.build().code(s)?;
            let eta = eta.unwrap_or(cfg.sample.guidance.eta);
            let g = GuidanceConfig {
                eta,
                ..cfg.sample.guidance.clone()
            };
            let n = n.unwrap_or(cfg.sample.samples_per_label);
            let seed = seed.unwrap_or_else(|| cfg.sample_seed(eta));
            let c = generate_labelled(&p, &d, &g, cfg.stages.null_guidance, &sched, n, seed).code(s)?;
            save(&c, &out).code(s)?;
            println!("{} samples -> {}", c.len(), out.display());
        }
        Command::Eval { real, generated, eta, out } => {
            let s = Stage::Eval;
            let r = load_corpus(&real).code(s)?;
            let g = load_corpus(&generated).code(s)?;
            let r = r.filter_split(Split::Dataset);
            let clf = classifier_for(&cfg, &r).code(s)?;
            let row = evaluate_generated(&r, &g, &clf, eta).code(s)?;
            let text = eval_csv(&[row]);
            match out {
                Some(p) => write(&p, &text).code(s)?,
                None => print!("{text}"),
            }
        }
        Command::Pipeline(o) => {
            let mut c = cfg.clone();
            c.out_dir = out_dir(&cfg, &o);
            print_summary(&run_pipeline(&c)?);
        }
        Command::Sweep { etas, out } => {
            let mut c = cfg.clone();
            c.out_dir = out_dir(&cfg, &out);
            print_summary(&run_sweep(&c, &etas)?);
        }
        Command::Report { run_dir } => {
            let rep = emit_report(&run_dir).code(Stage::Report)?;
            println!("{} rows -> {}", rep.rows, rep.csv.display());
            for svg in rep.svgs {
                println!("{}", svg.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code as u8)
        }
    }
}
