//! `vae-anomaly`: synthesize data, train, score, evaluate and inspect
//! reconstructions.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
//! configuration error. Log verbosity follows `RUST_LOG` (default `info`).

mod config;
mod grid;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vae_anomaly::data::{load_preprocessed, save_image, synth_generate, DatasetManifest, Split, SynthKind};
use vae_anomaly::metrics::evaluate;
use vae_anomaly::model::VaeModel;
use vae_anomaly::scores::{score_batch, ScoreFailure, ScoreKind, ScoreReport};
use vae_anomaly::train::{checkpoint_dtype, checkpoint_id, train_from_manifest, Checkpoint, BEST_CHECKPOINT, FINAL_CHECKPOINT, TRAIN_LOG};
use vae_anomaly::{DType, Real, Tensor};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "vae-anomaly", version, about = "Image anomaly detection with a beta-VAE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic blobs corpus and its manifest.
    Synth(SynthArgs),
    /// Train on the train split of a manifest, validating on val.
    Train(TrainArgs),
    /// Compute anomaly scores for manifest images with a checkpoint.
    Score(ScoreArgs),
    /// AUC-ROC per anomaly class from one or more score files.
    Eval(EvalArgs),
    /// Write a grid of originals next to their reconstructions.
    Reconstruct(ReconstructArgs),
    /// Print or check run configurations.
    Config(ConfigArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Corpus kind (only `blobs`).
    #[arg(long, default_value = "blobs")]
    kind: SynthKind,
    /// Number of images.
    #[arg(long, default_value_t = 600)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Fraction of anomalous images.
    #[arg(long, default_value_t = 0.25)]
    anomaly_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (JSON); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest [overrides data.manifest].
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory for checkpoints and the log [overrides train.checkpoint_dir; default: run]
    #[arg(long)]
    out: Option<PathBuf>,
    /// [default: 40]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 0.0001]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// KL weight; the likelihood sigma follows as sqrt(beta/2) [default: 0.01]
    #[arg(long)]
    beta: Option<f64>,
    /// [default: 300]
    #[arg(long)]
    latent_dim: Option<usize>,
    /// [default: 128]
    #[arg(long)]
    image_size: Option<usize>,
    /// [default: 64]
    #[arg(long)]
    base_channels: Option<usize>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run configuration supplying score defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// [overrides data.manifest]
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Comma-separated splits; `test` means test_normal and test_anomaly.
    #[arg(long, default_value = "test")]
    splits: String,
    /// Comma-separated score names or `all` [default: all]
    #[arg(long, value_parser = parse_scores)]
    scores: Option<ScoreList>,
    /// Posterior samples per image [default: 15]
    #[arg(long = "samples", short = 'L')]
    samples: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV; a JSON sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Score CSVs; several files are treated as runs and averaged.
    #[arg(required = true)]
    scores: Vec<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = vae_anomaly::data::NORMAL_LABEL)]
    normal_label: String,
    /// Output directory for eval.csv, eval.json and ROC curves.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test_normal")]
    split: Split,
    /// Number of images (rows).
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Output PPM.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Print the default run configuration.
    #[arg(long)]
    dump_defaults: bool,
    /// Validate a run configuration and print it with defaults filled in.
    #[arg(long, conflicts_with = "dump_defaults")]
    check: Option<PathBuf>,
}

#[derive(Clone)]
struct ScoreList(Vec<ScoreKind>);

fn parse_scores(s: &str) -> Result<ScoreList, String> {
    ScoreKind::parse_list(s).map(ScoreList).map_err(|e| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<vae_anomaly::Error> for Failure {
    fn from(e: vae_anomaly::Error) -> Self {
        match e {
            vae_anomaly::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Config(a) => cmd_config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    if !(0.0..=1.0).contains(&a.anomaly_rate) {
        return Err(Failure::Usage(format!("--anomaly-rate {} outside [0, 1]", a.anomaly_rate)));
    }
    let (m, path) = synth_generate(a.kind, a.n, a.image_size, a.anomaly_rate, a.seed, &a.out)?;
    let normal = m.records.iter().filter(|r| r.label == vae_anomaly::data::NORMAL_LABEL).count();
    log::info!("{normal} normal, {} anomalous images", m.records.len() - normal);
    println!("{}", path.display());
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => RunConfig::load(p).map_err(Failure::Usage),
        None => Ok(RunConfig::default()),
    }
}

fn load_manifest(path: Option<PathBuf>) -> Result<DatasetManifest, Failure> {
    let path = path.ok_or_else(|| Failure::Usage("no manifest: pass --manifest or set data.manifest".into()))?;
    if !path.is_file() {
        return Err(Failure::Usage(format!("manifest not found: {}", path.display())));
    }
    DatasetManifest::load(&path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(v) = a.manifest {
        cfg.data.manifest = Some(v);
    }
    if let Some(v) = a.out {
        cfg.train.checkpoint_dir = Some(v);
    }
    cfg.train.checkpoint_dir.get_or_insert_with(|| PathBuf::from("run"));
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.beta {
        cfg.model.beta = v;
        cfg.model.likelihood_sigma = (v / 2.0).sqrt();
    }
    if let Some(v) = a.latent_dim {
        cfg.model.latent_dim = v;
    }
    if let Some(v) = a.image_size {
        cfg.model.image_size = v;
    }
    if let Some(v) = a.base_channels {
        cfg.model.base_channels = v;
    }
    cfg.validate().map_err(Failure::Usage)?;
    let manifest = load_manifest(cfg.data.manifest.clone())?;
    manifest.validate(&cfg.data.normal_label)?;
    log::info!("run config:\n{}", cfg.to_json());

    let out = train_from_manifest::<f32>(cfg.model.clone(), &manifest, &cfg.train, |_| {})?;
    let dir = cfg.train.checkpoint_dir.as_deref().expect("set above");
    let best = out.best_checkpoint.epoch;
    println!("best epoch {best}: {}", dir.join(BEST_CHECKPOINT).display());
    println!("final: {}", dir.join(FINAL_CHECKPOINT).display());
    println!("log: {}", dir.join(TRAIN_LOG).display());
    Ok(())
}

enum AnyModel {
    F32(VaeModel<f32>),
    F64(VaeModel<f64>),
}

impl AnyModel {
    fn config(&self) -> &vae_anomaly::model::ModelConfig {
        match self {
            AnyModel::F32(m) => &m.config,
            AnyModel::F64(m) => &m.config,
        }
    }

    /// `decode(encode-mean)` of one CHW image.
    fn reconstruct(&self, x: &[f64]) -> vae_anomaly::Result<Vec<f64>> {
        fn go<T: Real>(m: &VaeModel<T>, x: &[f64]) -> vae_anomaly::Result<Vec<f64>> {
            let s = m.config.image_size;
            let t = Tensor::new(vec![1, m.config.in_channels, s, s], x.iter().map(|v| T::c(*v)).collect())?;
            let q = m.encode(&t)?;
            let y = m.decode(&q.mean)?;
            Ok(y.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
        }
        match self {
            AnyModel::F32(m) => go(m, x),
            AnyModel::F64(m) => go(m, x),
        }
    }
}

fn load_model(path: &Path) -> Result<(AnyModel, String), Failure> {
    let bytes = std::fs::read(path)
        .map_err(|e| Failure::Runtime(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let with_path = |e: vae_anomaly::Error| Failure::Runtime(format!("{}: {e}", path.display()));
    let model = match checkpoint_dtype(&bytes).map_err(with_path)? {
        DType::F64 => AnyModel::F64(Checkpoint::<f64>::from_bytes(&bytes).map_err(with_path)?.model),
        _ => AnyModel::F32(Checkpoint::<f32>::from_bytes(&bytes).map_err(with_path)?.model),
    };
    Ok((model, checkpoint_id(&bytes)))
}

fn cmd_score(a: ScoreArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref())?;
    let mut score_cfg = cfg.score.clone();
    if let Some(v) = a.scores {
        score_cfg.scores = v.0;
    }
    if let Some(v) = a.samples {
        score_cfg.samples = v;
    }
    if let Some(v) = a.seed {
        score_cfg.seed = v;
    }
    if score_cfg.samples == 0 {
        return Err(Failure::Usage("L must be at least 1".into()));
    }
    let splits = Split::parse_list(&a.splits).map_err(|e| Failure::Usage(e.to_string()))?;
    let manifest = load_manifest(a.manifest.or(cfg.data.manifest))?;
    let (model, ckpt_id) = load_model(&a.checkpoint)?;
    let mc = model.config().clone();

    let mut images = Vec::new();
    let mut unreadable = Vec::new();
    for rec in manifest.records.iter().filter(|r| splits.contains(&r.split)) {
        match load_preprocessed(&manifest.resolve(rec), mc.image_size, mc.in_channels) {
            Ok(img) => images.push((rec.path.clone(), img.data)),
            Err(e) => {
                log::warn!("{e}");
                unreadable.push(ScoreFailure {
                    image_id: rec.path.clone(),
                    message: e.to_string(),
                });
            }
        }
    }
    log::info!("scoring {} images with L = {}", images.len(), score_cfg.samples);
    let report = match &model {
        AnyModel::F32(m) => score_batch(m, &images, &score_cfg, &ckpt_id)?,
        AnyModel::F64(m) => score_batch(m, &images, &score_cfg, &ckpt_id)?,
    };
    let mut report = report.with_model_config(mc);
    report.failures.extend(unreadable);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    report.save(&a.out)?;
    println!("{}", a.out.display());
    if !report.failures.is_empty() {
        return Err(Failure::Runtime(format!(
            "{} of {} images failed: {}",
            report.failures.len(),
            report.failures.len() + report.rows.len(),
            report.failures.iter().map(|f| f.image_id.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let manifest = load_manifest(Some(a.manifest))?;
    let reports = a
        .scores
        .iter()
        .map(|p| ScoreReport::load(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    let report = evaluate(&reports, &manifest, &a.normal_label)?;
    report.save(&a.out)?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_reconstruct(a: ReconstructArgs) -> CmdResult {
    if a.n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let manifest = load_manifest(Some(a.manifest))?;
    let (model, _) = load_model(&a.checkpoint)?;
    let mc = model.config().clone();
    let recs: Vec<_> = manifest.split(a.split).take(a.n).collect();
    if recs.len() < a.n {
        return Err(Failure::Runtime(format!(
            "split {} has {} images, {} requested",
            a.split.name(),
            recs.len(),
            a.n
        )));
    }
    let mut pairs = Vec::with_capacity(a.n);
    for rec in recs {
        let img = load_preprocessed(&manifest.resolve(rec), mc.image_size, mc.in_channels)?;
        let recon = model.reconstruct(&img.data)?;
        let recon = vae_anomaly::data::FloatImage::new(img.channels, img.height, img.width, recon)?;
        pairs.push((img.to_raw(), recon.to_raw()));
    }
    let g = grid::build_grid(&pairs);
    save_image(&a.out, &g)?;
    println!("{} ({}x{})", a.out.display(), g.width, g.height);
    Ok(())
}

fn cmd_config(a: ConfigArgs) -> CmdResult {
    if let Some(p) = a.check {
        let cfg = RunConfig::load(&p).map_err(Failure::Usage)?;
        cfg.validate().map_err(Failure::Usage)?;
        println!("{}", cfg.to_json());
    } else if a.dump_defaults {
        println!("{}", RunConfig::default().to_json());
    } else {
        return Err(Failure::Usage("pass --dump-defaults or --check <FILE>".into()));
    }
    Ok(())
}
