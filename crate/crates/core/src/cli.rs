//! Command-line front end. Each subcommand reads and writes plain files and
//! echoes its resolved configuration next to its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::classifier::{
    build_model, estimate_stats_from_dataset, image_tensor, train_model, Arch, Model, Precision,
    TrainConfig,
};
use crate::detect::{detect, estimate_severity, DetectionReport, DEFAULT_MIN_AREA, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::eval::{
    compare_methods, evaluate_heatmaps, par_map, summary_text, CompareConfig, MetricsReport,
    NecessityNoise, DEFAULT_CONFIDENCE, DEFAULT_DELTA, DEFAULT_EPS_BITS,
};
use crate::gradcam::gradcam_heatmap;
use crate::heatmap::{Heatmap, Method};
use crate::iba::{image_seed, optimize_mask, BottleneckConfig, Readout};
use crate::synth::{
    generate_dataset, load_dataset, save_dataset, sorted_json, DatasetConfig, Label, Severity,
};

pub const JOBS_ENV: &str = "DESK_IBA_JOBS";
pub const HEATMAP_SUFFIX: &str = ".heatmap.json";

#[derive(Debug, Parser)]
#[command(
    name = "desk-iba",
    version,
    about = "Information bottleneck attribution on synthetic lesion images"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData(GenDataArgs),
    /// Train a classifier.
    Train(TrainArgs),
    /// Write one heatmap per test image.
    Attribute(AttributeArgs),
    /// Score precomputed heatmaps against ground truth.
    Evaluate(EvaluateArgs),
    /// Run IBA and Grad-CAM end to end and compare them.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-class counts, e.g. `CT0=10,CT1=5`; unnamed classes get 0.
    #[arg(long)]
    pub counts: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `A` or `B` (also `DeskNet-A`, `DeskNet-B`).
    #[arg(long, default_value = "A")]
    pub arch: Arch,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub learning_rate: f64,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    pub precision: PrecisionArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Iba,
    Gradcam,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Iba => Method::Iba,
            MethodArg::Gradcam => Method::Gradcam,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ReadoutArg {
    Capacity,
    Mask,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BottleneckArgs {
    #[arg(long, default_value_t = BottleneckConfig::default().beta)]
    pub beta: f64,
    #[arg(long, default_value_t = BottleneckConfig::default().steps)]
    pub steps: usize,
    #[arg(long = "iba-lr", default_value_t = BottleneckConfig::default().learning_rate)]
    pub iba_lr: f64,
    /// Noise draws per optimization step.
    #[arg(long, default_value_t = BottleneckConfig::default().samples)]
    pub samples: usize,
    #[arg(long, default_value_t = BottleneckConfig::default().alpha_init)]
    pub alpha_init: f64,
    /// Mask smoothing in feature pixels; 0 disables it.
    #[arg(long, default_value_t = BottleneckConfig::default().smoothing_sigma)]
    pub smoothing: f64,
    #[arg(long, value_enum, default_value_t = ReadoutArg::Capacity)]
    pub readout: ReadoutArg,
}

impl BottleneckArgs {
    fn config(&self, seed: u64) -> BottleneckConfig {
        BottleneckConfig {
            beta: self.beta,
            steps: self.steps,
            learning_rate: self.iba_lr,
            samples: self.samples,
            alpha_init: self.alpha_init,
            smoothing_sigma: self.smoothing,
            seed,
            readout: match self.readout {
                ReadoutArg::Capacity => Readout::Capacity,
                ReadoutArg::Mask => Readout::Mask,
            },
            ..Default::default()
        }
    }
}

fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AttributeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fail unless the checkpoint has this architecture.
    #[arg(long)]
    pub arch: Option<Arch>,
    #[command(flatten)]
    pub bottleneck: BottleneckArgs,
    /// Binarization threshold for the detection reports.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = DEFAULT_MIN_AREA)]
    pub min_area: usize,
    /// Keep heatmap values outside the lung mask.
    #[arg(long)]
    pub no_roi: bool,
    #[arg(long, env = JOBS_ENV, default_value_t = default_jobs())]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub heatmaps: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, env = JOBS_ENV, default_value_t = default_jobs())]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Second architecture for the cross-architecture check.
    #[arg(long)]
    pub model_b: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub bottleneck: BottleneckArgs,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = DEFAULT_EPS_BITS)]
    pub eps_bits: f64,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    pub delta: f64,
    #[arg(long, default_value_t = DEFAULT_CONFIDENCE)]
    pub confidence: f64,
    /// Noise draws for the necessity check; 0 compares at the noise mean.
    #[arg(long, default_value_t = 0)]
    pub necessity_draws: usize,
    #[arg(long)]
    pub no_roi: bool,
    #[arg(long, env = JOBS_ENV, default_value_t = default_jobs())]
    pub jobs: usize,
}

/// 0 on success, 2 for missing or unreadable inputs, 3 for inconsistent
/// inputs, 4 for internal invariant violations.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NotFound(_) | Error::Io { .. } => 2,
        Error::Format(_) | Error::Config(_) => 3,
        Error::Contract(_) | Error::Generation(_) => 4,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Attribute(a) => attribute(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Compare(a) => compare(&a),
    }
}

fn log(msg: impl AsRef<str>) {
    eprintln!("desk-iba: {}", msg.as_ref());
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(sorted_json(value)? + "\n"))
}

/// `<file>.config.json` next to a single-file output.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn parse_counts(spec: &str) -> Result<DatasetConfig> {
    let mut counts = [0usize; 5];
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("count {part:?} is not CLASS=N")))?;
        let sev: Severity = k
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("unknown class {k:?}")))?;
        counts[sev.index()] = v.trim().parse().map_err(|_| {
            Error::Config(format!("count {v:?} for {k} is not a non-negative integer"))
        })?;
    }
    Ok(DatasetConfig { counts })
}

#[derive(Serialize)]
struct Echo<'a, A: Serialize, C: Serialize> {
    command: &'a str,
    args: &'a A,
    resolved: C,
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let config = match &a.counts {
        Some(s) => parse_counts(s)?,
        None => DatasetConfig::default(),
    };
    let ds = generate_dataset(&config, a.seed)?;
    save_dataset(&ds, &a.out)?;
    write_json(
        &a.out.join("config.json"),
        &Echo {
            command: "gen-data",
            args: a,
            resolved: &config,
        },
    )?;
    log(format!(
        "wrote {} samples to {}",
        ds.samples.len(),
        a.out.display()
    ));
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        seed: a.seed,
        precision: match a.precision {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        },
    };
    let mut model = build_model(a.arch, a.seed);
    let history = train_model(&mut model, &ds, &config)?;
    model.save(&a.out)?;
    write_json(&sidecar(&a.out, ".history.json"), &history)?;
    write_json(
        &sidecar(&a.out, ".config.json"),
        &Echo {
            command: "train",
            args: a,
            resolved: &config,
        },
    )?;
    if let Some(last) = history.epochs.last() {
        log(format!(
            "{}: epoch {} loss {:.4} test accuracy {}",
            model.arch,
            last.epoch,
            last.mean_loss,
            last.test_accuracy
                .map_or("n/a".into(), |x| format!("{x:.4}"))
        ));
    }
    Ok(())
}

fn load_model(path: &Path, expect: Option<Arch>) -> Result<Model<f32>> {
    let model = Model::load(path)?;
    if let Some(arch) = expect.filter(|&a| a != model.arch) {
        return Err(Error::Config(format!(
            "{} holds a {} checkpoint, expected {}",
            path.display(),
            model.arch,
            arch
        )));
    }
    Ok(model)
}

/// One heatmap file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRecord {
    pub id: String,
    pub method: Method,
    pub roi_applied: bool,
    pub target_class: usize,
    pub probabilities: [f64; 2],
    /// 64 rows of 64 values.
    pub values: Vec<Vec<f64>>,
    pub config: serde_json::Value,
}

impl HeatmapRecord {
    pub fn heatmap(&self) -> Result<Heatmap> {
        let mut h = Heatmap::from_rows(&self.values, self.method)
            .map_err(|e| Error::Format(format!("heatmap {}: {e}", self.id)))?;
        if h.values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Format(format!(
                "heatmap {} has negative or non-finite values",
                self.id
            )));
        }
        h.roi_applied = self.roi_applied;
        Ok(h)
    }
}

#[derive(Serialize)]
struct AttributeResolved {
    method: Method,
    bottleneck: Option<BottleneckConfig>,
    per_image_seed: &'static str,
    lung_roi: bool,
    tau: f64,
    min_area: usize,
}

fn attribute(a: &AttributeArgs) -> Result<()> {
    let model = load_model(&a.model, a.arch)?;
    let ds = load_dataset(&a.data)?;
    let method = Method::from(a.method);
    let base = a.bottleneck.config(a.seed);
    base.validate()?;
    let stats = match method {
        Method::Iba => Some(estimate_stats_from_dataset(&model, &ds)?),
        Method::Gradcam => None,
    };
    let resolved = AttributeResolved {
        method,
        bottleneck: (method == Method::Iba).then(|| base.clone()),
        per_image_seed: "SplitMix64 keyed by (seed, sample id)",
        lung_roi: !a.no_roi,
        tau: a.tau,
        min_area: a.min_area,
    };
    let config = serde_json::to_value(&resolved).map_err(|e| Error::Format(e.to_string()))?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let samples: Vec<_> = ds.test().collect();
    par_map(&samples, a.jobs, |s| {
        let x = image_tensor(s);
        let roi = (!a.no_roi).then_some(s.lung_mask.as_slice());
        let p = model.predict(&x)?;
        let target = usize::from(p[1] > p[0]);
        let heatmap = match &stats {
            Some(stats) => {
                let cfg = BottleneckConfig {
                    seed: image_seed(a.seed, &s.id),
                    ..base.clone()
                };
                optimize_mask(&model, &x, stats, &cfg)?.heatmap(cfg.readout, roi)?
            }
            None => gradcam_heatmap(&model, &x, roi)?,
        };
        let record = HeatmapRecord {
            id: s.id.clone(),
            method,
            roi_applied: heatmap.roi_applied,
            target_class: target,
            probabilities: [f64::from(p[0]), f64::from(p[1])],
            values: heatmap.rows(),
            config: config.clone(),
        };
        write_json(&a.out.join(format!("{}{HEATMAP_SUFFIX}", s.id)), &record)?;
        heatmap.write_preview(&a.out.join(format!("{}.pgm", s.id)))?;
        let severity = estimate_severity(
            &heatmap,
            &s.lung_mask,
            Label::from_class_index(target),
            a.tau,
        )?;
        let report = DetectionReport {
            id: s.id.clone(),
            method,
            tau: a.tau,
            min_area: a.min_area,
            detections: detect(&heatmap, roi, a.tau, a.min_area)?,
            ggo_fraction_pred: severity.ggo_fraction_pred,
            severity_pred: severity.severity_pred,
        };
        write_json(&a.out.join(format!("{}.detections.json", s.id)), &report)
    })?;
    write_json(
        &a.out.join("config.json"),
        &Echo {
            command: "attribute",
            args: a,
            resolved,
        },
    )?;
    log(format!(
        "wrote {} {} heatmaps to {}",
        samples.len(),
        method,
        a.out.display()
    ));
    Ok(())
}

/// Heatmaps in `dir` keyed by sample id.
pub fn read_heatmaps(dir: &Path) -> Result<BTreeMap<String, Heatmap>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if !name.ends_with(HEATMAP_SUFFIX) {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let record: HeatmapRecord = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let stem = &name[..name.len() - HEATMAP_SUFFIX.len()];
        if record.id != stem {
            return Err(Error::Format(format!(
                "{} holds heatmap {:?}",
                path.display(),
                record.id
            )));
        }
        out.insert(record.id.clone(), record.heatmap()?);
    }
    if out.is_empty() {
        return Err(Error::Format(format!(
            "no *{HEATMAP_SUFFIX} files in {}",
            dir.display()
        )));
    }
    Ok(out)
}

fn write_report(out: &Path, report: &MetricsReport) -> Result<()> {
    write_json(out, report)?;
    let text = summary_text(report);
    write_text(&out.with_extension("txt"), &text)?;
    eprint!("{text}");
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let model = load_model(&a.model, None)?;
    let ds = load_dataset(&a.data)?;
    let heatmaps = read_heatmaps(&a.heatmaps)?;
    let report = evaluate_heatmaps(&model, &ds, &heatmaps, a.tau, a.jobs)?;
    write_report(&a.out, &report)?;
    write_json(
        &sidecar(&a.out, ".config.json"),
        &Echo {
            command: "evaluate",
            args: a,
            resolved: serde_json::json!({ "tau": a.tau }),
        },
    )
}

fn compare(a: &CompareArgs) -> Result<()> {
    let model = load_model(&a.model, None)?;
    let model_b = a
        .model_b
        .as_deref()
        .map(|p| load_model(p, None))
        .transpose()?;
    let ds = load_dataset(&a.data)?;
    let config = CompareConfig {
        bottleneck: a.bottleneck.config(a.seed),
        tau: a.tau,
        eps_bits: a.eps_bits,
        delta: a.delta,
        confidence: a.confidence,
        necessity_noise: match a.necessity_draws {
            0 => NecessityNoise::Mean,
            draws => NecessityNoise::Sampled {
                draws,
                seed: a.seed,
            },
        },
        lung_roi: !a.no_roi,
        jobs: a.jobs,
    };
    let report = compare_methods(&model, model_b.as_ref(), &ds, &config)?;
    write_report(&a.out, &report)?;
    write_json(
        &sidecar(&a.out, ".config.json"),
        &Echo {
            command: "compare",
            args: a,
            resolved: &config,
        },
    )
}
