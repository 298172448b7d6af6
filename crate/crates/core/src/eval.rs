//! Classification, localization, necessity and cross-architecture metrics.
//!
//! Localization thresholds, the confidence filter and the necessity bounds
//! are operational choices of this crate; reports say so in their `note`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{estimate_stats_from_dataset, image_tensor, Arch, FeatureStats, Model};
use crate::detect::{binarize, estimate_severity, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::gradcam::gradcam_heatmap;
use crate::heatmap::{Heatmap, Method};
use crate::iba::{
    image_seed, inject_noise, optimize_mask, sample_noise, BottleneckConfig, CapacityMap, MaskState,
};
use crate::rng::SplitMix64;
use crate::synth::{Dataset, Label, Sample};
use crate::tensor::{Scalar, Tensor};

pub const SCHEMA_VERSION: u32 = 1;
pub const SENSITIVITY_TAUS: [f64; 4] = [0.2, 0.3, 0.4, 0.5];
pub const DEFAULT_EPS_BITS: f64 = 0.01;
pub const DEFAULT_DELTA: f64 = 0.05;
pub const DEFAULT_CONFIDENCE: f64 = 0.8;
/// Required IoU lead of IBA over Grad-CAM for the IoU winner flag to count as decisive.
pub const IOU_MARGIN: f64 = 0.05;

const NOTE: &str = "Localization metrics use max-normalized heatmaps thresholded at tau inside the lung mask. \
The thresholds, the 0.8 confidence filter and the necessity bounds are operational choices, not published values.";

// ---- classification --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub n: usize,
    pub true_positives: usize,
    pub true_negatives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// `None` when the denominator is empty.
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn classification_metrics(
    predictions: &[Label],
    labels: &[Label],
) -> Result<ClassificationMetrics> {
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let count = |p: Label, l: Label| {
        predictions
            .iter()
            .zip(labels)
            .filter(|&(&a, &b)| a == p && b == l)
            .count()
    };
    let tp = count(Label::Positive, Label::Positive);
    let tn = count(Label::Negative, Label::Negative);
    let fp = count(Label::Positive, Label::Negative);
    let fneg = count(Label::Negative, Label::Positive);
    Ok(ClassificationMetrics {
        n: labels.len(),
        true_positives: tp,
        true_negatives: tn,
        false_positives: fp,
        false_negatives: fneg,
        accuracy: ratio(tp + tn, labels.len()),
        sensitivity: ratio(tp, tp + fneg),
        specificity: ratio(tn, tn + fp),
    })
}

// ---- localization --------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub iou: f64,
    pub pointing_hit: bool,
    pub fp_area_ratio: f64,
}

/// Index of the largest value, first in scan order on ties.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// IoU of two binary masks; two empty masks count as identical.
pub fn binary_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|&(&x, &y)| x && y).count();
    let union = a.iter().zip(b).filter(|&(&x, &y)| x || y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `None` when the ground truth is empty (the sample is skipped).
pub fn localization_metrics(
    heatmap: &Heatmap,
    lesion_mask: &[bool],
    tau: f64,
) -> Result<Option<Localization>> {
    let b = binarize(heatmap, None, tau)?;
    if lesion_mask.len() != b.len() {
        return Err(Error::contract("lesion mask size differs from the heatmap"));
    }
    if !lesion_mask.iter().any(|&g| g) {
        return Ok(None);
    }
    let predicted = b.iter().filter(|&&x| x).count();
    let false_pos = b
        .iter()
        .zip(lesion_mask)
        .filter(|&(&x, &g)| x && !g)
        .count();
    Ok(Some(Localization {
        iou: binary_iou(&b, lesion_mask),
        pointing_hit: lesion_mask[argmax_first(&heatmap.values)],
        fp_area_ratio: false_pos as f64 / predicted.max(1) as f64,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodLocalization {
    pub method: String,
    pub tau: f64,
    pub evaluated: usize,
    /// Ids without a ground-truth lesion.
    pub skipped: Vec<String>,
    pub mean_iou: Option<f64>,
    pub pointing_accuracy: Option<f64>,
    pub mean_fp_area_ratio: Option<f64>,
}

/// Means over `(id, heatmap, lesion mask)` triples, reduced in id order.
pub fn summarize_localization(
    method: &str,
    items: &[(&str, &Heatmap, &[bool])],
    tau: f64,
) -> Result<MethodLocalization> {
    let mut sorted: Vec<_> = items.to_vec();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut skipped = Vec::new();
    let mut found = Vec::new();
    for (id, h, g) in sorted {
        match localization_metrics(h, g, tau)? {
            Some(l) => found.push(l),
            None => skipped.push(id.to_string()),
        }
    }
    let n = found.len();
    let mean = |f: &dyn Fn(&Localization) -> f64| {
        (n > 0).then(|| found.iter().map(f).sum::<f64>() / n as f64)
    };
    Ok(MethodLocalization {
        method: method.to_string(),
        tau,
        evaluated: n,
        skipped,
        mean_iou: mean(&|l| l.iou),
        pointing_accuracy: mean(&|l| f64::from(u8::from(l.pointing_hit))),
        mean_fp_area_ratio: mean(&|l| l.fp_area_ratio),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeveritySummary {
    pub method: String,
    pub evaluated: usize,
    pub exact_agreement: Option<f64>,
    pub ggo_fraction_mae: Option<f64>,
}

/// Severity of each positive from its heatmap, using the model's own call.
pub fn summarize_severity(
    method: &str,
    items: &[(&Sample, &Heatmap, Label)],
    tau: f64,
) -> Result<SeveritySummary> {
    let mut sorted: Vec<_> = items
        .iter()
        .filter(|(s, _, _)| s.label == Label::Positive)
        .collect();
    sorted.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    let mut agree = 0usize;
    let mut abs_err = 0.0;
    for (s, h, predicted) in &sorted {
        let e = estimate_severity(h, &s.lung_mask, *predicted, tau)?;
        agree += usize::from(e.severity_pred == s.severity);
        abs_err += (e.ggo_fraction_pred - s.ggo_fraction).abs();
    }
    let n = sorted.len();
    Ok(SeveritySummary {
        method: method.to_string(),
        evaluated: n,
        exact_agreement: ratio(agree, n),
        ggo_fraction_mae: (n > 0).then(|| abs_err / n as f64),
    })
}

// ---- necessity ---------------------------------------------------------------------------

/// Noise used when comparing the learned mask against its reduction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
#[derive(Default)]
pub enum NecessityNoise {
    /// `η = μ`; deterministic.
    #[default]
    Mean,
    /// Mean probability over independent draws.
    Sampled { draws: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NecessityOutcome {
    pub passed: bool,
    pub shift: f64,
    pub p_target_mask: f64,
    pub p_target_reduced: f64,
    /// Spatial locations whose capacity fell below the threshold.
    pub zeroed_locations: usize,
}

/// `M` with every channel zeroed at locations whose reduced capacity is
/// below `eps_bits`.
pub fn reduced_mask<T: Scalar>(
    mask: &Tensor<T>,
    capacity: &CapacityMap<T>,
    eps_bits: f64,
) -> Result<(Tensor<T>, usize)> {
    let plane = capacity.reduced_bits.len();
    if !mask.len().is_multiple_of(plane) || mask.shape() != capacity.per_element.shape() {
        return Err(Error::contract("mask and capacity shapes differ"));
    }
    let low: Vec<bool> = capacity
        .reduced_bits
        .iter()
        .map(|&b| b < eps_bits)
        .collect();
    let mut out = mask.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if low[i % plane] {
            *v = T::zero();
        }
    }
    Ok((out, low.iter().filter(|&&b| b).count()))
}

#[allow(clippy::too_many_arguments)]
pub fn necessity_check<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    stats: &FeatureStats<T>,
    mask_state: &MaskState<T>,
    capacity: &CapacityMap<T>,
    eps_bits: f64,
    delta: f64,
    noise: NecessityNoise,
) -> Result<NecessityOutcome> {
    let features = model.forward_capture(image)?;
    let p = model.forward_tail(&features)?;
    let target = usize::from(p[1] > p[0]);
    let mask = mask_state.mask()?;
    let (reduced, zeroed) = reduced_mask(&mask, capacity, eps_bits)?;
    let etas = match noise {
        NecessityNoise::Mean => vec![stats.mu.clone()],
        NecessityNoise::Sampled { draws, seed } => {
            let mut rng = SplitMix64::new(seed);
            (0..draws.max(1))
                .map(|_| sample_noise(stats, &mut rng))
                .collect()
        }
    };
    let mut pm = 0.0;
    let mut pr = 0.0;
    for eta in &etas {
        pm += model.forward_tail(&inject_noise(&features, &mask, eta)?)?[target].f64();
        pr += model.forward_tail(&inject_noise(&features, &reduced, eta)?)?[target].f64();
    }
    let k = etas.len() as f64;
    let (pm, pr) = (pm / k, pr / k);
    let shift = (pm - pr).abs();
    Ok(NecessityOutcome {
        passed: shift < delta,
        shift,
        p_target_mask: pm,
        p_target_reduced: pr,
        zeroed_locations: zeroed,
    })
}

// ---- full comparison ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub bottleneck: BottleneckConfig,
    pub tau: f64,
    pub eps_bits: f64,
    pub delta: f64,
    /// Unmasked target probability needed to count as confidently classified.
    pub confidence: f64,
    pub necessity_noise: NecessityNoise,
    /// Mask heatmaps with the lung mask.
    pub lung_roi: bool,
    pub jobs: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            bottleneck: BottleneckConfig::default(),
            tau: DEFAULT_TAU,
            eps_bits: DEFAULT_EPS_BITS,
            delta: DEFAULT_DELTA,
            confidence: DEFAULT_CONFIDENCE,
            necessity_noise: NecessityNoise::Mean,
            lung_roi: true,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub eligible: usize,
    pub passed: usize,
    pub rate: Option<f64>,
}

impl RateSummary {
    fn from_flags(flags: impl Iterator<Item = bool>) -> Self {
        let (mut eligible, mut passed) = (0, 0);
        for f in flags {
            eligible += 1;
            passed += usize::from(f);
        }
        RateSummary {
            eligible,
            passed,
            rate: ratio(passed, eligible),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NecessitySummary {
    pub eps_bits: f64,
    pub delta: f64,
    pub noise: NecessityNoise,
    /// Over confidently classified test positives.
    pub result: RateSummary,
    pub mean_shift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossArchitecture {
    pub arch_a: Arch,
    pub arch_b: Arch,
    pub images: usize,
    pub mean_iou: f64,
    /// Mean IoU over all pairs of different images.
    pub shuffled_baseline: f64,
    pub exceeds_baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub method: String,
    pub tau: f64,
    pub mean_iou: Option<f64>,
    pub pointing_accuracy: Option<f64>,
    pub mean_fp_area_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Winners {
    pub iou: String,
    pub fp_area_ratio: String,
    /// Mean IoU of IBA minus that of Grad-CAM.
    pub iou_margin: f64,
    pub iou_margin_met: bool,
    pub iba_lower_fp_area_ratio: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub note: String,
    pub arch: Arch,
    pub tau: f64,
    pub test_images: usize,
    pub test_positives: usize,
    pub classification: ClassificationMetrics,
    pub localization: Vec<MethodLocalization>,
    pub severity: Option<SeveritySummary>,
    pub necessity: Option<NecessitySummary>,
    /// Target class kept under the learned mask and one fresh noise draw,
    /// over confidently classified test images.
    pub prediction_preserved: Option<RateSummary>,
    /// Final objective not above the initial one on shared held-out draws.
    pub loss_decreased: Option<RateSummary>,
    pub cross_architecture: Option<CrossArchitecture>,
    pub tau_sensitivity: Vec<TauRow>,
    pub winners: Option<Winners>,
}

impl MetricsReport {
    pub fn method(&self, method: Method) -> Option<&MethodLocalization> {
        self.localization.iter().find(|m| m.method == method.name())
    }
}

#[derive(Debug, Clone)]
struct Prediction {
    label: Label,
    p_target: f64,
}

fn predict(model: &Model<f32>, sample: &Sample) -> Result<Prediction> {
    let p = model.predict(&image_tensor(sample))?;
    let k = usize::from(p[1] > p[0]);
    Ok(Prediction {
        label: Label::from_class_index(k),
        p_target: f64::from(p[k]),
    })
}

fn roi_of(sample: &Sample, lung_roi: bool) -> Option<&[bool]> {
    lung_roi.then_some(sample.lung_mask.as_slice())
}

/// IBA outputs for one image.
#[derive(Debug, Clone)]
pub struct IbaImage {
    pub heatmap: Heatmap,
    pub necessity: NecessityOutcome,
    pub preserved: bool,
    pub loss_decreased: bool,
}

/// Runs the bottleneck for one sample with its per-image seed.
pub fn iba_image(
    model: &Model<f32>,
    stats: &FeatureStats<f32>,
    sample: &Sample,
    config: &CompareConfig,
) -> Result<IbaImage> {
    let cfg = BottleneckConfig {
        seed: image_seed(config.bottleneck.seed, &sample.id),
        ..config.bottleneck.clone()
    };
    let x = image_tensor(sample);
    let at = optimize_mask(model, &x, stats, &cfg)?;
    let heatmap = at.heatmap(cfg.readout, roi_of(sample, config.lung_roi))?;
    let necessity = necessity_check(
        model,
        &x,
        stats,
        &at.mask,
        &at.capacity,
        config.eps_bits,
        config.delta,
        config.necessity_noise,
    )?;
    let mask = at.mask.mask()?;
    let mut rng = SplitMix64::child(cfg.seed, 2);
    let eta = sample_noise(stats, &mut rng);
    let p = model.forward_tail(&inject_noise(&at.features, &mask, &eta)?)?;
    let target = at.diagnostics.target_class;
    Ok(IbaImage {
        heatmap,
        necessity,
        preserved: p[target] > p[1 - target] || (p[0] == p[1] && target == 0),
        loss_decreased: at.diagnostics.final_loss <= at.diagnostics.initial_loss,
    })
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Maps `f` over `items` on `jobs` workers, keeping input order.
pub fn par_map<I: Sync, O: Send>(
    items: &[I],
    jobs: usize,
    f: impl Fn(&I) -> Result<O> + Sync + Send,
) -> Result<Vec<O>> {
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    pool(jobs)?.install(|| items.par_iter().map(f).collect())
}

fn tau_rows(method: Method, items: &[(&str, &Heatmap, &[bool])]) -> Result<Vec<TauRow>> {
    SENSITIVITY_TAUS
        .iter()
        .map(|&tau| {
            let s = summarize_localization(method.name(), items, tau)?;
            Ok(TauRow {
                method: s.method,
                tau,
                mean_iou: s.mean_iou,
                pointing_accuracy: s.pointing_accuracy,
                mean_fp_area_ratio: s.mean_fp_area_ratio,
            })
        })
        .collect()
}

fn test_samples(dataset: &Dataset) -> Vec<&Sample> {
    let mut v: Vec<&Sample> = dataset.test().collect();
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}

fn classification_of(preds: &[Prediction], samples: &[&Sample]) -> Result<ClassificationMetrics> {
    let p: Vec<Label> = preds.iter().map(|p| p.label).collect();
    let l: Vec<Label> = samples.iter().map(|s| s.label).collect();
    classification_metrics(&p, &l)
}

/// IoU between binarized maps of the same images under two models, against
/// the mean over every mismatched pairing.
pub fn cross_architecture(
    arch_a: Arch,
    arch_b: Arch,
    a: &[Vec<bool>],
    b: &[Vec<bool>],
) -> Result<CrossArchitecture> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::contract(
            "cross-architecture comparison needs two equal lists of at least 2 maps",
        ));
    }
    let n = a.len();
    let mean_iou = (0..n).map(|i| binary_iou(&a[i], &b[i])).sum::<f64>() / n as f64;
    let mut total = 0.0;
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            if i != j {
                total += binary_iou(ai, bj);
            }
        }
    }
    let shuffled_baseline = total / (n * (n - 1)) as f64;
    Ok(CrossArchitecture {
        arch_a,
        arch_b,
        images: n,
        mean_iou,
        shuffled_baseline,
        exceeds_baseline: mean_iou > shuffled_baseline,
    })
}

fn winners(iba: &MethodLocalization, gc: &MethodLocalization) -> Option<Winners> {
    let (ii, gi) = (iba.mean_iou?, gc.mean_iou?);
    let (ifp, gfp) = (iba.mean_fp_area_ratio?, gc.mean_fp_area_ratio?);
    let pick = |iba_wins: bool| {
        if iba_wins {
            Method::Iba
        } else {
            Method::Gradcam
        }
        .name()
        .to_string()
    };
    Some(Winners {
        iou: pick(ii > gi),
        fp_area_ratio: pick(ifp < gfp),
        iou_margin: ii - gi,
        iou_margin_met: ii - gi >= IOU_MARGIN,
        iba_lower_fp_area_ratio: ifp < gfp,
    })
}

fn loc_items<'a>(
    samples: &[&'a Sample],
    which: &[usize],
    maps: &'a [Heatmap],
) -> Vec<(&'a str, &'a Heatmap, &'a [bool])> {
    which
        .iter()
        .map(|&i| {
            (
                samples[i].id.as_str(),
                &maps[i],
                samples[i].lesion_mask.as_slice(),
            )
        })
        .collect()
}

/// IBA against Grad-CAM on the test split; with `model_b`, also the
/// cross-architecture agreement of IBA maps on test positives.
pub fn compare_methods(
    model: &Model<f32>,
    model_b: Option<&Model<f32>>,
    dataset: &Dataset,
    config: &CompareConfig,
) -> Result<MetricsReport> {
    config.bottleneck.validate()?;
    let samples = test_samples(dataset);
    if samples.is_empty() {
        return Err(Error::Config("dataset has no test samples".into()));
    }
    let stats = estimate_stats_from_dataset(model, dataset)?;
    let preds = par_map(&samples, config.jobs, |s| predict(model, s))?;
    let iba = par_map(&samples, config.jobs, |s| {
        iba_image(model, &stats, s, config)
    })?;
    let gc = par_map(&samples, config.jobs, |s| {
        gradcam_heatmap(model, &image_tensor(s), roi_of(s, config.lung_roi))
    })?;

    let positives: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].label == Label::Positive)
        .collect();
    let iba_maps: Vec<Heatmap> = iba.iter().map(|r| r.heatmap.clone()).collect();
    let iba_items = loc_items(&samples, &positives, &iba_maps);
    let gc_items = loc_items(&samples, &positives, &gc);
    let iba_loc = summarize_localization(Method::Iba.name(), &iba_items, config.tau)?;
    let gc_loc = summarize_localization(Method::Gradcam.name(), &gc_items, config.tau)?;

    let sev_items: Vec<(&Sample, &Heatmap, Label)> = positives
        .iter()
        .map(|&i| (samples[i], &iba_maps[i], preds[i].label))
        .collect();
    let severity = summarize_severity(Method::Iba.name(), &sev_items, config.tau)?;

    let confident = |i: &usize| preds[*i].p_target >= config.confidence;
    let nec: Vec<&NecessityOutcome> = positives
        .iter()
        .filter(|i| confident(i))
        .map(|&i| &iba[i].necessity)
        .collect();
    let necessity = NecessitySummary {
        eps_bits: config.eps_bits,
        delta: config.delta,
        noise: config.necessity_noise,
        result: RateSummary::from_flags(nec.iter().map(|o| o.passed)),
        mean_shift: (!nec.is_empty())
            .then(|| nec.iter().map(|o| o.shift).sum::<f64>() / nec.len() as f64),
    };
    let all: Vec<usize> = (0..samples.len()).collect();
    let prediction_preserved = RateSummary::from_flags(
        all.iter()
            .filter(|i| confident(i))
            .map(|&i| iba[i].preserved),
    );
    let loss_decreased = RateSummary::from_flags(iba.iter().map(|r| r.loss_decreased));

    // The shuffled baseline needs at least two positives.
    let cross = match model_b.filter(|_| positives.len() >= 2) {
        Some(mb) => {
            let stats_b = estimate_stats_from_dataset(mb, dataset)?;
            let pos: Vec<&Sample> = positives.iter().map(|&i| samples[i]).collect();
            let maps_b = par_map(&pos, config.jobs, |s| {
                iba_image(mb, &stats_b, s, config).map(|r| r.heatmap)
            })?;
            let bin = |h: &Heatmap, s: &Sample| binarize(h, roi_of(s, config.lung_roi), config.tau);
            let a: Vec<Vec<bool>> = positives
                .iter()
                .map(|&i| bin(&iba_maps[i], samples[i]))
                .collect::<Result<_>>()?;
            let b: Vec<Vec<bool>> = maps_b
                .iter()
                .zip(&pos)
                .map(|(h, s)| bin(h, s))
                .collect::<Result<_>>()?;
            Some(cross_architecture(model.arch, mb.arch, &a, &b)?)
        }
        None => None,
    };

    let mut tau_sensitivity = tau_rows(Method::Iba, &iba_items)?;
    tau_sensitivity.extend(tau_rows(Method::Gradcam, &gc_items)?);
    let winners = winners(&iba_loc, &gc_loc);
    Ok(MetricsReport {
        schema_version: SCHEMA_VERSION,
        note: NOTE.to_string(),
        arch: model.arch,
        tau: config.tau,
        test_images: samples.len(),
        test_positives: positives.len(),
        classification: classification_of(&preds, &samples)?,
        localization: vec![iba_loc, gc_loc],
        severity: Some(severity),
        necessity: Some(necessity),
        prediction_preserved: Some(prediction_preserved),
        loss_decreased: Some(loss_decreased),
        cross_architecture: cross,
        tau_sensitivity,
        winners,
    })
}

/// Metrics of precomputed heatmaps keyed by test-sample id. Every test
/// sample must have exactly one heatmap.
pub fn evaluate_heatmaps(
    model: &Model<f32>,
    dataset: &Dataset,
    heatmaps: &BTreeMap<String, Heatmap>,
    tau: f64,
    jobs: usize,
) -> Result<MetricsReport> {
    let samples = test_samples(dataset);
    check_ids(
        samples.iter().map(|s| s.id.as_str()),
        heatmaps.keys().map(String::as_str),
    )?;
    let method = heatmaps
        .values()
        .next()
        .map(|h| h.method)
        .ok_or_else(|| Error::Format("no heatmaps to evaluate".into()))?;
    if heatmaps.values().any(|h| h.method != method) {
        return Err(Error::Format("heatmaps mix attribution methods".into()));
    }
    let preds = par_map(&samples, jobs, |s| predict(model, s))?;
    let items: Vec<(&str, &Heatmap, &[bool])> = samples
        .iter()
        .map(|s| (s.id.as_str(), &heatmaps[&s.id], s.lesion_mask.as_slice()))
        .collect();
    let loc = summarize_localization(method.name(), &items, tau)?;
    let sev_items: Vec<(&Sample, &Heatmap, Label)> = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| (*s, &heatmaps[&s.id], p.label))
        .collect();
    let positives = samples
        .iter()
        .filter(|s| s.label == Label::Positive)
        .count();
    Ok(MetricsReport {
        schema_version: SCHEMA_VERSION,
        note: NOTE.to_string(),
        arch: model.arch,
        tau,
        test_images: samples.len(),
        test_positives: positives,
        classification: classification_of(&preds, &samples)?,
        localization: vec![loc],
        severity: Some(summarize_severity(method.name(), &sev_items, tau)?),
        necessity: None,
        prediction_preserved: None,
        loss_decreased: None,
        cross_architecture: None,
        tau_sensitivity: tau_rows(method, &items)?,
        winners: None,
    })
}

/// Errors with the first five differences between expected and supplied ids.
pub fn check_ids<'a>(
    expected: impl Iterator<Item = &'a str>,
    supplied: impl Iterator<Item = &'a str>,
) -> Result<()> {
    let want: std::collections::BTreeSet<&str> = expected.collect();
    let have: std::collections::BTreeSet<&str> = supplied.collect();
    let mut diffs: Vec<String> = want
        .difference(&have)
        .map(|id| format!("missing heatmap for {id}"))
        .chain(
            have.difference(&want)
                .map(|id| format!("heatmap {id} is not a test sample")),
        )
        .collect();
    if diffs.is_empty() {
        return Ok(());
    }
    let total = diffs.len();
    diffs.truncate(5);
    Err(Error::Format(format!(
        "{total} heatmap/dataset id mismatches, first {}: {}",
        diffs.len(),
        diffs.join("; ")
    )))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Plain-text table of the headline numbers.
pub fn summary_text(r: &MetricsReport) -> String {
    let mut s = String::new();
    let c = &r.classification;
    let _ = writeln!(
        s,
        "model {}  test images {}  positives {}  tau {}",
        r.arch, r.test_images, r.test_positives, r.tau
    );
    let _ = writeln!(
        s,
        "accuracy {}  sensitivity {}  specificity {}",
        fmt_opt(c.accuracy),
        fmt_opt(c.sensitivity),
        fmt_opt(c.specificity)
    );
    let _ = writeln!(
        s,
        "{:<10} {:>8} {:>10} {:>10} {:>9} {:>8}",
        "method", "IoU", "pointing", "fp-area", "evaluated", "skipped"
    );
    for m in &r.localization {
        let _ = writeln!(
            s,
            "{:<10} {:>8} {:>10} {:>10} {:>9} {:>8}",
            m.method,
            fmt_opt(m.mean_iou),
            fmt_opt(m.pointing_accuracy),
            fmt_opt(m.mean_fp_area_ratio),
            m.evaluated,
            m.skipped.len()
        );
    }
    if let Some(v) = &r.severity {
        let _ = writeln!(
            s,
            "severity ({}): exact agreement {}  ggo fraction MAE {}",
            v.method,
            fmt_opt(v.exact_agreement),
            fmt_opt(v.ggo_fraction_mae)
        );
    }
    if let Some(n) = &r.necessity {
        let _ = writeln!(
            s,
            "necessity (eps {} bits, delta {}): {}/{} pass, rate {}",
            n.eps_bits,
            n.delta,
            n.result.passed,
            n.result.eligible,
            fmt_opt(n.result.rate)
        );
    }
    if let Some(p) = &r.prediction_preserved {
        let _ = writeln!(
            s,
            "prediction preserved under mask: {}/{}",
            p.passed, p.eligible
        );
    }
    if let Some(x) = &r.cross_architecture {
        let _ = writeln!(
            s,
            "cross-architecture {} vs {}: mean IoU {:.4}  shuffled baseline {:.4}",
            x.arch_a, x.arch_b, x.mean_iou, x.shuffled_baseline
        );
    }
    let _ = writeln!(s, "tau sensitivity:");
    for t in &r.tau_sensitivity {
        let _ = writeln!(
            s,
            "  {:<10} tau {:.1}  IoU {}  fp-area {}",
            t.method,
            t.tau,
            fmt_opt(t.mean_iou),
            fmt_opt(t.mean_fp_area_ratio)
        );
    }
    if let Some(w) = &r.winners {
        let _ = writeln!(
            s,
            "winners: IoU {} (margin {:+.4})  fp-area {}",
            w.iou, w.iou_margin, w.fp_area_ratio
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{IMAGE_SIZE, PIXELS};

    fn labels(s: &str) -> Vec<Label> {
        s.chars()
            .map(|c| {
                if c == 'P' {
                    Label::Positive
                } else {
                    Label::Negative
                }
            })
            .collect()
    }

    #[test]
    fn confusion_matrix_examples() {
        let m = classification_metrics(&labels("PPNN"), &labels("PPNN")).unwrap();
        assert_eq!(
            (m.accuracy, m.sensitivity, m.specificity),
            (Some(1.0), Some(1.0), Some(1.0))
        );

        // TP=3 FN=1 TN=2 FP=2.
        let m = classification_metrics(&labels("PPPNNNPP"), &labels("PPPPNNNN")).unwrap();
        assert_eq!(
            (
                m.true_positives,
                m.false_negatives,
                m.true_negatives,
                m.false_positives
            ),
            (3, 1, 2, 2)
        );
        assert_eq!(m.accuracy, Some(0.625));
        assert_eq!(m.sensitivity, Some(0.75));
        assert_eq!(m.specificity, Some(0.5));

        let m = classification_metrics(&labels("PPPP"), &labels("PPNN")).unwrap();
        assert_eq!((m.sensitivity, m.specificity), (Some(1.0), Some(0.0)));

        let m = classification_metrics(&labels("PN"), &labels("NN")).unwrap();
        assert_eq!(m.sensitivity, None);
        assert!(classification_metrics(&labels("P"), &labels("PN")).is_err());
    }

    fn mask_of(idx: &[usize]) -> Vec<bool> {
        let mut m = vec![false; PIXELS];
        idx.iter().for_each(|&i| m[i] = true);
        m
    }

    fn heat_of(m: &[bool]) -> Heatmap {
        Heatmap::new(
            m.iter().map(|&b| f64::from(u8::from(b))).collect(),
            Method::Iba,
        )
        .unwrap()
    }

    #[test]
    fn localization_examples() {
        let g = mask_of(&[100, 101, 102, 165]);
        let l = localization_metrics(&heat_of(&g), &g, 0.3)
            .unwrap()
            .unwrap();
        assert_eq!((l.iou, l.pointing_hit, l.fp_area_ratio), (1.0, true, 0.0));

        let l = localization_metrics(&heat_of(&mask_of(&[2000, 2001])), &g, 0.3)
            .unwrap()
            .unwrap();
        assert_eq!((l.iou, l.pointing_hit, l.fp_area_ratio), (0.0, false, 1.0));

        let g: Vec<usize> = (0..8).collect();
        let b: Vec<usize> = (4..12).collect();
        let l = localization_metrics(&heat_of(&mask_of(&b)), &mask_of(&g), 0.3)
            .unwrap()
            .unwrap();
        assert!((l.iou - 4.0 / 12.0).abs() < 1e-15);
        assert_eq!(l.fp_area_ratio, 0.5);

        assert!(localization_metrics(&heat_of(&g_empty()), &g_empty(), 0.3)
            .unwrap()
            .is_none());
    }

    fn g_empty() -> Vec<bool> {
        vec![false; PIXELS]
    }

    #[test]
    fn pointing_ties_take_first_in_scan_order() {
        assert_eq!(argmax_first(&[0.0, 2.0, 1.0, 2.0]), 1);
        let h = heat_of(&mask_of(&[IMAGE_SIZE * 3 + 5, IMAGE_SIZE * 9]));
        let l = localization_metrics(&h, &mask_of(&[IMAGE_SIZE * 9]), 0.3)
            .unwrap()
            .unwrap();
        assert!(!l.pointing_hit);
    }

    #[test]
    fn renamed_method_has_identical_aggregates() {
        let g = mask_of(&[10, 11, 12, 75]);
        let h1 = heat_of(&mask_of(&[10, 11, 400]));
        let h2 = heat_of(&g);
        let items: Vec<(&str, &Heatmap, &[bool])> =
            vec![("b", &h1, g.as_slice()), ("a", &h2, g.as_slice())];
        let x = summarize_localization("first", &items, 0.3).unwrap();
        let mut y = summarize_localization("second", &items, 0.3).unwrap();
        y.method = x.method.clone();
        assert_eq!(x, y);
        let reversed: Vec<_> = items.iter().rev().cloned().collect();
        assert_eq!(summarize_localization("first", &reversed, 0.3).unwrap(), x);
    }

    #[test]
    fn id_mismatches_listed() {
        let err = check_ids(["a", "b", "c"].into_iter(), ["a", "z"].into_iter()).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("missing heatmap for b") && msg.contains("heatmap z is not a test sample"),
            "{msg}"
        );
        assert!(check_ids(["a"].into_iter(), ["a"].into_iter()).is_ok());
        let many: Vec<String> = (0..9).map(|i| format!("x{i}")).collect();
        let msg = check_ids(many.iter().map(String::as_str), std::iter::empty())
            .unwrap_err()
            .to_string();
        assert!(
            msg.starts_with("format error: 9 heatmap/dataset id mismatches, first 5"),
            "{msg}"
        );
    }

    #[test]
    fn cross_architecture_identical_maps_beat_baseline() {
        let a: Vec<Vec<bool>> = (0..4).map(|k| mask_of(&[k * 100, k * 100 + 1])).collect();
        let x = cross_architecture(Arch::A, Arch::B, &a, &a).unwrap();
        assert_eq!(x.mean_iou, 1.0);
        assert_eq!(x.shuffled_baseline, 0.0);
        assert!(x.exceeds_baseline);
        assert!(cross_architecture(Arch::A, Arch::B, &a[..1], &a[..1]).is_err());
    }
}
