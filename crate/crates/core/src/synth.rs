//! Synthetic lung slices with ground-truth lesion masks.
//!
//! Each 64×64 image shows two dark elliptical lungs on a brighter noisy
//! background. Positive samples carry 1–4 bright elliptical lesions inside
//! the lungs whose total area, relative to the lung area, lands in the GGO
//! interval of the requested severity class.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm::{self, Gray8};
use crate::rng::SplitMix64;

pub const IMAGE_SIZE: usize = 64;
pub const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;

const BACKGROUND: f64 = 0.70;
const LUNG: f64 = 0.25;
const LESION_CONTRAST: f64 = 0.35;
const NOISE_AMPLITUDE: f64 = 0.05;
/// Lesion profile is flat up to this normalized radius, then a cosine taper
/// that crosses one half exactly at radius 1 (the mask boundary).
const TAPER_START: f64 = 0.85;
const TAPER_END: f64 = 1.15;
const MAX_RESIZE_ATTEMPTS: usize = 100;
const MAX_GEOMETRY_ATTEMPTS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Severity {
    #[serde(rename = "CT-0")]
    Ct0,
    #[serde(rename = "CT-1")]
    Ct1,
    #[serde(rename = "CT-2")]
    Ct2,
    #[serde(rename = "CT-3")]
    Ct3,
    #[serde(rename = "CT-4")]
    Ct4,
}

impl Severity {
    pub const ALL: [Severity; 5] = [
        Severity::Ct0,
        Severity::Ct1,
        Severity::Ct2,
        Severity::Ct3,
        Severity::Ct4,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Severity> {
        Self::ALL.get(i).copied()
    }

    /// GGO interval `(lo, hi]`; CT-0 is the single point 0.
    pub fn interval(self) -> (f64, f64) {
        match self {
            Severity::Ct0 => (0.0, 0.0),
            Severity::Ct1 => (0.0, 0.25),
            Severity::Ct2 => (0.25, 0.50),
            Severity::Ct3 => (0.50, 0.75),
            Severity::Ct4 => (0.75, 1.0),
        }
    }

    /// Class of a GGO fraction: 0 is CT-0, otherwise the half-open interval
    /// `(lo, hi]` containing it.
    pub fn from_ggo_fraction(f: f64) -> Severity {
        if f <= 0.0 {
            Severity::Ct0
        } else if f <= 0.25 {
            Severity::Ct1
        } else if f <= 0.50 {
            Severity::Ct2
        } else if f <= 0.75 {
            Severity::Ct3
        } else {
            Severity::Ct4
        }
    }

    pub fn contains(self, f: f64) -> bool {
        Severity::from_ggo_fraction(f) == self
    }

    pub fn name(self) -> &'static str {
        ["CT-0", "CT-1", "CT-2", "CT-3", "CT-4"][self.index()]
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Severity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "");
        Self::ALL
            .iter()
            .copied()
            .find(|sev| sev.name().replace('-', "") == norm)
            .ok_or_else(|| Error::Config(format!("unknown severity class {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn from_class_index(i: usize) -> Label {
        if i == 0 {
            Label::Negative
        } else {
            Label::Positive
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Row-major, values are multiples of 1/255 in `[0, 1]`.
    pub image: Vec<f32>,
    pub label: Label,
    pub lung_mask: Vec<bool>,
    pub lesion_mask: Vec<bool>,
    pub ggo_fraction: f64,
    pub severity: Severity,
}

impl Sample {
    pub fn lung_area(&self) -> usize {
        self.lung_mask.iter().filter(|&&b| b).count()
    }

    pub fn lesion_area(&self) -> usize {
        self.lesion_mask.iter().filter(|&&b| b).count()
    }

    /// Checks the mask/label/severity invariants.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.image.len() != PIXELS
            || self.lung_mask.len() != PIXELS
            || self.lesion_mask.len() != PIXELS
        {
            return Err("wrong raster size".into());
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err("image value outside [0, 1]".into());
        }
        if self
            .lesion_mask
            .iter()
            .zip(&self.lung_mask)
            .any(|(&l, &g)| l && !g)
        {
            return Err("lesion mask leaves the lung mask".into());
        }
        let lung = self.lung_area();
        if lung == 0 {
            return Err("empty lung mask".into());
        }
        let lesion = self.lesion_area();
        let empty = lesion == 0;
        if empty != (self.label == Label::Negative) || empty != (self.severity == Severity::Ct0) {
            return Err(format!(
                "label {:?}, severity {} and lesion area {lesion} disagree",
                self.label, self.severity
            ));
        }
        let exact = lesion as f64 / lung as f64;
        if (exact - self.ggo_fraction).abs() > 1.0 / lung as f64 {
            return Err(format!(
                "ggo_fraction {} but masks give {exact}",
                self.ggo_fraction
            ));
        }
        if Severity::from_ggo_fraction(self.ggo_fraction) != self.severity {
            return Err(format!(
                "ggo_fraction {} outside {}",
                self.ggo_fraction, self.severity
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    /// Normalized radius of pixel center `(r, c)`; ≤ 1 inside.
    fn radius(&self, r: usize, c: usize) -> f64 {
        let dy = (r as f64 + 0.5 - self.cy) / self.ry;
        let dx = (c as f64 + 0.5 - self.cx) / self.rx;
        (dy * dy + dx * dx).sqrt()
    }

    fn scaled(&self, s: f64) -> Ellipse {
        Ellipse {
            ry: self.ry * s,
            rx: self.rx * s,
            ..*self
        }
    }
}

fn lung_geometry(rng: &mut SplitMix64) -> [Ellipse; 2] {
    let left = Ellipse {
        cy: rng.uniform(29.0, 35.0),
        cx: rng.uniform(17.0, 20.0),
        ry: rng.uniform(19.0, 24.0),
        rx: rng.uniform(8.0, 11.0),
    };
    let right = Ellipse {
        cy: rng.uniform(29.0, 35.0),
        cx: rng.uniform(44.0, 47.0),
        ry: rng.uniform(19.0, 24.0),
        rx: rng.uniform(8.0, 11.0),
    };
    [left, right]
}

/// Minimum normalized radius over all blobs at scale `s`.
fn blob_radius(blobs: &[Ellipse], s: f64, r: usize, c: usize) -> f64 {
    blobs
        .iter()
        .map(|b| b.scaled(s).radius(r, c))
        .fold(f64::INFINITY, f64::min)
}

fn lesion_profile(radius: f64) -> f64 {
    if radius <= TAPER_START {
        1.0
    } else if radius >= TAPER_END {
        0.0
    } else {
        let t = (radius - TAPER_START) / (TAPER_END - TAPER_START);
        0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

fn lesion_mask_at(blobs: &[Ellipse], s: f64, lung: &[bool]) -> Vec<bool> {
    let mut mask = vec![false; PIXELS];
    for r in 0..IMAGE_SIZE {
        for c in 0..IMAGE_SIZE {
            let i = r * IMAGE_SIZE + c;
            mask[i] = lung[i] && blob_radius(blobs, s, r, c) <= 1.0;
        }
    }
    mask
}

/// One sample of the requested class. Fails if the lesion geometry drawn
/// from `rng` cannot be resized into the class interval; the caller may
/// retry with the same (advanced) generator.
pub fn generate_sample(rng: &mut SplitMix64, severity: Severity, id: &str) -> Result<Sample> {
    let lungs = lung_geometry(rng);
    let mut lung_mask = vec![false; PIXELS];
    for r in 0..IMAGE_SIZE {
        for c in 0..IMAGE_SIZE {
            lung_mask[r * IMAGE_SIZE + c] = lungs.iter().any(|e| e.radius(r, c) <= 1.0);
        }
    }
    let lung_pixels: Vec<usize> = (0..PIXELS).filter(|&i| lung_mask[i]).collect();
    let lung_area = lung_pixels.len();

    let (blobs, scale, lesion_mask) = if severity == Severity::Ct0 {
        (Vec::new(), 0.0, vec![false; PIXELS])
    } else {
        let n = 1 + rng.below(4) as usize;
        let blobs: Vec<Ellipse> = (0..n)
            .map(|_| {
                let p = lung_pixels[rng.below(lung_area as u64) as usize];
                let size = rng.uniform(0.6, 1.4);
                Ellipse {
                    cy: (p / IMAGE_SIZE) as f64 + 0.5,
                    cx: (p % IMAGE_SIZE) as f64 + 0.5,
                    ry: size * rng.uniform(0.7, 1.3),
                    rx: size * rng.uniform(0.7, 1.3),
                }
            })
            .collect();
        let (lo, hi) = severity.interval();
        let target = lo + (hi - lo) * rng.uniform(0.1, 0.9);
        let fraction = |s: f64| -> f64 {
            lesion_mask_at(&blobs, s, &lung_mask)
                .iter()
                .filter(|&&b| b)
                .count() as f64
                / lung_area as f64
        };
        // Bisection on the blob scale; the covered fraction grows with it.
        let (mut s_lo, mut s_hi) = (0.0, 2.0 * IMAGE_SIZE as f64);
        let mut best: Option<(f64, f64)> = None;
        for _ in 0..MAX_RESIZE_ATTEMPTS {
            let s = 0.5 * (s_lo + s_hi);
            let f = fraction(s);
            if severity.contains(f)
                && best.is_none_or(|(_, bf)| (f - target).abs() < (bf - target).abs())
            {
                best = Some((s, f));
            }
            if best.is_some_and(|(_, bf)| (bf - target).abs() <= 0.01) {
                break;
            }
            if f < target {
                s_lo = s;
            } else {
                s_hi = s;
            }
        }
        let Some((s, _)) = best else {
            return Err(Error::Generation(format!(
                "{id}: no lesion scale reaches {severity} within {MAX_RESIZE_ATTEMPTS} attempts"
            )));
        };
        let mask = lesion_mask_at(&blobs, s, &lung_mask);
        (blobs, s, mask)
    };

    let mut image = vec![0f32; PIXELS];
    for r in 0..IMAGE_SIZE {
        for c in 0..IMAGE_SIZE {
            let i = r * IMAGE_SIZE + c;
            let mut v = if lung_mask[i] { LUNG } else { BACKGROUND };
            if lung_mask[i] && !blobs.is_empty() {
                v += LESION_CONTRAST * lesion_profile(blob_radius(&blobs, scale, r, c));
            }
            v += rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE);
            image[i] = quantize(v);
        }
    }

    let lesion_area = lesion_mask.iter().filter(|&&b| b).count();
    let ggo_fraction = lesion_area as f64 / lung_area as f64;
    let sample = Sample {
        id: id.to_string(),
        image,
        label: if lesion_area > 0 {
            Label::Positive
        } else {
            Label::Negative
        },
        lung_mask,
        lesion_mask,
        ggo_fraction,
        severity,
    };
    debug_assert_eq!(sample.validate(), Ok(()));
    Ok(sample)
}

fn quantize(v: f64) -> f32 {
    let q = (v.clamp(0.0, 1.0) * 255.0).round();
    (q / 255.0) as f32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Number of samples per severity class CT-0..CT-4.
    pub counts: [usize; 5],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            counts: [400, 250, 100, 40, 10],
        }
    }
}

impl DatasetConfig {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Training share of a class of `n` samples: 70%, rounded up.
pub fn train_count(n: usize) -> usize {
    (7 * n).div_ceil(10)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub config: DatasetConfig,
    pub samples: Vec<Sample>,
    pub split: BTreeMap<String, Split>,
}

impl Dataset {
    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.split.get(id).copied()
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples
            .iter()
            .filter(move |s| self.split_of(&s.id) == Some(split))
    }

    pub fn train(&self) -> impl Iterator<Item = &Sample> {
        self.in_split(Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Sample> {
        self.in_split(Split::Test)
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

pub fn sample_id(severity: Severity, index: usize) -> String {
    format!("ct{}_{index:04}", severity.index())
}

/// Generates every sample from its own id-keyed child stream and assigns a
/// per-class 70/30 split (first 70%, rounded up, to train).
pub fn generate_dataset(config: &DatasetConfig, seed: u64) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(config.total());
    let mut split = BTreeMap::new();
    for sev in Severity::ALL {
        let n = config.counts[sev.index()];
        let n_train = train_count(n);
        for i in 0..n {
            let id = sample_id(sev, i);
            let mut rng = SplitMix64::keyed(seed, &id);
            let mut attempt = 0;
            let sample = loop {
                match generate_sample(&mut rng, sev, &id) {
                    Ok(s) => break s,
                    Err(e) if attempt + 1 >= MAX_GEOMETRY_ATTEMPTS => return Err(e),
                    Err(_) => attempt += 1,
                }
            };
            split.insert(
                id,
                if i < n_train {
                    Split::Train
                } else {
                    Split::Test
                },
            );
            samples.push(sample);
        }
    }
    Ok(Dataset {
        seed,
        config: *config,
        samples,
        split,
    })
}

// ---- on-disk format ---------------------------------------------------------

pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSample {
    id: String,
    image: String,
    lung_mask: String,
    lesion_mask: String,
    label: Label,
    severity: Severity,
    ggo_fraction: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    image_size: usize,
    seed: u64,
    counts: BTreeMap<Severity, usize>,
    samples: Vec<ManifestSample>,
    split: BTreeMap<String, Split>,
}

fn to_gray(values: impl Iterator<Item = u8>) -> Gray8 {
    Gray8 {
        width: IMAGE_SIZE,
        height: IMAGE_SIZE,
        pixels: values.collect(),
    }
}

fn mask_to_gray(mask: &[bool]) -> Gray8 {
    to_gray(mask.iter().map(|&b| if b { 255 } else { 0 }))
}

/// Serializes `value` as pretty JSON with lexicographically sorted keys.
pub fn sorted_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [dir, &images, &masks] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let entry = ManifestSample {
            id: s.id.clone(),
            image: format!("images/{}.pgm", s.id),
            lung_mask: format!("masks/{}_lung.pgm", s.id),
            lesion_mask: format!("masks/{}_lesion.pgm", s.id),
            label: s.label,
            severity: s.severity,
            ggo_fraction: s.ggo_fraction,
        };
        let img = to_gray(s.image.iter().map(|&v| (v * 255.0).round() as u8));
        pgm::write(&dir.join(&entry.image), &img)?;
        pgm::write(&dir.join(&entry.lung_mask), &mask_to_gray(&s.lung_mask))?;
        pgm::write(&dir.join(&entry.lesion_mask), &mask_to_gray(&s.lesion_mask))?;
        entries.push(entry);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        image_size: IMAGE_SIZE,
        seed: dataset.seed,
        counts: Severity::ALL
            .iter()
            .map(|&s| (s, dataset.config.counts[s.index()]))
            .collect(),
        samples: entries,
        split: dataset.split.clone(),
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, sorted_json(&manifest)?).map_err(|e| Error::io(&path, e))
}

fn read_raster(dir: &Path, rel: &str, id: &str) -> Result<Gray8> {
    let path: PathBuf = dir.join(rel);
    let img = match pgm::read(&path) {
        Err(Error::NotFound(p)) => {
            return Err(Error::Format(format!(
                "sample {id}: missing file {}",
                p.display()
            )));
        }
        other => other?,
    };
    if img.width != IMAGE_SIZE || img.height != IMAGE_SIZE {
        return Err(Error::Format(format!(
            "sample {id}: {} is {}×{}, expected {IMAGE_SIZE}×{IMAGE_SIZE}",
            path.display(),
            img.width,
            img.height
        )));
    }
    Ok(img)
}

fn read_mask(dir: &Path, rel: &str, id: &str) -> Result<Vec<bool>> {
    let img = read_raster(dir, rel, id)?;
    img.pixels
        .iter()
        .map(|&p| match p {
            0 => Ok(false),
            255 => Ok(true),
            other => Err(Error::Format(format!(
                "sample {id}: mask {rel} has non-binary value {other}"
            ))),
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::Format(format!(
            "manifest not found in {}",
            dir.display()
        )));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.image_size != IMAGE_SIZE {
        return Err(Error::Format(format!(
            "unsupported image size {}",
            manifest.image_size
        )));
    }

    let mut counts = [0usize; 5];
    for (sev, n) in &manifest.counts {
        counts[sev.index()] = *n;
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        if !seen.insert(e.id.clone()) {
            return Err(Error::Format(format!("duplicate sample id {}", e.id)));
        }
        if !manifest.split.contains_key(&e.id) {
            return Err(Error::Format(format!(
                "sample {} has no split assignment",
                e.id
            )));
        }
        let img = read_raster(dir, &e.image, &e.id)?;
        let sample = Sample {
            id: e.id.clone(),
            image: img
                .pixels
                .iter()
                .map(|&p| (f64::from(p) / 255.0) as f32)
                .collect(),
            label: e.label,
            lung_mask: read_mask(dir, &e.lung_mask, &e.id)?,
            lesion_mask: read_mask(dir, &e.lesion_mask, &e.id)?,
            ggo_fraction: e.ggo_fraction,
            severity: e.severity,
        };
        sample
            .validate()
            .map_err(|msg| Error::Format(format!("sample {}: {msg}", e.id)))?;
        samples.push(sample);
    }
    if let Some(extra) = manifest.split.keys().find(|k| !seen.contains(*k)) {
        return Err(Error::Format(format!("split lists unknown sample {extra}")));
    }
    Ok(Dataset {
        seed: manifest.seed,
        config: DatasetConfig { counts },
        samples,
        split: manifest.split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(sev: Severity, seed: u64) -> Sample {
        let id = sample_id(sev, 0);
        let mut rng = SplitMix64::keyed(seed, &id);
        loop {
            if let Ok(s) = generate_sample(&mut rng, sev, &id) {
                return s;
            }
        }
    }

    #[test]
    fn healthy_sample() {
        let s = sample(Severity::Ct0, 1);
        assert_eq!(s.lesion_area(), 0);
        assert_eq!(s.ggo_fraction, 0.0);
        assert_eq!(s.label, Label::Negative);
        assert!(s.lung_area() > 500);
    }

    #[test]
    fn every_class_lands_in_its_interval() {
        for seed in 0..6 {
            for sev in &Severity::ALL[1..] {
                let s = sample(*sev, seed);
                assert_eq!(s.validate(), Ok(()));
                assert!(sev.contains(s.ggo_fraction), "{sev}: {}", s.ggo_fraction);
                assert_eq!(s.label, Label::Positive);
            }
        }
        let s = sample(Severity::Ct3, 9);
        assert!(s.ggo_fraction > 0.50 && s.ggo_fraction <= 0.75);
    }

    #[test]
    fn deterministic() {
        assert_eq!(sample(Severity::Ct2, 5), sample(Severity::Ct2, 5));
        assert_ne!(
            sample(Severity::Ct2, 5).image,
            sample(Severity::Ct2, 6).image
        );
    }

    #[test]
    fn lesions_are_brighter_than_lung() {
        let s = sample(Severity::Ct2, 3);
        let mean = |pred: &dyn Fn(usize) -> bool| {
            let v: Vec<f64> = (0..PIXELS)
                .filter(|&i| pred(i))
                .map(|i| f64::from(s.image[i]))
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let lesion = mean(&|i| s.lesion_mask[i]);
        let clear_lung = mean(&|i| s.lung_mask[i] && !s.lesion_mask[i]);
        assert!(lesion - clear_lung > 0.2, "{lesion} vs {clear_lung}");
    }

    #[test]
    fn interval_boundaries() {
        use Severity::*;
        let cases = [
            (0.0, Ct0),
            (1e-9, Ct1),
            (0.25, Ct1),
            (0.2500001, Ct2),
            (0.50, Ct2),
            (0.75, Ct3),
            (0.7500001, Ct4),
            (1.0, Ct4),
        ];
        for (f, want) in cases {
            assert_eq!(Severity::from_ggo_fraction(f), want, "{f}");
        }
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(train_count(10), 7);
        assert_eq!(
            train_count(400)
                + train_count(250)
                + train_count(100)
                + train_count(40)
                + train_count(10),
            560
        );
        assert_eq!(train_count(1), 1);
        assert_eq!(train_count(3), 3);
        assert_eq!(train_count(0), 0);
    }

    #[test]
    fn small_dataset_split() {
        let ds = generate_dataset(
            &DatasetConfig {
                counts: [10, 0, 0, 0, 0],
            },
            4,
        )
        .unwrap();
        assert_eq!(ds.samples.len(), 10);
        assert_eq!(ds.train().count(), 7);
        assert_eq!(ds.test().count(), 3);
        assert!(ds.samples.iter().all(|s| s.label == Label::Negative));
    }

    #[test]
    fn severity_parsing() {
        assert_eq!("CT3".parse::<Severity>().unwrap(), Severity::Ct3);
        assert_eq!("ct-1".parse::<Severity>().unwrap(), Severity::Ct1);
        assert!("CT9".parse::<Severity>().is_err());
    }
}
