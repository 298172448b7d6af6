//! The two fixed desk-scale CNNs, their training loop, and the split
//! forward pass around the attribution layer.
//!
//! DeskNet-A: `conv(16) relu pool conv(32) relu pool conv(32) relu | pool gap dense(2)`
//! DeskNet-B: `conv(8) relu pool conv(24) relu pool conv(24) relu | conv(24) relu pool gap dense(2)`
//!
//! `|` marks the attribution layer: [`Model::forward_capture`] returns the
//! activations there and [`Model::forward_tail`] runs everything after it.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::SplitMix64;
use crate::synth::{Dataset, Label, Sample, IMAGE_SIZE};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "DeskNet-A")]
    A,
    #[serde(rename = "DeskNet-B")]
    B,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::A => "DeskNet-A",
            Arch::B => "DeskNet-B",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" | "DESKNET-A" => Ok(Arch::A),
            "B" | "DESKNET-B" => Ok(Arch::B),
            _ => Err(Error::Config(format!("unknown architecture {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layer {
    Conv { cin: usize, cout: usize },
    Relu,
    MaxPool,
    GlobalAvgPool,
    Dense { inputs: usize, outputs: usize },
}

impl Layer {
    fn param_shapes(self) -> Option<[Vec<usize>; 2]> {
        match self {
            Layer::Conv { cin, cout } => Some([vec![cout, cin, 3, 3], vec![cout]]),
            Layer::Dense { inputs, outputs } => Some([vec![outputs, inputs], vec![outputs]]),
            _ => None,
        }
    }
}

struct ArchSpec {
    layers: Vec<Layer>,
    /// Number of leading layers that produce the attribution-layer features.
    head_len: usize,
    feature_shape: [usize; 3],
}

fn spec(arch: Arch) -> ArchSpec {
    use Layer::*;
    match arch {
        Arch::A => ArchSpec {
            layers: vec![
                Conv { cin: 1, cout: 16 },
                Relu,
                MaxPool,
                Conv { cin: 16, cout: 32 },
                Relu,
                MaxPool,
                Conv { cin: 32, cout: 32 },
                Relu,
                MaxPool,
                GlobalAvgPool,
                Dense {
                    inputs: 32,
                    outputs: 2,
                },
            ],
            head_len: 8,
            feature_shape: [32, 16, 16],
        },
        Arch::B => ArchSpec {
            layers: vec![
                Conv { cin: 1, cout: 8 },
                Relu,
                MaxPool,
                Conv { cin: 8, cout: 24 },
                Relu,
                MaxPool,
                Conv { cin: 24, cout: 24 },
                Relu,
                Conv { cin: 24, cout: 24 },
                Relu,
                MaxPool,
                GlobalAvgPool,
                Dense {
                    inputs: 24,
                    outputs: 2,
                },
            ],
            head_len: 8,
            feature_shape: [24, 16, 16],
        },
    }
}

/// Subtracted from every pixel before the first convolution.
pub const INPUT_CENTER: f64 = 0.5;

/// Names and shapes of the parameters of `arch`, in checkpoint order.
pub fn param_layout(arch: Arch) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let (mut conv, mut dense) = (0, 0);
    for layer in spec(arch).layers {
        if let Some([w, b]) = layer.param_shapes() {
            let name = match layer {
                Layer::Conv { .. } => {
                    conv += 1;
                    format!("conv{conv}")
                }
                _ => {
                    dense += 1;
                    if dense == 1 {
                        "dense".to_string()
                    } else {
                        format!("dense{dense}")
                    }
                }
            };
            out.push((format!("{name}.weight"), w));
            out.push((format!("{name}.bias"), b));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub arch: Arch,
    pub seed: u64,
    /// In [`param_layout`] order.
    pub params: Vec<Tensor<T>>,
}

/// He-initialized model: weights ~ N(0, 2/fan_in), zero biases.
pub fn build_model(arch: Arch, seed: u64) -> Model<f32> {
    Model::new(arch, seed)
}

impl<T: Scalar> Model<T> {
    pub fn new(arch: Arch, seed: u64) -> Self {
        let mut rng = SplitMix64::child(seed, 0x006d_6f64_656c);
        let params = param_layout(arch)
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".bias") {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| T::of(rng.normal(0.0, std))).collect();
                Tensor::new(shape, data).expect("layout shapes are consistent")
            })
            .collect();
        Model { arch, seed, params }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        spec(self.arch).feature_shape
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch,
            seed: self.seed,
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every parameter as a leaf.
    pub fn params_on_tape(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone().with_requires_grad(requires_grad)))
            .collect()
    }

    fn run(
        &self,
        tape: &mut Tape<T>,
        mut x: Var,
        params: &[Var],
        from: usize,
        to: usize,
    ) -> Result<Var> {
        if params.len() != self.params.len() {
            return Err(Error::contract("parameter handles do not match the model"));
        }
        let layers = spec(self.arch).layers;
        let mut p = layers[..from]
            .iter()
            .filter(|l| l.param_shapes().is_some())
            .count()
            * 2;
        for layer in &layers[from..to] {
            x = match *layer {
                Layer::Conv { .. } => {
                    p += 2;
                    tape.conv2d(x, params[p - 2], params[p - 1])?
                }
                Layer::Relu => tape.relu(x)?,
                Layer::MaxPool => tape.maxpool2d(x)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
                Layer::Dense { .. } => {
                    p += 2;
                    tape.dense(x, params[p - 2], params[p - 1])?
                }
            };
        }
        Ok(x)
    }

    /// Layers up to and including the attribution layer.
    pub fn head_on_tape(&self, tape: &mut Tape<T>, image: Var, params: &[Var]) -> Result<Var> {
        let s = spec(self.arch);
        let shape = tape.value(image).shape();
        if shape != [1, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::contract(format!(
                "image must be [1,64,64], got {shape:?}"
            )));
        }
        let centered = tape.add_scalar(image, T::of(-INPUT_CENTER))?;
        self.run(tape, centered, params, 0, s.head_len)
    }

    /// Layers after the attribution layer, producing logits.
    pub fn tail_on_tape(&self, tape: &mut Tape<T>, features: Var, params: &[Var]) -> Result<Var> {
        let s = spec(self.arch);
        if tape.value(features).shape() != s.feature_shape {
            return Err(Error::contract(format!(
                "features must be {:?}, got {:?}",
                s.feature_shape,
                tape.value(features).shape()
            )));
        }
        self.run(tape, features, params, s.head_len, s.layers.len())
    }

    pub fn logits_on_tape(&self, tape: &mut Tape<T>, image: Var, params: &[Var]) -> Result<Var> {
        let f = self.head_on_tape(tape, image, params)?;
        self.tail_on_tape(tape, f, params)
    }

    pub fn forward_capture(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.params_on_tape(&mut tape, false);
        let x = tape.constant(image.clone());
        let f = self.head_on_tape(&mut tape, x, &params)?;
        Ok(tape.value(f).clone())
    }

    /// Class probabilities `[p_negative, p_positive]` from attribution-layer features.
    pub fn forward_tail(&self, features: &Tensor<T>) -> Result<[T; 2]> {
        let mut tape = Tape::new();
        let params = self.params_on_tape(&mut tape, false);
        let f = tape.constant(features.clone());
        let logits = self.tail_on_tape(&mut tape, f, &params)?;
        let p = tape.softmax(logits)?;
        let d = tape.value(p).data();
        Ok([d[0], d[1]])
    }

    pub fn predict(&self, image: &Tensor<T>) -> Result<[T; 2]> {
        self.forward_tail(&self.forward_capture(image)?)
    }

    pub fn logits(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let params = self.params_on_tape(&mut tape, false);
        let x = tape.constant(image.clone());
        let z = self.logits_on_tape(&mut tape, x, &params)?;
        Ok(tape.value(z).data().to_vec())
    }

    /// Predicted class index (ties go to the negative class).
    pub fn predict_class(&self, image: &Tensor<T>) -> Result<usize> {
        let p = self.predict(image)?;
        Ok(usize::from(p[1] > p[0]))
    }
}

/// `[1,64,64]` tensor of a sample's pixels.
pub fn image_tensor<T: Scalar>(sample: &Sample) -> Tensor<T> {
    let data = sample.image.iter().map(|&v| T::of(f64::from(v))).collect();
    Tensor::new(vec![1, IMAGE_SIZE, IMAGE_SIZE], data).expect("sample raster is 64×64")
}

// ---- training ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

/// Per-sample loss and parameter gradients.
pub fn loss_and_grads<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    label: usize,
) -> Result<(T, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let params = model.params_on_tape(&mut tape, true);
    let x = tape.constant(image.clone());
    let z = model.logits_on_tape(&mut tape, x, &params)?;
    let loss = tape.softmax_cross_entropy(z, label)?;
    tape.backward(loss)?;
    let grads = params
        .iter()
        .zip(&model.params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map_or_else(|| vec![T::zero(); p.len()], <[T]>::to_vec)
        })
        .collect();
    Ok((tape.value(loss).item(), grads))
}

pub fn accuracy<'a, T: Scalar>(
    model: &Model<T>,
    samples: impl Iterator<Item = &'a Sample>,
) -> Result<Option<f64>> {
    let (mut hit, mut n) = (0usize, 0usize);
    for s in samples {
        let pred = model.predict_class(&image_tensor(s))?;
        hit += usize::from(pred == s.label.class_index());
        n += 1;
    }
    Ok((n > 0).then(|| hit as f64 / n as f64))
}

/// Mini-batch Adam on mean softmax cross-entropy over the train split.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    if config.batch_size == 0 || !(config.learning_rate >= 0.0) {
        return Err(Error::Config(
            "batch size must be positive and learning rate non-negative".into(),
        ));
    }
    let train: Vec<&Sample> = dataset.train().collect();
    let has = |l: Label| train.iter().any(|s| s.label == l);
    if !has(Label::Negative) || !has(Label::Positive) {
        return Err(Error::Config(
            "training split must contain both negative and positive samples".into(),
        ));
    }
    let images: Vec<Tensor<T>> = train.iter().map(|s| image_tensor(s)).collect();
    let adam = AdamConfig::with_lr(config.learning_rate);
    let mut state = AdamState::new();
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        SplitMix64::child(config.seed, epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Vec<Vec<T>> = model
                .params
                .iter()
                .map(|p| vec![T::zero(); p.len()])
                .collect();
            for &i in batch {
                let (loss, grads) =
                    loss_and_grads(model, &images[i], train[i].label.class_index())?;
                loss_sum += loss.f64();
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
            }
            let inv = T::one() / T::of(batch.len() as f64);
            acc.iter_mut().flatten().for_each(|g| *g = *g * inv);
            adam_step(&mut model.params, &acc, &mut state, &adam)?;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss: loss_sum / train.len() as f64,
            test_accuracy: accuracy(model, dataset.test())?,
        };
        history.epochs.push(record);
    }
    Ok(history)
}

/// Trains in the configured precision; f64 runs on a widened copy.
pub fn train_model(
    model: &mut Model<f32>,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    match config.precision {
        Precision::F32 => train(model, dataset, config),
        Precision::F64 => {
            let mut wide = model.cast::<f64>();
            let history = train(&mut wide, dataset, config)?;
            *model = wide.cast();
            Ok(history)
        }
    }
}

// ---- feature statistics ---------------------------------------------------------

pub const SIGMA_FLOOR: f64 = 1e-5;
pub const DEFAULT_STATS_IMAGES: usize = 500;

/// Per-element mean and (floored) population standard deviation of the
/// attribution-layer features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats<T = f32> {
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
    pub sigma_floor: f64,
}

pub fn estimate_stats<T: Scalar>(
    model: &Model<T>,
    images: &[Tensor<T>],
    sigma_floor: f64,
) -> Result<FeatureStats<T>> {
    if images.len() < 2 {
        return Err(Error::contract(format!(
            "estimate_stats needs at least 2 images, got {}",
            images.len()
        )));
    }
    let feats: Vec<Tensor<T>> = images
        .iter()
        .map(|x| model.forward_capture(x))
        .collect::<Result<_>>()?;
    let shape = feats[0].shape().to_vec();
    let n = feats.len() as f64;
    let len = feats[0].len();
    let mut mean = vec![0f64; len];
    for f in &feats {
        mean.iter_mut()
            .zip(f.data())
            .for_each(|(m, &v)| *m += v.f64());
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0f64; len];
    for f in &feats {
        for ((s, &v), &m) in var.iter_mut().zip(f.data()).zip(&mean) {
            let d = v.f64() - m;
            *s += d * d;
        }
    }
    let sigma = var
        .iter()
        .map(|s| T::of((s / n).sqrt().max(sigma_floor)))
        .collect();
    Ok(FeatureStats {
        mu: Tensor::new(shape.clone(), mean.into_iter().map(T::of).collect())?,
        sigma: Tensor::new(shape, sigma)?,
        sigma_floor,
    })
}

/// Statistics over the first `DEFAULT_STATS_IMAGES` training images.
pub fn estimate_stats_from_dataset<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
) -> Result<FeatureStats<T>> {
    let images: Vec<Tensor<T>> = dataset
        .train()
        .take(DEFAULT_STATS_IMAGES)
        .map(image_tensor)
        .collect();
    estimate_stats(model, &images, SIGMA_FLOOR)
}

impl<T: Scalar> FeatureStats<T> {
    pub fn cast<U: Scalar>(&self) -> FeatureStats<U> {
        FeatureStats {
            mu: self.mu.cast(),
            sigma: self.sigma.cast(),
            sigma_floor: self.sigma_floor,
        }
    }
}

// ---- checkpoints -------------------------------------------------------------------
//
// Layout: 8-byte magic "DESKIBA1", u32 little-endian header length, UTF-8
// JSON header {arch, format_version, params: [{name, shape}], seed}, then
// every parameter as little-endian f32 in header order.

const MAGIC: &[u8; 8] = b"DESKIBA1";

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: Arch,
    format_version: u32,
    params: Vec<ParamEntry>,
    seed: u64,
}

impl Model<f32> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            arch: self.arch,
            format_version: 1,
            params: param_layout(self.arch)
                .into_iter()
                .map(|(name, shape)| ParamEntry { name, shape })
                .collect(),
            seed: self.seed,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let layout = param_layout(header.arch);
        let matches = layout.len() == header.params.len()
            && layout
                .iter()
                .zip(&header.params)
                .all(|((n, s), e)| *n == e.name && *s == e.shape);
        if !matches {
            return Err(bad(&format!(
                "parameter layout does not match {}",
                header.arch
            )));
        }
        let mut raw = bytes[12 + hlen..].chunks_exact(4);
        let expected: usize = layout
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        if raw.len() != expected || !raw.remainder().is_empty() {
            return Err(bad(&format!(
                "expected {expected} values, found {} bytes",
                bytes.len() - 12 - hlen
            )));
        }
        let params = layout
            .into_iter()
            .map(|(_, shape)| {
                let n = shape.iter().product();
                let data = raw
                    .by_ref()
                    .take(n)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::new(shape, data)
            })
            .collect::<Result<_>>()?;
        Ok(Model {
            arch: header.arch,
            seed: header.seed,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
