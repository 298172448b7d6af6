//! Information bottleneck attribution.
//!
//! A per-element mask `M` mixes the attribution-layer features `X` with
//! noise `η ~ N(μ, σ²)`: `X̃ = M⊙X + (1−M)⊙η`. The mask is learned per image
//! by minimizing the mean information capacity of the bottleneck plus
//! `beta` times the cross-entropy of the model's own decision on `X̃`.
//! Capacity is the KL divergence between `X̃ | X` and the noise
//! distribution, which in standardized coordinates `z = (x − μ)/σ` is
//!
//! ```text
//! KL = −ln(1−m) + ((1−m)² + m²z² − 1) / 2
//! ```

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::classifier::{FeatureStats, Model, SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::heatmap::{upsample_bilinear, Heatmap, Method};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::SplitMix64;
use crate::tensor::{gaussian_kernel, Scalar, Tape, Tensor, Var};

pub const ONE_MINUS_M_FLOOR: f64 = 1e-6;

/// What the input-resolution heatmap is read out from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    /// Channel-summed capacity in bits.
    #[default]
    Capacity,
    /// Channel-mean of the learned mask.
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckConfig {
    pub beta: f64,
    pub steps: usize,
    pub learning_rate: f64,
    /// Noise draws per optimization step.
    pub samples: usize,
    pub alpha_init: f64,
    /// Gaussian smoothing of the mask in feature pixels; 0 disables it.
    pub smoothing_sigma: f64,
    pub one_minus_m_floor: f64,
    pub seed: u64,
    pub readout: Readout,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        BottleneckConfig {
            beta: 10.0,
            steps: 10,
            learning_rate: 1.0,
            samples: 10,
            alpha_init: 5.0,
            smoothing_sigma: 1.0,
            one_minus_m_floor: ONE_MINUS_M_FLOOR,
            seed: 0,
            readout: Readout::Capacity,
        }
    }
}

impl BottleneckConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("bottleneck {what}")));
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be finite and >= 0");
        }
        if self.samples == 0 {
            return bad("needs at least one noise sample per step");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning rate must be finite and >= 0");
        }
        if !self.alpha_init.is_finite() {
            return bad("alpha_init must be finite");
        }
        if !(self.smoothing_sigma.is_finite() && self.smoothing_sigma >= 0.0) {
            return bad("smoothing sigma must be finite and >= 0");
        }
        if !(self.one_minus_m_floor > 0.0 && self.one_minus_m_floor < 1.0) {
            return bad("one_minus_m_floor must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Unconstrained per-element mask logits plus the rule deriving `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState<T = f32> {
    pub alpha: Tensor<T>,
    pub smoothing_sigma: f64,
    pub one_minus_m_floor: f64,
}

impl<T: Scalar> MaskState<T> {
    pub fn new(shape: &[usize], config: &BottleneckConfig) -> Self {
        MaskState {
            alpha: Tensor::full(shape, T::of(config.alpha_init)),
            smoothing_sigma: config.smoothing_sigma,
            one_minus_m_floor: config.one_minus_m_floor,
        }
    }

    /// `M = min(smooth(sigmoid(alpha)), 1 − floor)`, always in `[0, 1 − floor]`.
    pub fn mask(&self) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let a = tape.constant(self.alpha.clone());
        let m = mask_on_tape(&mut tape, a, self.smoothing_sigma, self.one_minus_m_floor)?;
        Ok(tape.value(m).clone())
    }
}

pub fn mask_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    alpha: Var,
    smoothing_sigma: f64,
    floor: f64,
) -> Result<Var> {
    let mut m = tape.sigmoid(alpha)?;
    if smoothing_sigma > 0.0 {
        m = tape.smooth2d(m, gaussian_kernel(smoothing_sigma))?;
    }
    tape.clamp_max(m, T::of(1.0 - floor))
}

/// Per-element capacity (nats) and its spatial reduction (bits).
#[derive(Debug, Clone, PartialEq)]
pub struct CapacityMap<T = f32> {
    pub per_element: Tensor<T>,
    /// `[H*W]` row-major channel sums divided by `ln 2`.
    pub reduced_bits: Vec<f64>,
    pub side: usize,
}

impl<T: Scalar> CapacityMap<T> {
    pub fn from_per_element(per_element: Tensor<T>) -> Result<Self> {
        let (c, h, w) = match *per_element.shape() {
            [c, h, w] if h == w => (c, h, w),
            ref s => {
                return Err(Error::contract(format!(
                    "capacity needs a square [C,H,W] tensor, got {s:?}"
                )))
            }
        };
        let d = per_element.data();
        if d.iter().any(|v| !(v.f64() >= 0.0)) {
            return Err(Error::contract("capacity must be non-negative"));
        }
        let plane = h * w;
        let reduced_bits = (0..plane)
            .map(|i| (0..c).map(|k| d[k * plane + i].f64()).sum::<f64>() / LN_2)
            .collect();
        Ok(CapacityMap {
            per_element,
            reduced_bits,
            side: h,
        })
    }

    /// Capacity of `mask` for the given features.
    pub fn evaluate(
        features: &Tensor<T>,
        mask: &Tensor<T>,
        stats: &FeatureStats<T>,
        floor: f64,
    ) -> Result<Self> {
        check_same(&[features, mask, &stats.mu, &stats.sigma])?;
        let data = features
            .data()
            .iter()
            .zip(mask.data())
            .zip(stats.mu.data().iter().zip(stats.sigma.data()))
            .map(|((&x, &m), (&mu, &s))| {
                let z = (x.f64() - mu.f64()) / s.f64();
                T::of(kl_standardized(m.f64(), z, floor))
            })
            .collect();
        CapacityMap::from_per_element(Tensor::new(features.shape().to_vec(), data)?)
    }

    pub fn total_bits(&self) -> f64 {
        self.reduced_bits.iter().sum()
    }
}

fn check_same<T: Scalar>(ts: &[&Tensor<T>]) -> Result<()> {
    let s = ts[0].shape();
    match ts.iter().find(|t| t.shape() != s) {
        Some(t) => Err(Error::contract(format!(
            "shape mismatch: {s:?} vs {:?}",
            t.shape()
        ))),
        None => Ok(()),
    }
}

/// `X̃ = X⊙M + (1−M)⊙η`.
pub fn inject_noise<T: Scalar>(x: &Tensor<T>, m: &Tensor<T>, eta: &Tensor<T>) -> Result<Tensor<T>> {
    check_same(&[x, m, eta])?;
    if m.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::contract("mask values must lie in [0, 1]"));
    }
    let data = x
        .data()
        .iter()
        .zip(m.data())
        .zip(eta.data())
        .map(|((&x, &m), &e)| x * m + (T::one() - m) * e)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn standard_draw<T: Scalar>(shape: &[usize], rng: &mut SplitMix64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.standard_normal())).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches draw count")
}

fn eta_from<T: Scalar>(stats: &FeatureStats<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    check_same(&[&stats.mu, &stats.sigma, eps])?;
    let data = stats
        .mu
        .data()
        .iter()
        .zip(stats.sigma.data())
        .zip(eps.data())
        .map(|((&mu, &s), &e)| mu + s * e)
        .collect();
    Tensor::new(eps.shape().to_vec(), data)
}

/// One draw of `η ~ N(μ, σ²)`, elementwise independent.
pub fn sample_noise<T: Scalar>(stats: &FeatureStats<T>, rng: &mut SplitMix64) -> Tensor<T> {
    let eps = standard_draw(stats.mu.shape(), rng);
    eta_from(stats, &eps).expect("stats tensors share a shape")
}

/// Capacity in nats of a single element with mask `m` and standardized
/// feature `z`; `1 − m` is clamped to at least `floor`.
pub fn kl_standardized(m: f64, z: f64, floor: f64) -> f64 {
    let om = (1.0 - m).max(floor);
    let m = 1.0 - om;
    // −ln(om) + (om² − 1)/2 ≥ 0 for om ∈ (0, 1]; written via ln_1p for accuracy near m = 0.
    let base = -(-m).ln_1p() + 0.5 * (om * om - 1.0);
    (base + 0.5 * m * m * z * z).max(0.0)
}

pub fn capacity_kl(m: f64, x: f64, mu: f64, sigma: f64) -> Result<f64> {
    // f32 statistics round the floor itself down by a few ulps.
    if !(sigma >= SIGMA_FLOOR * (1.0 - 1e-6)) {
        return Err(Error::contract(format!(
            "sigma {sigma} is below the floor {SIGMA_FLOOR}"
        )));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::contract(format!("mask value {m} outside [0, 1]")));
    }
    Ok(kl_standardized(m, (x - mu) / sigma, ONE_MINUS_M_FLOOR))
}

/// Vars of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub loss: Var,
    pub capacity: Var,
    pub cross_entropy: Var,
    pub mask: Var,
}

/// Records the objective for standard-normal draws `eps` on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn objective_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    params: &[Var],
    features: &Tensor<T>,
    alpha: Var,
    stats: &FeatureStats<T>,
    target: usize,
    config: &BottleneckConfig,
    eps: &[Tensor<T>],
) -> Result<ObjectiveVars> {
    check_same(&[features, &stats.mu, &stats.sigma, tape.value(alpha)])?;
    if eps.is_empty() {
        return Err(Error::contract("objective needs at least one noise draw"));
    }
    let mask = mask_on_tape(
        tape,
        alpha,
        config.smoothing_sigma,
        config.one_minus_m_floor,
    )?;
    let om = tape.rsub_scalar(T::one(), mask)?;

    let z2: Vec<T> = features
        .data()
        .iter()
        .zip(stats.mu.data().iter().zip(stats.sigma.data()))
        .map(|(&x, (&mu, &s))| {
            let z = (x - mu) / s;
            z * z
        })
        .collect();
    let z2 = tape.constant(Tensor::new(features.shape().to_vec(), z2)?);
    let om2 = tape.mul(om, om)?;
    let m2 = tape.mul(mask, mask)?;
    let m2z2 = tape.mul(m2, z2)?;
    let quad = tape.add(om2, m2z2)?;
    let quad = tape.scale(quad, T::of(0.5))?;
    let quad = tape.add_scalar(quad, T::of(-0.5))?;
    let log_om = tape.ln(om)?;
    let kl = tape.sub(quad, log_om)?;
    let capacity = tape.mean(kl)?;

    let x = tape.constant(features.clone());
    let signal = tape.mul(mask, x)?;
    let mut ce_sum: Option<Var> = None;
    for e in eps {
        let eta = tape.constant(eta_from(stats, e)?);
        let noise = tape.mul(om, eta)?;
        let xt = tape.add(signal, noise)?;
        let logits = model.tail_on_tape(tape, xt, params)?;
        let ce = tape.softmax_cross_entropy(logits, target)?;
        ce_sum = Some(match ce_sum {
            Some(s) => tape.add(s, ce)?,
            None => ce,
        });
    }
    let cross_entropy = tape.scale(
        ce_sum.expect("eps is nonempty"),
        T::of(1.0 / eps.len() as f64),
    )?;
    let weighted = tape.scale(cross_entropy, T::of(config.beta))?;
    let loss = tape.add(capacity, weighted)?;
    Ok(ObjectiveVars {
        loss,
        capacity,
        cross_entropy,
        mask,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval<T> {
    pub loss: T,
    pub capacity: T,
    pub cross_entropy: T,
    /// Gradient of the loss with respect to alpha.
    pub grad: Vec<T>,
}

/// Objective and alpha-gradient for fixed standard-normal draws.
#[allow(clippy::too_many_arguments)]
pub fn iba_objective_with_noise<T: Scalar>(
    model: &Model<T>,
    features: &Tensor<T>,
    mask_state: &MaskState<T>,
    stats: &FeatureStats<T>,
    target: usize,
    config: &BottleneckConfig,
    eps: &[Tensor<T>],
) -> Result<ObjectiveEval<T>> {
    let mut tape = Tape::new();
    let params = model.params_on_tape(&mut tape, false);
    let alpha = tape.param(mask_state.alpha.clone());
    let cfg = BottleneckConfig {
        smoothing_sigma: mask_state.smoothing_sigma,
        one_minus_m_floor: mask_state.one_minus_m_floor,
        ..config.clone()
    };
    let vars = objective_on_tape(
        &mut tape, model, &params, features, alpha, stats, target, &cfg, eps,
    )?;
    tape.backward(vars.loss)?;
    Ok(ObjectiveEval {
        loss: tape.value(vars.loss).item(),
        capacity: tape.value(vars.capacity).item(),
        cross_entropy: tape.value(vars.cross_entropy).item(),
        grad: tape
            .grad(alpha)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); features.len()]),
    })
}

/// Objective with `config.samples` fresh draws from `rng`.
pub fn iba_objective<T: Scalar>(
    model: &Model<T>,
    features: &Tensor<T>,
    mask_state: &MaskState<T>,
    stats: &FeatureStats<T>,
    target: usize,
    config: &BottleneckConfig,
    rng: &mut SplitMix64,
) -> Result<ObjectiveEval<T>> {
    let eps = draws(features.shape(), config.samples, rng);
    iba_objective_with_noise(model, features, mask_state, stats, target, config, &eps)
}

fn draws<T: Scalar>(shape: &[usize], k: usize, rng: &mut SplitMix64) -> Vec<Tensor<T>> {
    (0..k).map(|_| standard_draw(shape, rng)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub target_class: usize,
    /// Unmasked class probabilities.
    pub probabilities: [f64; 2],
    /// Loss at each step, before that step's update.
    pub loss_trace: Vec<f64>,
    pub capacity_trace: Vec<f64>,
    /// Loss of the initial and final mask on one shared set of held-out draws.
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Attribution<T = f32> {
    pub mask: MaskState<T>,
    pub capacity: CapacityMap<T>,
    pub features: Tensor<T>,
    pub diagnostics: Diagnostics,
}

impl<T: Scalar> Attribution<T> {
    pub fn heatmap(&self, readout: Readout, roi: Option<&[bool]>) -> Result<Heatmap> {
        match readout {
            Readout::Capacity => capacity_heatmap(&self.capacity, roi),
            Readout::Mask => mask_heatmap(&self.mask.mask()?, roi),
        }
    }
}

const OPTIMIZE_STREAM: u64 = 0;
const EVALUATE_STREAM: u64 = 1;

/// Per-image seed derived from a run seed, so results do not depend on
/// which images are attributed together or in what order.
pub fn image_seed(seed: u64, id: &str) -> u64 {
    SplitMix64::keyed(seed, id).next_u64()
}

/// Learns the mask for one image. Deterministic in `config.seed`.
pub fn optimize_mask<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    stats: &FeatureStats<T>,
    config: &BottleneckConfig,
) -> Result<Attribution<T>> {
    config.validate()?;
    let features = model.forward_capture(image)?;
    let p = model.forward_tail(&features)?;
    let target = usize::from(p[1] > p[0]);

    let mut state = MaskState::new(features.shape(), config);
    let mut rng = SplitMix64::child(config.seed, OPTIMIZE_STREAM);
    let held_out = draws(
        features.shape(),
        config.samples,
        &mut SplitMix64::child(config.seed, EVALUATE_STREAM),
    );
    let initial_loss =
        iba_objective_with_noise(model, &features, &state, stats, target, config, &held_out)?.loss;

    let adam = AdamConfig::with_lr(config.learning_rate);
    let mut adam_state = AdamState::new();
    let mut loss_trace = Vec::with_capacity(config.steps);
    let mut capacity_trace = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let eval = iba_objective(model, &features, &state, stats, target, config, &mut rng)?;
        loss_trace.push(eval.loss.f64());
        capacity_trace.push(eval.capacity.f64());
        adam_step(
            std::slice::from_mut(&mut state.alpha),
            &[eval.grad],
            &mut adam_state,
            &adam,
        )?;
    }
    let final_loss =
        iba_objective_with_noise(model, &features, &state, stats, target, config, &held_out)?.loss;

    let mask = state.mask()?;
    let capacity = CapacityMap::evaluate(&features, &mask, stats, config.one_minus_m_floor)?;
    Ok(Attribution {
        mask: state,
        capacity,
        features,
        diagnostics: Diagnostics {
            target_class: target,
            probabilities: [p[0].f64(), p[1].f64()],
            loss_trace,
            capacity_trace,
            initial_loss: initial_loss.f64(),
            final_loss: final_loss.f64(),
        },
    })
}

/// Class probabilities of `X̃` under `mask` and noise `eta`.
pub fn masked_prediction<T: Scalar>(
    model: &Model<T>,
    features: &Tensor<T>,
    mask: &Tensor<T>,
    eta: &Tensor<T>,
) -> Result<[T; 2]> {
    model.forward_tail(&inject_noise(features, mask, eta)?)
}

/// Channel-summed capacity in bits, resized to 64×64, optionally ROI-masked.
pub fn capacity_heatmap<T: Scalar>(
    capacity: &CapacityMap<T>,
    roi: Option<&[bool]>,
) -> Result<Heatmap> {
    let h = Heatmap::new(
        upsample_bilinear(&capacity.reduced_bits, capacity.side),
        Method::Iba,
    )?;
    match roi {
        Some(r) => h.apply_roi(r),
        None => Ok(h),
    }
}

/// Channel-mean of `M`, resized to 64×64, optionally ROI-masked.
pub fn mask_heatmap<T: Scalar>(mask: &Tensor<T>, roi: Option<&[bool]>) -> Result<Heatmap> {
    let (c, h, w) = match *mask.shape() {
        [c, h, w] if h == w => (c, h, w),
        ref s => {
            return Err(Error::contract(format!(
                "mask needs a square [C,H,W] tensor, got {s:?}"
            )))
        }
    };
    let d = mask.data();
    let plane = h * w;
    let mean: Vec<f64> = (0..plane)
        .map(|i| (0..c).map(|k| d[k * plane + i].f64()).sum::<f64>() / c as f64)
        .collect();
    let hm = Heatmap::new(upsample_bilinear(&mean, h), Method::Iba)?;
    match roi {
        Some(r) => hm.apply_roi(r),
        None => Ok(hm),
    }
}
