//! Grad-CAM at the attribution layer.

use serde::{Deserialize, Serialize};

use crate::classifier::Model;
use crate::error::{Error, Result};
use crate::heatmap::{upsample_bilinear, Heatmap, Method};
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    /// The layer hosting the bottleneck.
    #[default]
    Attribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetRule {
    #[default]
    Argmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GradCamConfig {
    pub layer: Layer,
    pub target: TargetRule,
}

/// Pre-normalization map at feature resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCam {
    pub values: Vec<f64>,
    pub side: usize,
    pub target_class: usize,
}

/// `relu(Σ_c w_c A_c)` with `w_c` the spatial mean of `grads` in channel `c`.
pub fn weighted_map<T: Scalar>(features: &Tensor<T>, grads: &[T]) -> Result<Vec<f64>> {
    let (c, h, w) = match *features.shape() {
        [c, h, w] => (c, h, w),
        ref s => {
            return Err(Error::contract(format!(
                "features must be [C,H,W], got {s:?}"
            )))
        }
    };
    if grads.len() != features.len() {
        return Err(Error::contract("gradient and feature sizes differ"));
    }
    let plane = h * w;
    let a = features.data();
    let mut map = vec![0.0f64; plane];
    for k in 0..c {
        let g = &grads[k * plane..(k + 1) * plane];
        let wk = g.iter().map(|v| v.f64()).sum::<f64>() / plane as f64;
        for (m, v) in map.iter_mut().zip(&a[k * plane..(k + 1) * plane]) {
            *m += wk * v.f64();
        }
    }
    map.iter_mut().for_each(|m| *m = m.max(0.0));
    Ok(map)
}

pub fn gradcam_raw<T: Scalar>(model: &Model<T>, image: &Tensor<T>) -> Result<RawCam> {
    let features = model.forward_capture(image)?;
    let mut tape = Tape::new();
    let params = model.params_on_tape(&mut tape, false);
    let f = tape.param(features.clone());
    let logits = model.tail_on_tape(&mut tape, f, &params)?;
    let z = tape.value(logits).data();
    let target = usize::from(z[1] > z[0]);
    let score = tape.select(logits, target)?;
    tape.backward(score)?;
    let grads = tape
        .grad(f)
        .map(<[T]>::to_vec)
        .unwrap_or_else(|| vec![T::zero(); features.len()]);
    Ok(RawCam {
        values: weighted_map(&features, &grads)?,
        side: features.shape()[1],
        target_class: target,
    })
}

/// Upsampled, max-normalized to `[0, 1]`, then ROI-masked.
pub fn gradcam_heatmap<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    roi: Option<&[bool]>,
) -> Result<Heatmap> {
    let raw = gradcam_raw(model, image)?;
    let up = Heatmap::new(upsample_bilinear(&raw.values, raw.side), Method::Gradcam)?;
    let h = Heatmap::new(up.normalized(), Method::Gradcam)?;
    match roi {
        Some(r) => h.apply_roi(r),
        None => Ok(h),
    }
}
