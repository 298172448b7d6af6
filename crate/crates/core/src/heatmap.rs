//! Input-resolution attribution maps shared by both methods.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm::{self, Gray8};
use crate::synth::{IMAGE_SIZE, PIXELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Iba,
    Gradcam,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Iba => "iba",
            Method::Gradcam => "gradcam",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iba" => Ok(Method::Iba),
            "gradcam" | "grad-cam" => Ok(Method::Gradcam),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

/// 64×64 non-negative map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Vec<f64>,
    pub method: Method,
    pub roi_applied: bool,
}

impl Heatmap {
    pub fn new(values: Vec<f64>, method: Method) -> Result<Self> {
        if values.len() != PIXELS {
            return Err(Error::contract(format!(
                "heatmap needs {PIXELS} values, got {}",
                values.len()
            )));
        }
        Ok(Heatmap {
            values,
            method,
            roi_applied: false,
        })
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Divided by its maximum; an all-zero map stays zero.
    pub fn normalized(&self) -> Vec<f64> {
        let m = self.max();
        if m > 0.0 {
            self.values.iter().map(|v| v / m).collect()
        } else {
            vec![0.0; self.values.len()]
        }
    }

    pub fn apply_roi(mut self, roi: &[bool]) -> Result<Self> {
        if roi.len() != PIXELS {
            return Err(Error::contract(format!(
                "ROI mask needs {PIXELS} values, got {}",
                roi.len()
            )));
        }
        for (v, &keep) in self.values.iter_mut().zip(roi) {
            if !keep {
                *v = 0.0;
            }
        }
        self.roi_applied = true;
        Ok(self)
    }

    /// Normalized to `[0, max]` as an 8-bit preview.
    pub fn preview(&self) -> Gray8 {
        Gray8 {
            width: IMAGE_SIZE,
            height: IMAGE_SIZE,
            pixels: self
                .normalized()
                .iter()
                .map(|v| (v * 255.0).round() as u8)
                .collect(),
        }
    }

    pub fn write_preview(&self, path: &Path) -> Result<()> {
        pgm::write(path, &self.preview())
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values
            .chunks(IMAGE_SIZE)
            .map(<[f64]>::to_vec)
            .collect()
    }

    pub fn from_rows(rows: &[Vec<f64>], method: Method) -> Result<Self> {
        if rows.len() != IMAGE_SIZE || rows.iter().any(|r| r.len() != IMAGE_SIZE) {
            return Err(Error::Format(format!(
                "heatmap grid must be {IMAGE_SIZE}×{IMAGE_SIZE}"
            )));
        }
        Heatmap::new(rows.concat(), method)
    }
}

/// Bilinear resize of a square `n×n` map to 64×64 with half-pixel centers
/// and edge clamping.
pub fn upsample_bilinear(src: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(src.len(), n * n, "source must be square");
    let scale = n as f64 / IMAGE_SIZE as f64;
    let coord = |i: usize| {
        let p = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let mut out = vec![0.0; PIXELS];
    for y in 0..IMAGE_SIZE {
        let (y0, y1, ty) = coord(y);
        for x in 0..IMAGE_SIZE {
            let (x0, x1, tx) = coord(x);
            let top = src[y0 * n + x0] * (1.0 - tx) + src[y0 * n + x1] * tx;
            let bottom = src[y1 * n + x0] * (1.0 - tx) + src[y1 * n + x1] * tx;
            out[y * IMAGE_SIZE + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_constant_and_corners() {
        let up = upsample_bilinear(&vec![0.75; 256], 16);
        assert!(up.iter().all(|v| (v - 0.75).abs() < 1e-12));

        let mut src = vec![0.0; 256];
        src[0] = 1.0;
        let up = upsample_bilinear(&src, 16);
        assert_eq!(up[0], 1.0);
        assert_eq!(up[PIXELS - 1], 0.0);
    }

    #[test]
    fn normalization_and_roi() {
        let mut v = vec![0.0; PIXELS];
        v[10] = 4.0;
        v[11] = 2.0;
        let h = Heatmap::new(v, Method::Iba).unwrap();
        let n = h.normalized();
        assert_eq!((n[10], n[11]), (1.0, 0.5));
        assert!(Heatmap::new(vec![0.0; PIXELS], Method::Iba)
            .unwrap()
            .normalized()
            .iter()
            .all(|&x| x == 0.0));

        let masked = h.clone().apply_roi(&vec![false; PIXELS]).unwrap();
        assert!(masked.values.iter().all(|&x| x == 0.0));
        assert!(masked.roi_applied);
        assert!(h.apply_roi(&[true; 3]).is_err());
    }

    #[test]
    fn rows_round_trip() {
        let h = Heatmap::new(
            (0..PIXELS).map(|i| i as f64 / 7.0).collect(),
            Method::Gradcam,
        )
        .unwrap();
        assert_eq!(Heatmap::from_rows(&h.rows(), Method::Gradcam).unwrap(), h);
    }
}
