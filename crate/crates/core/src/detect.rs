//! Thresholded connected components and area-based severity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{Heatmap, Method};
use crate::synth::{Label, Severity, IMAGE_SIZE, PIXELS};

pub const DEFAULT_TAU: f64 = 0.3;
pub const DEFAULT_MIN_AREA: usize = 4;

/// Inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub id: usize,
    pub pixel_count: usize,
    pub bbox: BoundingBox,
    /// Mean of the max-normalized heatmap over the component.
    pub mean_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeverityEstimate {
    pub ggo_fraction_pred: f64,
    pub severity_pred: Severity,
}

fn check_mask(mask: &[bool], what: &str) -> Result<()> {
    if mask.len() != PIXELS {
        return Err(Error::contract(format!(
            "{what} needs {PIXELS} values, got {}",
            mask.len()
        )));
    }
    Ok(())
}

/// `{normalized heatmap > tau} ∩ roi`.
pub fn binarize(heatmap: &Heatmap, roi: Option<&[bool]>, tau: f64) -> Result<Vec<bool>> {
    if let Some(r) = roi {
        check_mask(r, "ROI mask")?;
    }
    Ok(heatmap
        .normalized()
        .iter()
        .enumerate()
        .map(|(i, &v)| v > tau && roi.is_none_or(|r| r[i]))
        .collect())
}

/// 8-connected components of a 64×64 mask, each a list of pixel indices in
/// scan order. Components are listed in order of their first pixel.
pub fn components(mask: &[bool]) -> Vec<Vec<usize>> {
    let n = IMAGE_SIZE as isize;
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (r, c) = ((p / IMAGE_SIZE) as isize, (p % IMAGE_SIZE) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= n || cc >= n {
                        continue;
                    }
                    let q = (rr * n + cc) as usize;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Components of the thresholded heatmap with at least `min_area` pixels,
/// largest first, ties broken by `(row_min, col_min)`.
pub fn detect(
    heatmap: &Heatmap,
    roi: Option<&[bool]>,
    tau: f64,
    min_area: usize,
) -> Result<Vec<Detection>> {
    let binary = binarize(heatmap, roi, tau)?;
    let norm = heatmap.normalized();
    let mut found: Vec<Detection> = components(&binary)
        .into_iter()
        .filter(|c| c.len() >= min_area)
        .map(|c| {
            let rows = c.iter().map(|p| p / IMAGE_SIZE);
            let cols = c.iter().map(|p| p % IMAGE_SIZE);
            let bbox = BoundingBox {
                row_min: rows.clone().min().expect("nonempty"),
                row_max: rows.max().expect("nonempty"),
                col_min: cols.clone().min().expect("nonempty"),
                col_max: cols.max().expect("nonempty"),
            };
            Detection {
                id: 0,
                pixel_count: c.len(),
                bbox,
                mean_value: c.iter().map(|&p| norm[p]).sum::<f64>() / c.len() as f64,
            }
        })
        .collect();
    found.sort_by(|a, b| {
        b.pixel_count
            .cmp(&a.pixel_count)
            .then((a.bbox.row_min, a.bbox.col_min).cmp(&(b.bbox.row_min, b.bbox.col_min)))
    });
    for (i, d) in found.iter_mut().enumerate() {
        d.id = i;
    }
    Ok(found)
}

/// Severity class of a predicted fraction; a positive call never maps to CT-0.
pub fn severity_for(predicted: Label, fraction: f64) -> Severity {
    match predicted {
        Label::Negative => Severity::Ct0,
        Label::Positive => match Severity::from_ggo_fraction(fraction) {
            Severity::Ct0 => Severity::Ct1,
            s => s,
        },
    }
}

pub fn estimate_severity(
    heatmap: &Heatmap,
    lung_mask: &[bool],
    predicted: Label,
    tau: f64,
) -> Result<SeverityEstimate> {
    check_mask(lung_mask, "lung mask")?;
    let lung = lung_mask.iter().filter(|&&b| b).count();
    if lung == 0 {
        return Err(Error::contract("lung mask is empty"));
    }
    let hit = binarize(heatmap, Some(lung_mask), tau)?
        .iter()
        .filter(|&&b| b)
        .count();
    let fraction = hit as f64 / lung as f64;
    Ok(SeverityEstimate {
        ggo_fraction_pred: fraction,
        severity_pred: severity_for(predicted, fraction),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub id: String,
    pub method: Method,
    pub tau: f64,
    pub min_area: usize,
    pub detections: Vec<Detection>,
    pub ggo_fraction_pred: f64,
    pub severity_pred: Severity,
}
