//! Moment estimators and image-quality metrics: sample skewness/kurtosis,
//! equivalent number of looks over automatically selected homogeneous
//! regions, and full-reference MSE/PSNR for synthetic experiments.

use std::fmt;

use crate::error::{Error, Result};
use crate::gridmath::Grid2;

/// A metric value that may be the degenerate "no fluctuation" case
/// (zero variance for ENL, zero MSE for PSNR). Kept distinct from float
/// infinity so reports stay serializable and comparisons explicit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricValue {
    Finite(f64),
    Infinite,
}

impl MetricValue {
    pub fn finite(&self) -> Option<f64> {
        match self {
            MetricValue::Finite(v) => Some(*v),
            MetricValue::Infinite => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, MetricValue::Infinite)
    }
}

impl fmt::Display for MetricValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricValue::Finite(v) => write!(f, "{v:.6}"),
            MetricValue::Infinite => write!(f, "inf"),
        }
    }
}

/// Biased (moment) sample skewness and excess kurtosis:
/// m3 / m2^(3/2) and m4 / m2^2 - 3.
pub fn sample_skew_kurt(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < 4 {
        return Err(Error::Param(format!(
            "skewness/kurtosis need at least 4 samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mut m = 0.0;
    for &v in samples {
        m += v;
    }
    m /= n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in samples {
        let d = v - m;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if !(m2 > 0.0) {
        return Err(Error::Numeric("zero variance sample".into()));
    }
    Ok((m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0))
}

/// ENL report over automatically selected homogeneous regions.
#[derive(Debug, Clone, PartialEq)]
pub struct EnlReport {
    pub patch_size: usize,
    /// (row, col, size) of each selected ROI, in selection order.
    pub rois: Vec<(usize, usize, usize)>,
    pub per_roi_enl: Vec<MetricValue>,
    /// Arithmetic mean of the finite per-ROI values; infinite when every
    /// selected ROI is degenerate.
    pub mean_enl: MetricValue,
    pub warnings: Vec<String>,
}

impl EnlReport {
    /// Human-readable rendering: one `roi r c size enl` line per ROI and a
    /// final `mean_enl` line.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        for ((r, c, size), enl) in self.rois.iter().zip(&self.per_roi_enl) {
            s.push_str(&format!("roi {r} {c} {size} {enl}\n"));
        }
        s.push_str(&format!("mean_enl {}\n", self.mean_enl));
        s
    }

    /// Machine-readable `key = value` rendering of the same fields.
    pub fn render_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("patch_size = {}\n", self.patch_size));
        for (i, ((r, c, size), enl)) in self.rois.iter().zip(&self.per_roi_enl).enumerate() {
            s.push_str(&format!("roi_{i} = {r} {c} {size} {enl}\n"));
        }
        s.push_str(&format!("mean_enl = {}\n", self.mean_enl));
        for w in &self.warnings {
            s.push_str(&format!("warning = {w}\n"));
        }
        s
    }
}

/// Equivalent number of looks: tile the image into non-overlapping
/// `patch_size` patches anchored at (0,0) (remainder rows/columns dropped),
/// select the `n_rois` lowest-variance patches, and report (mean/std)^2 per
/// ROI. Ties in patch variance break toward the lower row-major patch index.
pub fn enl(image: &Grid2, patch_size: usize, n_rois: usize) -> Result<EnlReport> {
    if patch_size == 0 {
        return Err(Error::Param("patch_size must be positive".into()));
    }
    if n_rois == 0 {
        return Err(Error::Param("n_rois must be positive".into()));
    }
    if image.height() < patch_size || image.width() < patch_size {
        return Err(Error::Domain(format!(
            "image {}x{} smaller than patch size {patch_size}",
            image.height(),
            image.width()
        )));
    }
    let rows = image.height() / patch_size;
    let cols = image.width() / patch_size;
    let total = rows * cols;
    if n_rois > total {
        return Err(Error::Domain(format!(
            "requested {n_rois} ROIs but the patch grid has only {total}"
        )));
    }

    // Per-patch mean and population variance, fixed accumulation order.
    let mut stats = Vec::with_capacity(total);
    for pr in 0..rows {
        for pc in 0..cols {
            let mut sum = 0.0;
            for y in 0..patch_size {
                let row = image.row(pr * patch_size + y);
                for &v in &row[pc * patch_size..(pc + 1) * patch_size] {
                    sum += v;
                }
            }
            let n = (patch_size * patch_size) as f64;
            let mean = sum / n;
            let mut var = 0.0;
            for y in 0..patch_size {
                let row = image.row(pr * patch_size + y);
                for &v in &row[pc * patch_size..(pc + 1) * patch_size] {
                    let d = v - mean;
                    var += d * d;
                }
            }
            var /= n;
            stats.push((mean, var));
        }
    }

    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| stats[a].1.total_cmp(&stats[b].1).then(a.cmp(&b)));

    let mut rois = Vec::with_capacity(n_rois);
    let mut per_roi = Vec::with_capacity(n_rois);
    let mut warnings = Vec::new();
    let mut finite_sum = 0.0;
    let mut finite_count = 0usize;
    for &idx in order.iter().take(n_rois) {
        let (pr, pc) = (idx / cols, idx % cols);
        let (mean, var) = stats[idx];
        rois.push((pr * patch_size, pc * patch_size, patch_size));
        if var > 0.0 {
            let v = mean * mean / var;
            per_roi.push(MetricValue::Finite(v));
            finite_sum += v;
            finite_count += 1;
        } else {
            per_roi.push(MetricValue::Infinite);
            warnings.push(format!(
                "roi at ({}, {}) has zero variance; excluded from mean",
                pr * patch_size,
                pc * patch_size
            ));
        }
    }
    let mean_enl = if finite_count > 0 {
        MetricValue::Finite(finite_sum / finite_count as f64)
    } else {
        MetricValue::Infinite
    };
    Ok(EnlReport { patch_size, rois, per_roi_enl: per_roi, mean_enl, warnings })
}

/// Mean squared error and peak signal-to-noise ratio in dB.
pub fn mse_psnr(a: &Grid2, b: &Grid2, peak: f64) -> Result<(f64, MetricValue)> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "mse_psnr shapes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    if !(peak > 0.0) {
        return Err(Error::Param(format!("peak must be positive, got {peak}")));
    }
    let mut acc = 0.0;
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        let d = x - y;
        acc += d * d;
    }
    let mse = acc / a.as_slice().len() as f64;
    let psnr = if mse > 0.0 {
        MetricValue::Finite(10.0 * (peak * peak / mse).log10())
    } else {
        MetricValue::Infinite
    };
    Ok((mse, psnr))
}
