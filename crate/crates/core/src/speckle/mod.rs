//! Synthetic multiplicative speckle and the analytic statistics of its
//! log-domain noise.
//!
//! The noise model is per-pixel multiplication by independent
//! Gamma(L, 1/L) draws (unit mean, variance 1/L), applied to strictly
//! positive amplitude. Log-Gamma moments come from polygamma identities and
//! serve as oracles for the transform-fitting pipeline.

pub mod polygamma;

use crate::error::{Error, Result};
use crate::gridmath::rng::RandomStream;
use crate::gridmath::{Domain, Grid2};
use polygamma::polygamma;

const STREAM_SPECKLE: u64 = 0x53_50_43_4b; // "SPCK"
const STREAM_TARGETS: u64 = 0x54_47_54_53; // "TGTS"

/// Speckle generation parameters.
#[derive(Debug, Clone, Copy)]
pub struct SpeckleConfig {
    /// Number of looks; L = 1 is single-look (exponential intensity) speckle.
    pub looks: f64,
    pub seed: u64,
}

impl SpeckleConfig {
    pub fn new(looks: f64, seed: u64) -> Result<Self> {
        if !(looks >= 0.5) {
            return Err(Error::Param(format!("looks must be >= 0.5, got {looks}")));
        }
        Ok(Self { looks, seed })
    }
}

/// Analytic moments of log nu for nu ~ Gamma(L, 1/L).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogGammaMoments {
    /// psi(L) - log L; negative for all finite L.
    pub mean: f64,
    /// psi'(L)
    pub variance: f64,
    /// psi''(L) / psi'(L)^(3/2); negative (left tail).
    pub skewness: f64,
    /// psi'''(L) / psi'(L)^2
    pub excess_kurtosis: f64,
}

/// Moments of the log-domain speckle noise, from polygamma identities.
pub fn log_gamma_moments(looks: f64) -> Result<LogGammaMoments> {
    if !(looks >= 0.5) {
        return Err(Error::Param(format!("looks must be >= 0.5, got {looks}")));
    }
    let psi1 = polygamma(1, looks)?;
    Ok(LogGammaMoments {
        mean: polygamma(0, looks)? - looks.ln(),
        variance: psi1,
        skewness: polygamma(2, looks)? / psi1.powf(1.5),
        excess_kurtosis: polygamma(3, looks)? / (psi1 * psi1),
    })
}

/// Multiply a clean amplitude raster by independent Gamma(L, 1/L) speckle.
///
/// Noise draws come from one derived stream per image row, so row-parallel
/// and serial generation agree bit-exactly.
pub fn apply_speckle(clean: &Grid2, cfg: &SpeckleConfig) -> Result<Grid2> {
    clean.require_domain(Domain::Amplitude, "apply_speckle")?;
    if let Some(v) = clean.as_slice().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Domain(format!(
            "non-positive amplitude {v} in clean input"
        )));
    }
    let base = RandomStream::new(cfg.seed, STREAM_SPECKLE);
    let dist = base.gamma_dist(cfg.looks, 1.0 / cfg.looks)?;
    let (h, w) = (clean.height(), clean.width());
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        let mut stream = base.derive(row as u64);
        let src = clean.row(row);
        for (dst, &c) in out[row * w..(row + 1) * w].iter_mut().zip(src) {
            *dst = c * stream.next_gamma(&dist);
        }
    }
    Grid2::new(h, w, Domain::Amplitude, out)
}

/// Synthetic clean-target families for desk-scale experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Four constant quadrants with seeded levels; quadrant boundaries sit at
    /// the exact midpoints so patch-aligned metrics see pure regions.
    PiecewiseConstant,
    /// Rows strictly increasing left to right.
    Gradient,
    /// Two alternating constant levels in square cells.
    Checkerboard,
}

/// A generated target plus the bounding box of its largest constant region
/// (row, col, height, width), when one exists.
#[derive(Debug, Clone)]
pub struct SyntheticTarget {
    pub image: Grid2,
    pub largest_constant_region: Option<(usize, usize, usize, usize)>,
}

pub fn make_synthetic_targets(
    kind: SyntheticKind,
    size: usize,
    seed: u64,
) -> Result<SyntheticTarget> {
    if size < 32 {
        return Err(Error::Param(format!("target size must be >= 32, got {size}")));
    }
    let mut stream = RandomStream::new(seed, STREAM_TARGETS);
    // All generators keep values >= 1 so downstream log transforms are safe.
    let level = |s: &mut RandomStream| 40.0 + 160.0 * s.next_f64();
    match kind {
        SyntheticKind::PiecewiseConstant => {
            let half = size / 2;
            let values = [
                level(&mut stream),
                level(&mut stream),
                level(&mut stream),
                level(&mut stream),
            ];
            let mut data = vec![0.0; size * size];
            for r in 0..size {
                for c in 0..size {
                    let q = (r >= half) as usize * 2 + (c >= half) as usize;
                    data[r * size + c] = values[q];
                }
            }
            // Quadrant rects in row-major order; largest area wins, first on ties.
            let rects = [
                (0, 0, half, half),
                (0, half, half, size - half),
                (half, 0, size - half, half),
                (half, half, size - half, size - half),
            ];
            let largest = *rects
                .iter()
                .max_by_key(|(_, _, h, w)| h * w)
                .expect("non-empty");
            Ok(SyntheticTarget {
                image: Grid2::new(size, size, Domain::Amplitude, data)?,
                largest_constant_region: Some(largest),
            })
        }
        SyntheticKind::Gradient => {
            let slope = 0.5 + stream.next_f64();
            let mut data = vec![0.0; size * size];
            for r in 0..size {
                for c in 0..size {
                    data[r * size + c] = 1.0 + r as f64 * 0.25 + (c as f64 + 1.0) * slope;
                }
            }
            Ok(SyntheticTarget {
                image: Grid2::new(size, size, Domain::Amplitude, data)?,
                largest_constant_region: None,
            })
        }
        SyntheticKind::Checkerboard => {
            let cell = (size / 8).max(4);
            let lo = level(&mut stream);
            let hi = lo + 40.0 + 120.0 * stream.next_f64();
            let mut data = vec![0.0; size * size];
            for r in 0..size {
                for c in 0..size {
                    let parity = (r / cell + c / cell) % 2;
                    data[r * size + c] = if parity == 0 { lo } else { hi };
                }
            }
            Ok(SyntheticTarget {
                image: Grid2::new(size, size, Domain::Amplitude, data)?,
                largest_constant_region: Some((0, 0, cell, cell)),
            })
        }
    }
}
