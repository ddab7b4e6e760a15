//! Single-pass despeckling: transform to the z domain, one conditional
//! network pass at the data noise level, inverse transform. Large images can
//! be processed as overlapping tiles whose cores partition the image; with a
//! halo at least the network's receptive radius, tiled and whole-image
//! outputs agree away from the border.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gridmath::{Domain, Grid2, Tensor4};
use crate::lyj::{from_z_domain, to_z_domain, TransformSpec};
use crate::net::{forward, ModelParams};

/// Tiling geometry: core size and halo margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileScheme {
    pub tile: usize,
    pub halo: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

/// One tile of the plan: the output core, the in-bounds padded box, and the
/// reflect-padding compensation applied on each side (top, left, bottom,
/// right) where the halo ran past the image edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TilePiece {
    pub core: Rect,
    pub padded: Rect,
    pub pad: [usize; 4],
}

/// Partition an h x w image into tile cores and their padded boxes.
pub fn tile_plan(h: usize, w: usize, scheme: &TileScheme) -> Result<Vec<TilePiece>> {
    if scheme.tile == 0 {
        return Err(Error::Param("tile size must be positive".into()));
    }
    if h == 0 || w == 0 {
        return Err(Error::Param("image dimensions must be positive".into()));
    }
    let halo = scheme.halo;
    let mut pieces = Vec::new();
    let mut r0 = 0;
    while r0 < h {
        let ch = scheme.tile.min(h - r0);
        let mut c0 = 0;
        while c0 < w {
            let cw = scheme.tile.min(w - c0);
            let pr0 = r0.saturating_sub(halo);
            let pc0 = c0.saturating_sub(halo);
            let pr1 = (r0 + ch + halo).min(h);
            let pc1 = (c0 + cw + halo).min(w);
            let pad_top = halo - (r0 - pr0);
            let pad_left = halo - (c0 - pc0);
            let pad_bottom = halo - (pr1 - (r0 + ch));
            let pad_right = halo - (pc1 - (c0 + cw));
            pieces.push(TilePiece {
                core: Rect { row: r0, col: c0, height: ch, width: cw },
                padded: Rect { row: pr0, col: pc0, height: pr1 - pr0, width: pc1 - pc0 },
                pad: [pad_top, pad_left, pad_bottom, pad_right],
            });
            c0 += cw;
        }
        r0 += ch;
    }
    Ok(pieces)
}

/// Mirror index without edge repetition: -1 -> 1, n -> n-2.
#[inline]
fn reflect101(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    debug_assert!(i >= 0 && i < n);
    i as usize
}

/// Despeckle an amplitude raster.
///
/// `scheme: None` runs the whole image in one network pass; otherwise tiles
/// are processed independently (reflect padding at image borders) and only
/// their cores are kept. The network is conditioned on the transform's
/// fitted `sigma_data`.
pub fn despeckle(
    x: &Grid2,
    params: &ModelParams,
    spec: &TransformSpec,
    scheme: Option<&TileScheme>,
) -> Result<Grid2> {
    let (h, w) = (x.height(), x.width());
    let z = to_z_domain(x, spec)?;
    let z_hat = match scheme {
        None => run_network(params, z.as_slice(), h, w, spec.sigma_data)?,
        Some(scheme) => {
            let radius = params.arch().receptive_radius();
            if scheme.halo < radius {
                return Err(Error::Param(format!(
                    "halo {} is below the network receptive radius {radius}",
                    scheme.halo
                )));
            }
            if scheme.halo > h.min(w).saturating_sub(1) {
                return Err(Error::Domain(format!(
                    "halo {} too large for a {h}x{w} image",
                    scheme.halo
                )));
            }
            let plan = tile_plan(h, w, scheme)?;
            let outputs: Vec<(TilePiece, Vec<f64>)> = plan
                .par_iter()
                .map(|piece| run_tile(params, &z, piece, scheme.halo, spec.sigma_data)
                    .map(|core| (*piece, core)))
                .collect::<Result<_>>()?;
            let mut canvas = vec![0.0; h * w];
            for (piece, core) in outputs {
                let r = piece.core;
                for y in 0..r.height {
                    canvas[(r.row + y) * w + r.col..(r.row + y) * w + r.col + r.width]
                        .copy_from_slice(&core[y * r.width..(y + 1) * r.width]);
                }
            }
            canvas
        }
    };
    let z_grid = Grid2::new(h, w, Domain::ZDomain, z_hat)?;
    from_z_domain(&z_grid, spec)
}

fn run_network(
    params: &ModelParams,
    z: &[f64],
    h: usize,
    w: usize,
    sigma: f64,
) -> Result<Vec<f64>> {
    let t = Tensor4::new([1, 1, h, w], z.to_vec())?;
    let (out, _) = forward(params, &t, &[sigma])?;
    let mut data = out.into_data();
    data.truncate(h * w);
    Ok(data)
}

/// Run one padded tile and return its core pixels.
fn run_tile(
    params: &ModelParams,
    z: &Grid2,
    piece: &TilePiece,
    halo: usize,
    sigma: f64,
) -> Result<Vec<f64>> {
    let (h, w) = (z.height(), z.width());
    let core = piece.core;
    let th = core.height + 2 * halo;
    let tw = core.width + 2 * halo;
    let mut buf = vec![0.0; th * tw];
    for y in 0..th {
        let iy = reflect101(core.row as isize + y as isize - halo as isize, h);
        let src = z.row(iy);
        for (x, b) in buf[y * tw..(y + 1) * tw].iter_mut().enumerate() {
            let ix = reflect101(core.col as isize + x as isize - halo as isize, w);
            *b = src[ix];
        }
    }
    let out = run_network(params, &buf, th, tw, sigma)?;
    let mut coredata = Vec::with_capacity(core.height * core.width);
    for y in 0..core.height {
        let start = (y + halo) * tw + halo;
        coredata.extend_from_slice(&out[start..start + core.width]);
    }
    Ok(coredata)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmath::rng::RandomStream;
    use crate::net::{init_params, ArchSpec};

    fn test_spec() -> TransformSpec {
        TransformSpec {
            lambda_dagger: 1.3,
            noise_mean: -0.2,
            sigma_data: 0.6,
            looks: 4.0,
            mc_samples: 100_000,
            anchor_mu: 4.0,
        }
    }

    fn random_amplitude(h: usize, w: usize, seed: u64) -> Grid2 {
        let mut s = RandomStream::new(seed, 40);
        let data: Vec<f64> = (0..h * w).map(|_| 20.0 + 150.0 * s.next_f64()).collect();
        Grid2::new(h, w, Domain::Amplitude, data).unwrap()
    }

    /// Network with a non-trivial output conv so tiling is actually exercised.
    fn active_params(arch: &ArchSpec, seed: u64) -> ModelParams {
        let mut params = init_params(arch, seed).unwrap();
        let mut s = RandomStream::new(seed, 41);
        let last = arch.layer_count() - 1;
        let std = (2.0 / (arch.channels as f64 * 9.0)).sqrt();
        for v in params.weights_mut()[last].as_mut_slice() {
            *v = std * s.next_normal();
        }
        params
    }

    #[test]
    fn plan_partitions_exactly() {
        let scheme = TileScheme { tile: 64, halo: 8 };
        let plan = tile_plan(160, 160, &scheme).unwrap();
        assert_eq!(plan.len(), 9);
        let mut cover = vec![0u32; 160 * 160];
        for piece in &plan {
            let r = piece.core;
            for y in r.row..r.row + r.height {
                for x in r.col..r.col + r.width {
                    cover[y * 160 + x] += 1;
                }
            }
            // padded boxes stay inside the image
            let p = piece.padded;
            assert!(p.row + p.height <= 160 && p.col + p.width <= 160);
            // core + recorded reflect pad reconstructs the full halo
            assert_eq!(p.height + piece.pad[0] + piece.pad[2], r.height + 16);
            assert_eq!(p.width + piece.pad[1] + piece.pad[3], r.width + 16);
        }
        assert!(cover.iter().all(|&c| c == 1));
    }

    #[test]
    fn plan_single_tile_when_tile_covers_image() {
        let scheme = TileScheme { tile: 256, halo: 6 };
        let plan = tile_plan(100, 80, &scheme).unwrap();
        assert_eq!(plan.len(), 1);
        assert_eq!(plan[0].core, Rect { row: 0, col: 0, height: 100, width: 80 });
        assert_eq!(plan[0].pad, [6, 6, 6, 6]);
    }

    #[test]
    fn identity_network_roundtrips_input() {
        let arch = ArchSpec { channels: 6, depth: 2 };
        let params = init_params(&arch, 3).unwrap(); // identity at init
        let spec = test_spec();
        let x = random_amplitude(48, 40, 5);
        for scheme in [None, Some(TileScheme { tile: 16, halo: 5 })] {
            let out = despeckle(&x, &params, &spec, scheme.as_ref()).unwrap();
            for (a, b) in out.as_slice().iter().zip(x.as_slice()) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn tiled_matches_whole_image_on_interior() {
        let arch = ArchSpec { channels: 6, depth: 2 };
        let radius = arch.receptive_radius();
        let params = active_params(&arch, 7);
        let spec = test_spec();
        let x = random_amplitude(96, 96, 9);
        let whole = despeckle(&x, &params, &spec, None).unwrap();
        let tiled = despeckle(
            &x,
            &params,
            &spec,
            Some(&TileScheme { tile: 32, halo: radius }),
        )
        .unwrap();
        for y in radius..96 - radius {
            for x in radius..96 - radius {
                let a = whole.get(y, x);
                let b = tiled.get(y, x);
                assert!((a - b).abs() <= 1e-6, "({y},{x}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn output_strictly_positive() {
        let arch = ArchSpec { channels: 6, depth: 2 };
        let params = active_params(&arch, 11);
        let spec = test_spec();
        let x = random_amplitude(40, 40, 13);
        let out = despeckle(&x, &params, &spec, None).unwrap();
        assert!(out.as_slice().iter().all(|&v| v > 0.0 && v.is_finite()));
        assert_eq!(out.domain(), Domain::Amplitude);
    }

    #[test]
    fn halo_below_receptive_radius_rejected() {
        let arch = ArchSpec { channels: 4, depth: 3 };
        let params = init_params(&arch, 1).unwrap();
        let spec = test_spec();
        let x = random_amplitude(64, 64, 2);
        let err =
            despeckle(&x, &params, &spec, Some(&TileScheme { tile: 32, halo: 2 })).unwrap_err();
        assert!(err.to_string().contains("receptive radius"), "{err}");
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect101(-1, 8), 1);
        assert_eq!(reflect101(-3, 8), 3);
        assert_eq!(reflect101(0, 8), 0);
        assert_eq!(reflect101(7, 8), 7);
        assert_eq!(reflect101(8, 8), 6);
        assert_eq!(reflect101(10, 8), 4);
    }
}
