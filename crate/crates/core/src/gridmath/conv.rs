//! 2-D convolution (stride 1, zero padding, odd kernels) with exact analytic
//! backward passes.
//!
//! The 3x3 case carries hand-tuned kernels dispatched at runtime over
//! AVX-512/AVX2/scalar tiers; all tiers use `mul_add` and the same loop
//! nest, so results are identical across tiers and bit-identical across
//! reruns. General odd kernel sizes fall back to a plain trimmed-row path.
//!
//! Accumulation order per output element is fixed: input channel, then
//! kernel row, then kernel column.

use std::sync::OnceLock;

use super::Tensor4;
use crate::error::{Error, Result};

/// Gradients returned by [`conv2d_backward`].
#[derive(Debug)]
pub struct ConvGrads {
    pub grad_input: Option<Tensor4>,
    pub grad_kernel: Tensor4,
    pub grad_bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SimdTier {
    Avx512,
    Avx2,
    Scalar,
}

fn tier() -> SimdTier {
    static TIER: OnceLock<SimdTier> = OnceLock::new();
    *TIER.get_or_init(detect_tier)
}

#[cfg(target_arch = "x86_64")]
fn detect_tier() -> SimdTier {
    if is_x86_feature_detected!("avx512f") && is_x86_feature_detected!("fma") {
        SimdTier::Avx512
    } else if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
        SimdTier::Avx2
    } else {
        SimdTier::Scalar
    }
}

#[cfg(not(target_arch = "x86_64"))]
fn detect_tier() -> SimdTier {
    SimdTier::Scalar
}

fn check_forward_shapes(input: &Tensor4, kernel: &Tensor4, bias: &[f64]) -> Result<()> {
    let [_, in_ch, _, _] = input.shape();
    let [out_ch, k_in, kh, kw] = kernel.shape();
    if k_in != in_ch {
        return Err(Error::Shape(format!(
            "kernel expects {k_in} input channels, input has {in_ch}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 || kh == 0 || kw == 0 {
        return Err(Error::Shape(format!("kernel dims must be odd, got {kh}x{kw}")));
    }
    if bias.len() != out_ch {
        return Err(Error::Shape(format!(
            "bias length {} does not match {out_ch} output channels",
            bias.len()
        )));
    }
    Ok(())
}

/// Convolve `input` (B, Cin, H, W) with `kernel` (Cout, Cin, kh, kw).
///
/// Spatial dims are preserved (zero padding of (kh-1)/2, (kw-1)/2, stride 1).
pub fn conv2d(input: &Tensor4, kernel: &Tensor4, bias: &[f64]) -> Result<Tensor4> {
    check_forward_shapes(input, kernel, bias)?;
    let [batch, in_ch, h, w] = input.shape();
    let [out_ch, _, kh, kw] = kernel.shape();
    let mut out = Tensor4::zeros([batch, out_ch, h, w]);

    if (kh, kw) == (3, 3) {
        let (ph, pw) = (h + 2, w + 2);
        let mut padded = vec![0.0; in_ch * ph * pw];
        let mut acc = vec![0.0; 4 * w];
        for b in 0..batch {
            for c in 0..in_ch {
                pad_plane3(input.plane(b, c), h, w, &mut padded[c * ph * pw..(c + 1) * ph * pw]);
            }
            let out_item = item_planes_mut(&mut out, b, out_ch, h * w);
            fwd3(&padded, kernel.as_slice(), bias, out_item, in_ch, out_ch, h, w, &mut acc);
        }
    } else {
        for b in 0..batch {
            for oc in 0..out_ch {
                out.plane_mut(b, oc).fill(bias[oc]);
            }
            let out_item = item_planes_mut(&mut out, b, out_ch, h * w);
            let in_item = input.plane(b, 0).as_ptr();
            // Planes of one batch item are contiguous.
            let in_item = unsafe { std::slice::from_raw_parts(in_item, in_ch * h * w) };
            generic_fwd(in_item, kernel.as_slice(), out_item, in_ch, out_ch, h, w, kh, kw);
        }
    }
    Ok(out)
}

/// Analytic gradients of the forward map.
///
/// `grad_input` is skipped when `need_grad_input` is false (first layer of a
/// network does not propagate further).
pub fn conv2d_backward(
    input: &Tensor4,
    kernel: &Tensor4,
    grad_out: &Tensor4,
    need_grad_input: bool,
) -> Result<ConvGrads> {
    let [batch, in_ch, h, w] = input.shape();
    let [out_ch, _, kh, kw] = kernel.shape();
    check_forward_shapes(input, kernel, &vec![0.0; out_ch])?;
    if grad_out.shape() != [batch, out_ch, h, w] {
        return Err(Error::Shape(format!(
            "grad_out shape {:?} does not match forward output {:?}",
            grad_out.shape(),
            [batch, out_ch, h, w]
        )));
    }

    let mut grad_kernel = Tensor4::zeros([out_ch, in_ch, kh, kw]);
    let mut grad_bias = vec![0.0; out_ch];
    for oc in 0..out_ch {
        let mut acc = 0.0;
        for b in 0..batch {
            for &g in grad_out.plane(b, oc) {
                acc += g;
            }
        }
        grad_bias[oc] = acc;
    }

    let mut grad_input = need_grad_input.then(|| Tensor4::zeros([batch, in_ch, h, w]));

    if (kh, kw) == (3, 3) {
        let (ph, pw) = (h + 2, w + 2);
        let mut pad_in = vec![0.0; in_ch * ph * pw];
        let mut pad_gout = vec![0.0; out_ch * ph * pw];
        let mut acc = vec![0.0; 4 * w];
        // Flipped, channel-transposed weights: grad-input is a 3x3 conv of
        // grad_out with kernel roles swapped.
        let wflip: Vec<f64> = need_grad_input
            .then(|| {
                let mut wf = vec![0.0; in_ch * out_ch * 9];
                let ws = kernel.as_slice();
                for ic in 0..in_ch {
                    for oc in 0..out_ch {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                wf[((ic * out_ch + oc) * 3 + ky) * 3 + kx] =
                                    ws[((oc * in_ch + ic) * 3 + (2 - ky)) * 3 + (2 - kx)];
                            }
                        }
                    }
                }
                wf
            })
            .unwrap_or_default();
        let zero_bias = vec![0.0; in_ch];

        for b in 0..batch {
            for c in 0..in_ch {
                pad_plane3(input.plane(b, c), h, w, &mut pad_in[c * ph * pw..(c + 1) * ph * pw]);
            }
            let gout_item = {
                let p = grad_out.plane(b, 0).as_ptr();
                unsafe { std::slice::from_raw_parts(p, out_ch * h * w) }
            };
            gw3(&pad_in, gout_item, grad_kernel.as_mut_slice(), in_ch, out_ch, h, w);
            if let Some(gi) = grad_input.as_mut() {
                for c in 0..out_ch {
                    pad_plane3(
                        grad_out.plane(b, c),
                        h,
                        w,
                        &mut pad_gout[c * ph * pw..(c + 1) * ph * pw],
                    );
                }
                let gi_item = item_planes_mut(gi, b, in_ch, h * w);
                fwd3(&pad_gout, &wflip, &zero_bias, gi_item, out_ch, in_ch, h, w, &mut acc);
            }
        }
    } else {
        for b in 0..batch {
            let in_item = {
                let p = input.plane(b, 0).as_ptr();
                unsafe { std::slice::from_raw_parts(p, in_ch * h * w) }
            };
            let gout_item = {
                let p = grad_out.plane(b, 0).as_ptr();
                unsafe { std::slice::from_raw_parts(p, out_ch * h * w) }
            };
            generic_gw(in_item, gout_item, grad_kernel.as_mut_slice(), in_ch, out_ch, h, w, kh, kw);
            if let Some(gi) = grad_input.as_mut() {
                let gi_item = item_planes_mut(gi, b, in_ch, h * w);
                generic_gin(gout_item, kernel.as_slice(), gi_item, in_ch, out_ch, h, w, kh, kw);
            }
        }
    }

    Ok(ConvGrads { grad_input, grad_kernel, grad_bias })
}

/// All channel planes of one batch item as a single mutable slice.
fn item_planes_mut(t: &mut Tensor4, b: usize, channels: usize, plane: usize) -> &mut [f64] {
    let start = b * channels * plane;
    &mut t.as_mut_slice()[start..start + channels * plane]
}

/// Copy an h x w plane into an (h+2) x (w+2) buffer with a zero border.
fn pad_plane3(src: &[f64], h: usize, w: usize, dst: &mut [f64]) {
    let pw = w + 2;
    dst[..pw].fill(0.0);
    dst[(h + 1) * pw..].fill(0.0);
    for y in 0..h {
        let row = &mut dst[(y + 1) * pw..(y + 2) * pw];
        row[0] = 0.0;
        row[w + 1] = 0.0;
        row[1..=w].copy_from_slice(&src[y * w..(y + 1) * w]);
    }
}

// ---------------------------------------------------------------------------
// 3x3 fast path
// ---------------------------------------------------------------------------

macro_rules! dispatch {
    ($scalar:ident, $avx2:ident, $avx512:ident, ($($a:expr),*)) => {
        match tier() {
            SimdTier::Avx512 => unsafe { $avx512($($a),*) },
            SimdTier::Avx2 => unsafe { $avx2($($a),*) },
            SimdTier::Scalar => $scalar($($a),*),
        }
    };
}

#[allow(clippy::too_many_arguments)]
fn fwd3(
    inp: &[f64],
    wts: &[f64],
    bias: &[f64],
    out: &mut [f64],
    ic_n: usize,
    oc_n: usize,
    h: usize,
    w: usize,
    acc: &mut [f64],
) {
    dispatch!(fwd3_impl, fwd3_avx2, fwd3_avx512, (inp, wts, bias, out, ic_n, oc_n, h, w, acc))
}

fn gw3(inp: &[f64], gout: &[f64], gw: &mut [f64], ic_n: usize, oc_n: usize, h: usize, w: usize) {
    dispatch!(gw3_impl, gw3_avx2, gw3_avx512, (inp, gout, gw, ic_n, oc_n, h, w))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn fwd3_avx2(
    inp: &[f64], wts: &[f64], bias: &[f64], out: &mut [f64],
    ic_n: usize, oc_n: usize, h: usize, w: usize, acc: &mut [f64],
) {
    fwd3_impl(inp, wts, bias, out, ic_n, oc_n, h, w, acc)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,fma")]
unsafe fn fwd3_avx512(
    inp: &[f64], wts: &[f64], bias: &[f64], out: &mut [f64],
    ic_n: usize, oc_n: usize, h: usize, w: usize, acc: &mut [f64],
) {
    fwd3_impl(inp, wts, bias, out, ic_n, oc_n, h, w, acc)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gw3_avx2(
    inp: &[f64], gout: &[f64], gw: &mut [f64], ic_n: usize, oc_n: usize, h: usize, w: usize,
) {
    gw3_impl(inp, gout, gw, ic_n, oc_n, h, w)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,fma")]
unsafe fn gw3_avx512(
    inp: &[f64], gout: &[f64], gw: &mut [f64], ic_n: usize, oc_n: usize, h: usize, w: usize,
) {
    gw3_impl(inp, gout, gw, ic_n, oc_n, h, w)
}

#[cfg(not(target_arch = "x86_64"))]
unsafe fn fwd3_avx2(
    inp: &[f64], wts: &[f64], bias: &[f64], out: &mut [f64],
    ic_n: usize, oc_n: usize, h: usize, w: usize, acc: &mut [f64],
) {
    fwd3_impl(inp, wts, bias, out, ic_n, oc_n, h, w, acc)
}

#[cfg(not(target_arch = "x86_64"))]
unsafe fn fwd3_avx512(
    inp: &[f64], wts: &[f64], bias: &[f64], out: &mut [f64],
    ic_n: usize, oc_n: usize, h: usize, w: usize, acc: &mut [f64],
) {
    fwd3_impl(inp, wts, bias, out, ic_n, oc_n, h, w, acc)
}

#[cfg(not(target_arch = "x86_64"))]
unsafe fn gw3_avx2(
    inp: &[f64], gout: &[f64], gw: &mut [f64], ic_n: usize, oc_n: usize, h: usize, w: usize,
) {
    gw3_impl(inp, gout, gw, ic_n, oc_n, h, w)
}

#[cfg(not(target_arch = "x86_64"))]
unsafe fn gw3_avx512(
    inp: &[f64], gout: &[f64], gw: &mut [f64], ic_n: usize, oc_n: usize, h: usize, w: usize,
) {
    gw3_impl(inp, gout, gw, ic_n, oc_n, h, w)
}

/// Forward 3x3 over padded planar input; blocks of 4 output channels share
/// the shifted input-row loads via an L1-resident row accumulator.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn fwd3_impl(
    inp: &[f64],
    wts: &[f64],
    bias: &[f64],
    out: &mut [f64],
    ic_n: usize,
    oc_n: usize,
    h: usize,
    w: usize,
    acc: &mut [f64],
) {
    let (ph, pw) = (h + 2, w + 2);
    debug_assert!(inp.len() >= ic_n * ph * pw);
    debug_assert!(acc.len() >= 4 * w);
    for y in 0..h {
        let mut oc0 = 0;
        while oc0 < oc_n {
            let blk = (oc_n - oc0).min(4);
            for j in 0..blk {
                acc[j * w..(j + 1) * w].fill(bias[oc0 + j]);
            }
            for ic in 0..ic_n {
                for ky in 0..3 {
                    let irow = &inp[(ic * ph + y + ky) * pw..(ic * ph + y + ky + 1) * pw];
                    if blk == 4 {
                        let mut w0 = [0.0; 4];
                        let mut w1 = [0.0; 4];
                        let mut w2 = [0.0; 4];
                        for j in 0..4 {
                            let base = ((oc0 + j) * ic_n + ic) * 9 + ky * 3;
                            w0[j] = wts[base];
                            w1[j] = wts[base + 1];
                            w2[j] = wts[base + 2];
                        }
                        for x in 0..w {
                            let i0 = irow[x];
                            let i1 = irow[x + 1];
                            let i2 = irow[x + 2];
                            for j in 0..4 {
                                let mut a = acc[j * w + x];
                                a = i0.mul_add(w0[j], a);
                                a = i1.mul_add(w1[j], a);
                                a = i2.mul_add(w2[j], a);
                                acc[j * w + x] = a;
                            }
                        }
                    } else {
                        for j in 0..blk {
                            let base = ((oc0 + j) * ic_n + ic) * 9 + ky * 3;
                            let w0 = wts[base];
                            let w1 = wts[base + 1];
                            let w2 = wts[base + 2];
                            let arow = &mut acc[j * w..(j + 1) * w];
                            for (x, a) in arow.iter_mut().enumerate() {
                                let mut v = *a;
                                v = irow[x].mul_add(w0, v);
                                v = irow[x + 1].mul_add(w1, v);
                                v = irow[x + 2].mul_add(w2, v);
                                *a = v;
                            }
                        }
                    }
                }
            }
            for j in 0..blk {
                let dst = ((oc0 + j) * h + y) * w;
                out[dst..dst + w].copy_from_slice(&acc[j * w..(j + 1) * w]);
            }
            oc0 += blk;
        }
    }
}

/// Weight gradient for the 3x3 path. Sums over pixels with eight interleaved
/// partial accumulators per tap (lane = x mod 8), reduced in a fixed tree.
#[inline(always)]
fn gw3_impl(
    inp: &[f64],
    gout: &[f64],
    gw: &mut [f64],
    ic_n: usize,
    oc_n: usize,
    h: usize,
    w: usize,
) {
    let (ph, pw) = (h + 2, w + 2);
    let w8 = w - w % 8;
    for ic in 0..ic_n {
        let mut oc0 = 0;
        while oc0 < oc_n {
            let blk = (oc_n - oc0).min(4);
            for ky in 0..3 {
                let mut acc = [[[0.0f64; 8]; 3]; 4];
                for y in 0..h {
                    let irow = &inp[(ic * ph + y + ky) * pw..(ic * ph + y + ky + 1) * pw];
                    for j in 0..blk {
                        let grow = &gout[((oc0 + j) * h + y) * w..((oc0 + j) * h + y + 1) * w];
                        let aj = &mut acc[j];
                        let mut x = 0;
                        while x < w8 {
                            let g = &grow[x..x + 8];
                            let iv = &irow[x..x + 10];
                            for l in 0..8 {
                                let gl = g[l];
                                aj[0][l] = gl.mul_add(iv[l], aj[0][l]);
                                aj[1][l] = gl.mul_add(iv[l + 1], aj[1][l]);
                                aj[2][l] = gl.mul_add(iv[l + 2], aj[2][l]);
                            }
                            x += 8;
                        }
                        for x in w8..w {
                            let gl = grow[x];
                            let lane = x & 7;
                            aj[0][lane] = gl.mul_add(irow[x], aj[0][lane]);
                            aj[1][lane] = gl.mul_add(irow[x + 1], aj[1][lane]);
                            aj[2][lane] = gl.mul_add(irow[x + 2], aj[2][lane]);
                        }
                    }
                }
                for j in 0..blk {
                    let base = ((oc0 + j) * ic_n + ic) * 9 + ky * 3;
                    for kx in 0..3 {
                        gw[base + kx] += reduce8(&acc[j][kx]);
                    }
                }
            }
            oc0 += blk;
        }
    }
}

#[inline(always)]
fn reduce8(v: &[f64; 8]) -> f64 {
    ((v[0] + v[4]) + (v[2] + v[6])) + ((v[1] + v[5]) + (v[3] + v[7]))
}

// ---------------------------------------------------------------------------
// Generic odd-kernel path
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn generic_fwd(
    inp: &[f64],
    wts: &[f64],
    out: &mut [f64],
    ic_n: usize,
    oc_n: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) {
    let (py, px) = ((kh - 1) / 2, (kw - 1) / 2);
    for oc in 0..oc_n {
        for ic in 0..ic_n {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wts[((oc * ic_n + ic) * kh + ky) * kw + kx];
                    let dy = ky as isize - py as isize;
                    let dx = kx as isize - px as isize;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let ix = (x0 as isize + dx) as usize;
                        let orow = &mut out[(oc * h + y) * w + x0..(oc * h + y) * w + x1];
                        let irow = &inp[(ic * h + iy) * w + ix..(ic * h + iy) * w + ix + (x1 - x0)];
                        for (o, &i) in orow.iter_mut().zip(irow) {
                            *o = i.mul_add(wv, *o);
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn generic_gin(
    gout: &[f64],
    wts: &[f64],
    gin: &mut [f64],
    ic_n: usize,
    oc_n: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) {
    let (py, px) = ((kh - 1) / 2, (kw - 1) / 2);
    for ic in 0..ic_n {
        for oc in 0..oc_n {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wts[((oc * ic_n + ic) * kh + ky) * kw + kx];
                    let dy = ky as isize - py as isize;
                    let dx = kx as isize - px as isize;
                    // gin[y][x] += w * gout[y - dy][x - dx]
                    let y0 = dy.max(0) as usize;
                    let y1 = ((h as isize + dy).min(h as isize)).max(0) as usize;
                    let x0 = dx.max(0) as usize;
                    let x1 = ((w as isize + dx).min(w as isize)).max(0) as usize;
                    for y in y0..y1 {
                        let gy = (y as isize - dy) as usize;
                        let gx = (x0 as isize - dx) as usize;
                        let grow =
                            &gout[(oc * h + gy) * w + gx..(oc * h + gy) * w + gx + (x1 - x0)];
                        let irow = &mut gin[(ic * h + y) * w + x0..(ic * h + y) * w + x1];
                        for (o, &g) in irow.iter_mut().zip(grow) {
                            *o = g.mul_add(wv, *o);
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn generic_gw(
    inp: &[f64],
    gout: &[f64],
    gw: &mut [f64],
    ic_n: usize,
    oc_n: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) {
    let (py, px) = ((kh - 1) / 2, (kw - 1) / 2);
    for oc in 0..oc_n {
        for ic in 0..ic_n {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dy = ky as isize - py as isize;
                    let dx = kx as isize - px as isize;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let ix = (x0 as isize + dx) as usize;
                        let grow = &gout[(oc * h + y) * w + x0..(oc * h + y) * w + x1];
                        let irow = &inp[(ic * h + iy) * w + ix..(ic * h + iy) * w + ix + (x1 - x0)];
                        for (&g, &i) in grow.iter().zip(irow) {
                            acc = g.mul_add(i, acc);
                        }
                    }
                    gw[((oc * ic_n + ic) * kh + ky) * kw + kx] += acc;
                }
            }
        }
    }
}
