//! The conditional denoising network: a fixed residual stack of 3x3
//! convolutions with ReLU, conditioned on the noise level through a constant
//! log-sigma input channel, plus exact parameter gradients and a bit-exact
//! checkpoint format.
//!
//! Output is `z_t + branch(concat(z_t, log sigma))`; the final convolution
//! initializes to zero so an untrained network is exactly the identity.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gridmath::conv::{conv2d, conv2d_backward};
use crate::gridmath::rng::RandomStream;
use crate::gridmath::Tensor4;

const CHECKPOINT_MAGIC: &[u8; 4] = b"S4DM";
const CHECKPOINT_VERSION: u16 = 1;
const STREAM_INIT: u64 = 0x49_4e_49_54; // "INIT"

/// Architecture descriptor: `channels` wide, `depth` hidden blocks, fixed
/// 3x3 kernels, sigma conditioning via an extra constant input channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchSpec {
    pub channels: usize,
    pub depth: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self { channels: 32, depth: 4 }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.depth == 0 {
            return Err(Error::Param(format!(
                "architecture needs channels >= 1 and depth >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Pixels of context each output pixel sees; tiled inference must use a
    /// halo at least this wide.
    pub fn receptive_radius(&self) -> usize {
        self.depth + 2
    }

    /// Total number of conv layers (input + hidden + output).
    pub fn layer_count(&self) -> usize {
        self.depth + 2
    }

    fn layer_shape(&self, layer: usize) -> [usize; 4] {
        let c = self.channels;
        if layer == 0 {
            [c, 2, 3, 3]
        } else if layer <= self.depth {
            [c, c, 3, 3]
        } else {
            [1, c, 3, 3]
        }
    }

    fn layer_name(&self, layer: usize) -> String {
        if layer == 0 {
            "conv_in".to_string()
        } else if layer <= self.depth {
            format!("hidden{}", layer - 1)
        } else {
            "conv_out".to_string()
        }
    }
}

/// Named parameter tensors of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: ArchSpec,
    weights: Vec<Tensor4>,
    biases: Vec<Vec<f64>>,
}

impl ModelParams {
    pub fn arch(&self) -> ArchSpec {
        self.arch
    }

    pub fn weights(&self) -> &[Tensor4] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor4] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    /// All parameters zero; the network is exactly the identity map.
    pub fn zeros(arch: &ArchSpec) -> Result<Self> {
        arch.validate()?;
        let weights = (0..arch.layer_count())
            .map(|l| Tensor4::zeros(arch.layer_shape(l)))
            .collect();
        let biases = (0..arch.layer_count())
            .map(|l| vec![0.0; arch.layer_shape(l)[0]])
            .collect();
        Ok(Self { arch: *arch, weights, biases })
    }

    /// Total scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(Tensor4::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }
}

/// He fan-in initialization, zero biases, zero final conv (identity at init).
pub fn init_params(arch: &ArchSpec, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut params = ModelParams::zeros(arch)?;
    let mut stream = RandomStream::new(seed, STREAM_INIT);
    let last = arch.layer_count() - 1;
    for layer in 0..last {
        let shape = arch.layer_shape(layer);
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let std = (2.0 / fan_in).sqrt();
        for v in params.weights[layer].as_mut_slice() {
            *v = std * stream.next_normal();
        }
    }
    Ok(params)
}

/// Saved forward state for the paired backward call.
pub struct ForwardContext {
    /// Input tensor of each conv layer: [0] is the assembled 2-channel
    /// input, [l >= 1] the post-ReLU output of layer l-1.
    layer_inputs: Vec<Tensor4>,
}

/// Run the network on a single-channel batch, conditioning each batch
/// element on its own noise level.
pub fn forward(
    params: &ModelParams,
    z_t: &Tensor4,
    sigma_t: &[f64],
) -> Result<(Tensor4, ForwardContext)> {
    let [batch, ch, h, w] = z_t.shape();
    if ch != 1 {
        return Err(Error::Shape(format!("network input must be single-channel, got {ch}")));
    }
    if sigma_t.len() != batch {
        return Err(Error::Shape(format!(
            "{} sigma values for batch of {batch}",
            sigma_t.len()
        )));
    }
    if let Some(s) = sigma_t.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Param(format!("sigma_t must be positive, got {s}")));
    }

    // Assemble (B, 2, H, W): channel 0 the data, channel 1 log(sigma).
    let mut input = Tensor4::zeros([batch, 2, h, w]);
    for b in 0..batch {
        input.plane_mut(b, 0).copy_from_slice(z_t.plane(b, 0));
        input.plane_mut(b, 1).fill(sigma_t[b].ln());
    }

    let arch = params.arch;
    let last = arch.layer_count() - 1;
    let mut layer_inputs = Vec::with_capacity(arch.layer_count());
    let mut act = input;
    for layer in 0..=last {
        let out = conv2d(&act, &params.weights[layer], &params.biases[layer])?;
        layer_inputs.push(act);
        act = out;
        let name = arch.layer_name(layer);
        if layer < last {
            relu_inplace_checked(&mut act, &name)?;
        } else {
            check_finite(&act, &name)?;
        }
    }

    // Global residual skip.
    let mut out = act;
    for (o, &z) in out.as_mut_slice().iter_mut().zip(z_t.as_slice()) {
        *o += z;
    }
    Ok((out, ForwardContext { layer_inputs }))
}

fn relu_inplace_checked(t: &mut Tensor4, layer: &str) -> Result<()> {
    for v in t.as_mut_slice() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite activation in layer {layer}")));
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(())
}

fn check_finite(t: &Tensor4, layer: &str) -> Result<()> {
    if t.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite activation in layer {layer}")));
    }
    Ok(())
}

/// Parameter gradients aligned with [`ModelParams`] layer order.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub weights: Vec<Tensor4>,
    pub biases: Vec<Vec<f64>>,
}

/// Exact gradients of every parameter for the scalar loss whose gradient
/// w.r.t. the network output is `grad_out`. The residual skip contributes
/// nothing to parameter gradients, so `grad_out` is also the gradient at the
/// branch output.
pub fn backward(
    params: &ModelParams,
    ctx: &ForwardContext,
    grad_out: &Tensor4,
) -> Result<ParamGrads> {
    let arch = params.arch;
    let last = arch.layer_count() - 1;
    if ctx.layer_inputs.len() != arch.layer_count() {
        return Err(Error::Shape("forward context does not match architecture".into()));
    }

    let mut gw: Vec<Option<Tensor4>> = (0..arch.layer_count()).map(|_| None).collect();
    let mut gb: Vec<Option<Vec<f64>>> = (0..arch.layer_count()).map(|_| None).collect();

    let mut g = grad_out.clone();
    for layer in (0..=last).rev() {
        let grads = conv2d_backward(&ctx.layer_inputs[layer], &params.weights[layer], &g, layer > 0)?;
        gw[layer] = Some(grads.grad_kernel);
        gb[layer] = Some(grads.grad_bias);
        if layer > 0 {
            let mut gi = grads.grad_input.expect("requested grad_input");
            // ReLU mask: layer's input is the post-ReLU activation, so the
            // gate is open exactly where it is positive.
            for (gv, &a) in gi.as_mut_slice().iter_mut().zip(ctx.layer_inputs[layer].as_slice()) {
                if a <= 0.0 {
                    *gv = 0.0;
                }
            }
            g = gi;
        }
    }

    Ok(ParamGrads {
        weights: gw.into_iter().map(|t| t.expect("filled")).collect(),
        biases: gb.into_iter().map(|b| b.expect("filled")).collect(),
    })
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "S4DM", version u16, channels u32, depth u32,
// then per-tensor records (name length u32 + UTF-8 name, rank u32, dims u32
// each, payload f64 little-endian) in canonical layer order.
// ---------------------------------------------------------------------------

fn tensor_records(arch: &ArchSpec) -> Vec<(String, Vec<usize>)> {
    let mut recs = Vec::new();
    for layer in 0..arch.layer_count() {
        let name = arch.layer_name(layer);
        let shape = arch.layer_shape(layer);
        recs.push((format!("{name}.weight"), shape.to_vec()));
        recs.push((format!("{name}.bias"), vec![shape[0]]));
    }
    recs
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.arch.channels as u32).to_le_bytes());
    buf.extend_from_slice(&(params.arch.depth as u32).to_le_bytes());
    for layer in 0..params.arch.layer_count() {
        let shape = params.arch.layer_shape(layer);
        let name = params.arch.layer_name(layer);
        write_record(&mut buf, &format!("{name}.weight"), &shape, params.weights[layer].as_slice());
        write_record(&mut buf, &format!("{name}.bias"), &[shape[0]], &params.biases[layer]);
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

fn write_record(buf: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    read_exact(&mut file, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u16(&mut file)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let channels = read_u32(&mut file)? as usize;
    let depth = read_u32(&mut file)? as usize;
    let arch = ArchSpec { channels, depth };
    arch.validate().map_err(|e| Error::Format(format!("checkpoint arch invalid: {e}")))?;

    let mut params = ModelParams::zeros(&arch)?;
    for (idx, (expect_name, expect_dims)) in tensor_records(&arch).iter().enumerate() {
        let name_len = read_u32(&mut file)? as usize;
        if name_len > 4096 {
            return Err(Error::Format(format!("implausible tensor name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut file, &mut name_bytes, "tensor name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if &name != expect_name {
            return Err(Error::Format(format!(
                "tensor {idx}: expected {expect_name:?}, found {name:?}"
            )));
        }
        let rank = read_u32(&mut file)? as usize;
        if rank != expect_dims.len() {
            return Err(Error::Format(format!("tensor {name}: rank {rank} does not match arch")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut file)? as usize);
        }
        if &dims != expect_dims {
            return Err(Error::Format(format!(
                "tensor {name}: dims {dims:?} do not match arch {expect_dims:?}"
            )));
        }
        let count: usize = dims.iter().product();
        let mut payload = vec![0u8; count * 8];
        read_exact(&mut file, &mut payload, "tensor payload")?;
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let layer = idx / 2;
        if idx % 2 == 0 {
            params.weights[layer] = Tensor4::new(
                [dims[0], dims[1], dims[2], dims[3]],
                values,
            )?;
        } else {
            params.biases[layer] = values;
        }
    }
    let mut probe = [0u8; 1];
    match file.read(&mut probe)? {
        0 => Ok(params),
        _ => Err(Error::Format("trailing data after final tensor record".into())),
    }
}

fn read_exact(file: &mut std::fs::File, buf: &mut [u8], what: &str) -> Result<()> {
    file.read_exact(buf)
        .map_err(|_| Error::Format(format!("checkpoint truncated while reading {what}")))
}

fn read_u16(file: &mut std::fs::File) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(file, &mut b, "u16 field")?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(file: &mut std::fs::File) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(file, &mut b, "u32 field")?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchSpec {
        ArchSpec { channels: 6, depth: 2 }
    }

    fn random_input(shape: [usize; 4], seed: u64) -> Tensor4 {
        let mut s = RandomStream::new(seed, 90);
        Tensor4::new(shape, s.sample_normal(shape.iter().product())).unwrap()
    }

    /// Params with every layer random, including the output conv.
    fn random_params(arch: &ArchSpec, seed: u64) -> ModelParams {
        let mut params = init_params(arch, seed).unwrap();
        let mut s = RandomStream::new(seed, 91);
        let last = arch.layer_count() - 1;
        let fan_in = (arch.channels * 9) as f64;
        for v in params.weights_mut()[last].as_mut_slice() {
            *v = (2.0 / fan_in).sqrt() * s.next_normal();
        }
        params
    }

    #[test]
    fn zero_params_give_exact_identity() {
        let params = ModelParams::zeros(&small_arch()).unwrap();
        let z = random_input([2, 1, 8, 9], 1);
        let (out, _) = forward(&params, &z, &[0.5, 1.5]).unwrap();
        assert_eq!(out.as_slice(), z.as_slice());
    }

    #[test]
    fn init_is_identity_and_deterministic() {
        let arch = small_arch();
        let a = init_params(&arch, 7).unwrap();
        let b = init_params(&arch, 7).unwrap();
        assert_eq!(a, b);
        let c = init_params(&arch, 8).unwrap();
        assert_ne!(a, c);

        let z = random_input([1, 1, 12, 12], 2);
        let (out, _) = forward(&a, &z, &[0.8]).unwrap();
        assert_eq!(out.as_slice(), z.as_slice());
    }

    #[test]
    fn init_weight_scale_matches_fan_in() {
        let arch = ArchSpec { channels: 32, depth: 4 };
        let params = init_params(&arch, 3).unwrap();
        // hidden layers: fan-in = 32 * 9, expected variance 2 / fan_in
        let w = params.weights()[1].as_slice();
        let var = crate::gridmath::variance(w);
        let expected = 2.0 / (32.0 * 9.0);
        assert!(
            (var - expected).abs() <= 0.2 * expected,
            "weight variance {var} vs expected {expected}"
        );
    }

    #[test]
    fn forward_deterministic() {
        let params = random_params(&small_arch(), 4);
        let z = random_input([1, 1, 10, 10], 5);
        let (a, _) = forward(&params, &z, &[1.0]).unwrap();
        let (b, _) = forward(&params, &z, &[1.0]).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn output_local_to_receptive_field() {
        // A 64x64 crop agrees with the full 96x96 output on the crop
        // interior (margin = receptive radius).
        let arch = small_arch();
        let radius = arch.receptive_radius();
        let params = random_params(&arch, 6);
        let full = random_input([1, 1, 96, 96], 7);
        let (off_y, off_x) = (16, 16);
        let mut crop = Tensor4::zeros([1, 1, 64, 64]);
        for y in 0..64 {
            for x in 0..64 {
                *crop.at_mut(0, 0, y, x) = full.at(0, 0, y + off_y, x + off_x);
            }
        }
        let (out_full, _) = forward(&params, &full, &[0.7]).unwrap();
        let (out_crop, _) = forward(&params, &crop, &[0.7]).unwrap();
        for y in radius..64 - radius {
            for x in radius..64 - radius {
                let a = out_crop.at(0, 0, y, x);
                let b = out_full.at(0, 0, y + off_y, x + off_x);
                assert!((a - b).abs() <= 1e-9, "({y},{x}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn conditioning_flows_only_through_sigma_channel() {
        let arch = small_arch();
        let mut params = random_params(&arch, 8);
        let z = random_input([1, 1, 10, 10], 9);
        let (a, _) = forward(&params, &z, &[0.3]).unwrap();
        let (b, _) = forward(&params, &z, &[2.9]).unwrap();
        assert_ne!(a.as_slice(), b.as_slice(), "sigma should matter before zeroing");

        // Zero the input conv weights that read channel 1.
        let w = &mut params.weights_mut()[0];
        let [oc, _, kh, kw] = w.shape();
        for o in 0..oc {
            for ky in 0..kh {
                for kx in 0..kw {
                    *w.at_mut(o, 1, ky, kx) = 0.0;
                }
            }
        }
        let (a, _) = forward(&params, &z, &[0.3]).unwrap();
        let (b, _) = forward(&params, &z, &[2.9]).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn forward_validates_inputs() {
        let params = ModelParams::zeros(&small_arch()).unwrap();
        let z = random_input([1, 1, 8, 8], 10);
        assert!(forward(&params, &z, &[0.0]).is_err());
        assert!(forward(&params, &z, &[1.0, 1.0]).is_err());
        let z2 = random_input([1, 2, 8, 8], 11);
        assert!(forward(&params, &z2, &[1.0]).is_err());
    }

    #[test]
    fn zero_upstream_gradient_zeroes_parameters() {
        let params = random_params(&small_arch(), 12);
        let z = random_input([2, 1, 8, 8], 13);
        let (_, ctx) = forward(&params, &z, &[0.5, 0.9]).unwrap();
        let grads = backward(&params, &ctx, &Tensor4::zeros([2, 1, 8, 8])).unwrap();
        for g in &grads.weights {
            assert!(g.as_slice().iter().all(|&v| v == 0.0));
        }
        for b in &grads.biases {
            assert!(b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gradients_linear_in_upstream() {
        let params = random_params(&small_arch(), 14);
        let z = random_input([1, 1, 9, 7], 15);
        let (_, ctx) = forward(&params, &z, &[1.1]).unwrap();
        let g1 = random_input([1, 1, 9, 7], 16);
        let g2 = Tensor4::new(g1.shape(), g1.as_slice().iter().map(|v| 2.0 * v).collect()).unwrap();
        let a = backward(&params, &ctx, &g1).unwrap();
        let b = backward(&params, &ctx, &g2).unwrap();
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            for (x, y) in wa.as_slice().iter().zip(wb.as_slice()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let arch = small_arch();
        let params = random_params(&arch, 17);
        let z = random_input([2, 1, 8, 7], 18);
        let sigmas = [0.6, 1.4];
        let cograd = random_input([2, 1, 8, 7], 19);
        let loss = |p: &ModelParams| -> f64 {
            let (out, _) = forward(p, &z, &sigmas).unwrap();
            out.as_slice().iter().zip(cograd.as_slice()).map(|(o, g)| o * g).sum()
        };
        let (_, ctx) = forward(&params, &z, &sigmas).unwrap();
        let grads = backward(&params, &ctx, &cograd).unwrap();

        const EPS: f64 = 1e-5;
        let mut stream = RandomStream::new(20, 0);
        let mut checked = 0;
        while checked < 40 {
            let layer = stream.next_below(arch.layer_count());
            let idx = stream.next_below(params.weights()[layer].len());
            let mut pp = params.clone();
            let mut pm = params.clone();
            pp.weights_mut()[layer].as_mut_slice()[idx] += EPS;
            pm.weights_mut()[layer].as_mut_slice()[idx] -= EPS;
            let num = (loss(&pp) - loss(&pm)) / (2.0 * EPS);
            let ana = grads.weights[layer].as_slice()[idx];
            let rel = (num - ana).abs() / (num.abs() + ana.abs()).max(1e-8);
            assert!(rel <= 1e-4, "layer {layer} weight {idx}: fd {num} vs {ana}");
            checked += 1;
        }
        for layer in 0..arch.layer_count() {
            for idx in 0..params.biases()[layer].len() {
                let mut pp = params.clone();
                let mut pm = params.clone();
                pp.biases_mut()[layer][idx] += EPS;
                pm.biases_mut()[layer][idx] -= EPS;
                let num = (loss(&pp) - loss(&pm)) / (2.0 * EPS);
                let ana = grads.biases[layer][idx];
                let rel = (num - ana).abs() / (num.abs() + ana.abs()).max(1e-8);
                assert!(rel <= 1e-4, "layer {layer} bias {idx}: fd {num} vs {ana}");
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = random_params(&ArchSpec { channels: 5, depth: 3 }, 21);
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, params);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = random_params(&small_arch(), 22);
        save_checkpoint(&params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // corrupted magic
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

        // truncation
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

        // trailing garbage
        let mut long = bytes.clone();
        long.push(0);
        std::fs::write(&path, &long).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

        // declared channel count inconsistent with payload
        let mut mismatched = bytes.clone();
        mismatched[6] = 99; // channels u32 low byte
        std::fs::write(&path, &mismatched).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
