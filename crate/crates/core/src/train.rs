//! Self-supervised training loop.
//!
//! Each step further corrupts the z-domain data with Gaussian noise at a
//! sampled level sigma_t, then regresses the blend
//! `delta * net(z_t, sigma_t) + (1 - delta) * z_t` onto the original data,
//! where `delta = (sigma_t^2 - sigma_data^2) / (sigma_t^2 - sigma_target^2)`.
//! No clean targets are needed: minimizing the weighted blend residual
//! drives the network toward the posterior mean of the underlying signal.

use std::io::Write;

use crate::error::{Error, Result};
use crate::gridmath::rng::RandomStream;
use crate::gridmath::{Domain, Grid2, Tensor4};
use crate::net::{backward, forward, init_params, ArchSpec, ModelParams, ParamGrads};

const STREAM_TRAIN: u64 = 0x54_52_41_49; // "TRAI"

/// Weighting of samples across noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// w = 1
    Unit,
    /// w = 1 / max(delta, delta_min)^2; equalizes the implicit-target
    /// variance across noise levels.
    InvDeltaSq,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Noise level of the z-domain data, from the fitted transform.
    pub sigma_data: f64,
    /// Residual noise of the (unobserved) clean signal; zero by default.
    pub sigma_target: f64,
    /// sigma_max = ratio * sigma_data; must exceed 1.
    pub sigma_max_ratio: f64,
    /// Noise schedule: sigma_t^2 = sigma_data^2 + u (sigma_max^2 - sigma_data^2),
    /// u ~ Uniform(u_min, 1].
    pub u_min: f64,
    pub weight_mode: WeightMode,
    /// Floor applied to delta inside the inverse-square weight.
    pub delta_min: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub batch: usize,
    pub patch: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for a given data noise level.
    pub fn with_sigma_data(sigma_data: f64) -> Self {
        Self {
            sigma_data,
            sigma_target: 0.0,
            sigma_max_ratio: 3.0,
            u_min: 0.01,
            weight_mode: WeightMode::InvDeltaSq,
            delta_min: 0.05,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            iterations: 2000,
            batch: 8,
            patch: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Param(msg));
        if !(self.sigma_data > 0.0) {
            return bad(format!("sigma_data must be positive, got {}", self.sigma_data));
        }
        if !(self.sigma_target >= 0.0) || self.sigma_target > self.sigma_data {
            return bad(format!(
                "sigma_target must lie in [0, sigma_data], got {}",
                self.sigma_target
            ));
        }
        if !(self.sigma_max_ratio > 1.0) {
            return bad(format!("sigma_max_ratio must exceed 1, got {}", self.sigma_max_ratio));
        }
        if !(self.u_min > 0.0 && self.u_min < 1.0) {
            return bad(format!("u_min must lie in (0, 1), got {}", self.u_min));
        }
        if !(self.delta_min > 0.0 && self.delta_min < 1.0) {
            return bad(format!("delta_min must lie in (0, 1), got {}", self.delta_min));
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) {
            return bad("learning_rate and epsilon must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if self.iterations == 0 || self.batch == 0 || self.patch == 0 {
            return bad("iterations, batch and patch must be positive".into());
        }
        Ok(())
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max_ratio * self.sigma_data
    }
}

/// Blend coefficient of the self-supervised objective; lies in [0, 1).
pub fn delta(sigma_t: f64, sigma_data: f64, sigma_target: f64) -> Result<f64> {
    if !(sigma_t >= sigma_data && sigma_data >= sigma_target && sigma_target >= 0.0) {
        return Err(Error::Param(format!(
            "noise levels must satisfy sigma_t >= sigma_data >= sigma_target >= 0, \
             got {sigma_t}, {sigma_data}, {sigma_target}"
        )));
    }
    if !(sigma_t > sigma_target) {
        return Err(Error::Param(format!(
            "sigma_t must exceed sigma_target, got {sigma_t} vs {sigma_target}"
        )));
    }
    let num = sigma_t * sigma_t - sigma_data * sigma_data;
    let den = sigma_t * sigma_t - sigma_target * sigma_target;
    Ok(num / den)
}

fn corrupt_plane(src: &[f64], dst: &mut [f64], scale: f64, stream: &mut RandomStream) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s + scale * stream.next_normal();
    }
}

/// Further corrupt z-domain data to total noise level `sigma_t`:
/// `z_t = z_data + sqrt(sigma_t^2 - sigma_data^2) * xi`.
pub fn corrupt(
    z_data: &Tensor4,
    sigma_data: f64,
    sigma_t: f64,
    stream: &mut RandomStream,
) -> Result<Tensor4> {
    if !(sigma_t >= sigma_data) {
        return Err(Error::Param(format!(
            "corrupt requires sigma_t >= sigma_data, got {sigma_t} < {sigma_data}"
        )));
    }
    let scale = (sigma_t * sigma_t - sigma_data * sigma_data).sqrt();
    let mut out = Tensor4::zeros(z_data.shape());
    corrupt_plane(z_data.as_slice(), out.as_mut_slice(), scale, stream);
    Ok(out)
}

/// Weighted blend loss:
/// `weight * mean((delta z_hat + (1 - delta) z_t - z_data)^2)`.
pub fn loss(
    z_hat: &Tensor4,
    z_t: &Tensor4,
    z_data: &Tensor4,
    delta: f64,
    weight: f64,
) -> Result<f64> {
    if z_hat.shape() != z_t.shape() || z_t.shape() != z_data.shape() {
        return Err(Error::Shape(format!(
            "loss shapes differ: {:?} / {:?} / {:?}",
            z_hat.shape(),
            z_t.shape(),
            z_data.shape()
        )));
    }
    if !(weight > 0.0) {
        return Err(Error::Param(format!("loss weight must be positive, got {weight}")));
    }
    let mut acc = 0.0;
    for ((&h, &t), &d) in z_hat.as_slice().iter().zip(z_t.as_slice()).zip(z_data.as_slice()) {
        let r = delta * h + (1.0 - delta) * t - d;
        acc += r * r;
    }
    Ok(weight * acc / z_hat.len() as f64)
}

/// Uniform random patches from the usable manifest images.
///
/// Images smaller than the patch are skipped; an empty usable set is an
/// error. Output shape is (batch, 1, patch, patch).
pub fn assemble_batch(
    images: &[Grid2],
    patch: usize,
    batch: usize,
    stream: &mut RandomStream,
) -> Result<Tensor4> {
    let usable: Vec<&Grid2> = images
        .iter()
        .filter(|g| g.height() >= patch && g.width() >= patch)
        .collect();
    if usable.is_empty() {
        return Err(Error::Domain(format!(
            "no usable images: need at least {patch}x{patch}, got {} images",
            images.len()
        )));
    }
    let mut out = Tensor4::zeros([batch, 1, patch, patch]);
    for b in 0..batch {
        let img = usable[stream.next_below(usable.len())];
        let r0 = stream.next_below(img.height() - patch + 1);
        let c0 = stream.next_below(img.width() - patch + 1);
        let dst = out.plane_mut(b, 0);
        for y in 0..patch {
            dst[y * patch..(y + 1) * patch]
                .copy_from_slice(&img.row(r0 + y)[c0..c0 + patch]);
        }
    }
    Ok(out)
}

/// Adam moment buffers shaped like the parameters.
#[derive(Debug, Clone)]
struct AdamState {
    m_w: Vec<Tensor4>,
    v_w: Vec<Tensor4>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
}

impl AdamState {
    fn zeros_like(params: &ModelParams) -> Self {
        Self {
            m_w: params.weights().iter().map(|w| Tensor4::zeros(w.shape())).collect(),
            v_w: params.weights().iter().map(|w| Tensor4::zeros(w.shape())).collect(),
            m_b: params.biases().iter().map(|b| vec![0.0; b.len()]).collect(),
            v_b: params.biases().iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }
}

/// Mutable training state: parameters, optimizer moments, step counter and
/// the running mean of the loss.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    opt: AdamState,
    pub step: usize,
    pub running_loss: f64,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let opt = AdamState::zeros_like(&params);
        Self { params, opt, step: 0, running_loss: 0.0 }
    }
}

fn adam_scalar(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, cfg: &TrainConfig, t: f64) {
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    let m_hat = *m / (1.0 - cfg.beta1.powf(t));
    let v_hat = *v / (1.0 - cfg.beta2.powf(t));
    *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
}

pub(crate) fn adam_update(state: &mut TrainState, grads: &ParamGrads, cfg: &TrainConfig) {
    let t = (state.step + 1) as f64;
    for layer in 0..state.params.weights().len() {
        let gw = grads.weights[layer].as_slice();
        let gb = &grads.biases[layer];
        {
            let m = state.opt.m_w[layer].as_mut_slice();
            let v = state.opt.v_w[layer].as_mut_slice();
            let p = state.params.weights_mut()[layer].as_mut_slice();
            for i in 0..p.len() {
                adam_scalar(&mut p[i], gw[i], &mut m[i], &mut v[i], cfg, t);
            }
        }
        {
            let m = &mut state.opt.m_b[layer];
            let v = &mut state.opt.v_b[layer];
            let p = &mut state.params.biases_mut()[layer];
            for i in 0..p.len() {
                adam_scalar(&mut p[i], gb[i], &mut m[i], &mut v[i], cfg, t);
            }
        }
    }
    state.step += 1;
}

/// Per-step diagnostics.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    pub sigma_t: Vec<f64>,
    pub delta: Vec<f64>,
}

impl StepStats {
    pub fn sigma_t_mean(&self) -> f64 {
        self.sigma_t.iter().sum::<f64>() / self.sigma_t.len() as f64
    }

    pub fn delta_mean(&self) -> f64 {
        self.delta.iter().sum::<f64>() / self.delta.len() as f64
    }
}

/// One optimization step: sample a noise level per batch element, corrupt,
/// run the network, apply the weighted blend loss, and take an Adam step.
/// Deterministic given the stream and a single thread.
pub fn train_step(
    state: &mut TrainState,
    z_data: &Tensor4,
    cfg: &TrainConfig,
    stream: &mut RandomStream,
) -> Result<StepStats> {
    let [batch, ch, h, w] = z_data.shape();
    if ch != 1 {
        return Err(Error::Shape(format!("training batch must be single-channel, got {ch}")));
    }
    let sigma_max_sq = cfg.sigma_max() * cfg.sigma_max();
    let sigma_data_sq = cfg.sigma_data * cfg.sigma_data;

    let mut sigmas = Vec::with_capacity(batch);
    let mut deltas = Vec::with_capacity(batch);
    let mut weights = Vec::with_capacity(batch);
    let mut z_t = Tensor4::zeros(z_data.shape());
    for b in 0..batch {
        let u = cfg.u_min + (1.0 - cfg.u_min) * (1.0 - stream.next_f64());
        let sigma_t = (sigma_data_sq + u * (sigma_max_sq - sigma_data_sq)).sqrt();
        let scale = (sigma_t * sigma_t - sigma_data_sq).sqrt();
        corrupt_plane(z_data.plane(b, 0), z_t.plane_mut(b, 0), scale, stream);
        let d = delta(sigma_t, cfg.sigma_data, cfg.sigma_target)?;
        let wgt = match cfg.weight_mode {
            WeightMode::Unit => 1.0,
            WeightMode::InvDeltaSq => {
                let floored = d.max(cfg.delta_min);
                1.0 / (floored * floored)
            }
        };
        sigmas.push(sigma_t);
        deltas.push(d);
        weights.push(wgt);
    }

    let (z_hat, ctx) = forward(&state.params, &z_t, &sigmas)?;

    // Loss and gradient w.r.t. the network output.
    let pixels = (h * w) as f64;
    let mut total = 0.0;
    let mut grad = Tensor4::zeros(z_hat.shape());
    for b in 0..batch {
        let d = deltas[b];
        let wgt = weights[b];
        let hat = z_hat.plane(b, 0);
        let zt = z_t.plane(b, 0);
        let zd = z_data.plane(b, 0);
        let g = grad.plane_mut(b, 0);
        let mut acc = 0.0;
        for i in 0..hat.len() {
            let r = d * hat[i] + (1.0 - d) * zt[i] - zd[i];
            acc += r * r;
            g[i] = 2.0 * wgt * d * r / (batch as f64 * pixels);
        }
        total += wgt * acc / pixels;
    }
    total /= batch as f64;
    if !total.is_finite() {
        let pnorm: f64 = state
            .params
            .weights()
            .iter()
            .map(|w| w.as_slice().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        return Err(Error::Numeric(format!(
            "non-finite loss at step {} (sigma_t {:?}, delta {:?}, |w| {pnorm:.3e})",
            state.step, sigmas, deltas
        )));
    }

    let grads = backward(&state.params, &ctx, &grad)?;
    let steps_done = state.step as f64;
    adam_update(state, &grads, cfg);
    state.running_loss = (state.running_loss * steps_done + total) / (steps_done + 1.0);

    Ok(StepStats { loss: total, sigma_t: sigmas, delta: deltas })
}

/// Full training run over a set of z-domain images.
///
/// Writes one `step loss sigma_t_mean delta_mean` line per step to `log`
/// when given, flushing every [`LOG_FLUSH_EVERY`] steps. Returns the final
/// state and the per-step losses.
pub fn train_loop(
    images_z: &[Grid2],
    arch: &ArchSpec,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(TrainState, Vec<f64>)> {
    cfg.validate()?;
    arch.validate()?;
    for img in images_z {
        img.require_domain(Domain::ZDomain, "train_loop")?;
    }
    let params = init_params(arch, cfg.seed)?;
    let mut state = TrainState::new(params);
    let master = RandomStream::new(cfg.seed, STREAM_TRAIN);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let mut stream = master.derive(step as u64);
        let batch = assemble_batch(images_z, cfg.patch, cfg.batch, &mut stream)?;
        let stats = train_step(&mut state, &batch, cfg, &mut stream)?;
        losses.push(stats.loss);
        if let Some(out) = log.as_deref_mut() {
            writeln!(
                out,
                "{} {:.8e} {:.8e} {:.8e}",
                step,
                stats.loss,
                stats.sigma_t_mean(),
                stats.delta_mean()
            )?;
            if (step + 1) % LOG_FLUSH_EVERY == 0 {
                out.flush()?;
            }
        }
    }
    if let Some(out) = log.as_deref_mut() {
        out.flush()?;
    }
    Ok((state, losses))
}

pub const LOG_FLUSH_EVERY: usize = 50;

// ---------------------------------------------------------------------------
// `key = value` config file
// ---------------------------------------------------------------------------

/// Train configuration plus architecture, parsed together from one file.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub config: TrainConfig,
    pub arch: ArchSpec,
}

/// Parse a training config file. Unset keys keep their defaults;
/// `sigma_data` always comes from the fitted transform, not the file.
pub fn parse_train_config(text: &str, sigma_data: f64) -> Result<TrainSetup> {
    let mut cfg = TrainConfig::with_sigma_data(sigma_data);
    let mut arch = ArchSpec::default();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", idx + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        let fval = || {
            value
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("config key {key}: bad float {value:?}")))
        };
        let uval = || {
            value
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("config key {key}: bad integer {value:?}")))
        };
        match key {
            "sigma_target" => cfg.sigma_target = fval()?,
            "sigma_max_ratio" => cfg.sigma_max_ratio = fval()?,
            "u_min" => cfg.u_min = fval()?,
            "delta_min" => cfg.delta_min = fval()?,
            "learning_rate" => cfg.learning_rate = fval()?,
            "beta1" => cfg.beta1 = fval()?,
            "beta2" => cfg.beta2 = fval()?,
            "epsilon" => cfg.epsilon = fval()?,
            "iterations" => cfg.iterations = uval()?,
            "batch" => cfg.batch = uval()?,
            "patch" => cfg.patch = uval()?,
            "seed" => {
                cfg.seed = value.parse::<u64>().map_err(|_| {
                    Error::Config(format!("config key seed: bad integer {value:?}"))
                })?
            }
            "channels" => arch.channels = uval()?,
            "depth" => arch.depth = uval()?,
            "weight_mode" => {
                cfg.weight_mode = match value {
                    "unit" => WeightMode::Unit,
                    "inv-delta-sq" => WeightMode::InvDeltaSq,
                    other => {
                        return Err(Error::Config(format!(
                            "weight_mode must be `unit` or `inv-delta-sq`, got {other:?}"
                        )))
                    }
                }
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
    }
    cfg.validate()?;
    arch.validate()?;
    Ok(TrainSetup { config: cfg, arch })
}
