//! Log + power-transform Gaussianization.
//!
//! Speckled amplitude is taken to log space and then through the piecewise
//! power transform `T_lambda` (Yeo-Johnson form); the power parameter is
//! fitted so the transformed log-Gamma residual has minimal combined
//! skewness and excess kurtosis. The fitted [`TransformSpec`] freezes
//! everything inference needs: lambda, the residual mean, and its standard
//! deviation.
//!
//! `T_lambda`:
//!   u >= 0:  ((u+1)^lambda - 1) / lambda        (log(u+1) at lambda = 0)
//!   u <  0:  -(((-u+1)^(2-lambda) - 1) / (2-lambda))   (-log(-u+1) at lambda = 2)
//!
//! Both halves are evaluated through expm1/log1p so the lambda -> 0 and
//! lambda -> 2 limits are smooth and T(0) = 0 exactly.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gridmath::rng::RandomStream;
use crate::gridmath::{mean, variance, Domain, Grid2};

/// Frozen bridge between amplitude space and the Gaussianized z space.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSpec {
    /// Fitted power parameter.
    pub lambda_dagger: f64,
    /// Mean of the transformed noisy level at the fitting anchor; subtracted
    /// in [`to_z_domain`] so z-domain noise is zero-mean, restored on the way
    /// back.
    pub noise_mean: f64,
    /// Standard deviation of the centered transformed residual.
    pub sigma_data: f64,
    pub looks: f64,
    pub mc_samples: usize,
    /// Reference log-amplitude level the residual was fitted at.
    pub anchor_mu: f64,
}

/// Skewness/kurtosis objective at one lambda.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentObjective {
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// skewness^2 + excess_kurtosis^2
    pub value: f64,
}

impl MomentObjective {
    fn new(skewness: f64, excess_kurtosis: f64) -> Self {
        Self { skewness, excess_kurtosis, value: skewness * skewness + excess_kurtosis * excess_kurtosis }
    }
}

/// ((v+1)^p - 1) / p for v >= 0, with the p = 0 log limit.
#[inline]
fn powm1_over(p: f64, v: f64) -> f64 {
    if p == 0.0 {
        v.ln_1p()
    } else if p == 1.0 {
        v
    } else {
        (p * v.ln_1p()).exp_m1() / p
    }
}

/// Inverse of [`powm1_over`]: y >= 0 back to v, requires p*y + 1 > 0.
#[inline]
fn inv_powm1_over(p: f64, y: f64) -> Option<f64> {
    if p == 0.0 {
        Some(y.exp_m1())
    } else if p == 1.0 {
        Some(y)
    } else {
        let t = p * y + 1.0;
        if t <= 0.0 {
            return None;
        }
        Some((t.ln() / p).exp_m1())
    }
}

/// The piecewise power transform. Strictly increasing in `u`, T(0) = 0.
pub fn lyj_forward(u: f64, lambda: f64) -> Result<f64> {
    if !u.is_finite() {
        return Err(Error::Domain(format!("transform input must be finite, got {u}")));
    }
    Ok(if u >= 0.0 { powm1_over(lambda, u) } else { -powm1_over(2.0 - lambda, -u) })
}

/// Inverse transform; errors when `z` is outside the attainable range.
pub fn lyj_inverse(z: f64, lambda: f64) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::Domain(format!("inverse input must be finite, got {z}")));
    }
    if z >= 0.0 {
        inv_powm1_over(lambda, z).ok_or_else(|| {
            Error::Range(format!(
                "z = {z} outside positive branch: requires lambda*z + 1 > 0 with lambda = {lambda}"
            ))
        })
    } else {
        inv_powm1_over(2.0 - lambda, -z).map(|v| -v).ok_or_else(|| {
            Error::Range(format!(
                "z = {z} outside negative branch: requires (2-lambda)*(-z) + 1 > 0 with lambda = {lambda}"
            ))
        })
    }
}

/// Transform every value of a slice in place.
fn lyj_forward_slice(values: &mut [f64], lambda: f64) -> Result<()> {
    for v in values.iter_mut() {
        *v = lyj_forward(*v, lambda)?;
    }
    Ok(())
}

/// Sample skewness/kurtosis of the centered transformed residual at one
/// lambda, over a frozen sample of `anchor_mu + log nu` values.
fn objective_on(y: &[f64], lambda: f64) -> Result<MomentObjective> {
    let mut t = y.to_vec();
    lyj_forward_slice(&mut t, lambda)?;
    moments_of(&t)
}

fn moments_of(t: &[f64]) -> Result<MomentObjective> {
    let m = mean(t);
    if !m.is_finite() {
        return Err(Error::Numeric("transformed sample mean is not finite".into()));
    }
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in t {
        let d = v - m;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let n = t.len() as f64;
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if !(m2 > 0.0) || !m2.is_finite() {
        return Err(Error::Numeric(format!("degenerate residual sample (variance {m2})")));
    }
    Ok(MomentObjective::new(m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0))
}

fn draw_log_sample(
    looks: f64,
    anchor_mu: f64,
    stream: &mut RandomStream,
    n: usize,
) -> Result<Vec<f64>> {
    if n < 100_000 {
        return Err(Error::Param(format!("residual fit needs n >= 1e5 samples, got {n}")));
    }
    if !(looks >= 0.5) {
        return Err(Error::Param(format!("looks must be >= 0.5, got {looks}")));
    }
    let nu = stream.sample_gamma(looks, 1.0 / looks, n)?;
    Ok(nu.into_iter().map(|v| anchor_mu + v.ln()).collect())
}

/// Draw `n` speckle residuals at `anchor_mu` and evaluate the objective at
/// one lambda. Repeated calls with the same stream state are identical.
pub fn residual_objective(
    lambda: f64,
    looks: f64,
    anchor_mu: f64,
    stream: &mut RandomStream,
    n: usize,
) -> Result<MomentObjective> {
    let y = draw_log_sample(looks, anchor_mu, stream, n)?;
    objective_on(&y, lambda)
}

/// Grid and refinement controls for [`fit_lambda`].
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_step: f64,
    pub golden_iters: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { grid_min: -2.0, grid_max: 4.0, grid_step: 0.05, golden_iters: 30 }
    }
}

/// Fit the power parameter by grid search plus golden-section refinement.
///
/// One Gamma sample of size `n` is drawn up front and reused for every
/// lambda evaluation (common random numbers), which makes the objective a
/// deterministic function of lambda and the argmin reproducible. The
/// returned spec records the pre-centering mean and the centered standard
/// deviation of the transformed residual at the chosen lambda.
pub fn fit_lambda(
    looks: f64,
    anchor_mu: f64,
    stream: &mut RandomStream,
    n: usize,
    opts: &FitOptions,
) -> Result<TransformSpec> {
    if !(opts.grid_step > 0.0) || opts.grid_min >= opts.grid_max {
        return Err(Error::Param(format!(
            "invalid fit grid [{}, {}] step {}",
            opts.grid_min, opts.grid_max, opts.grid_step
        )));
    }
    let y = draw_log_sample(looks, anchor_mu, stream, n)?;

    let mut lambdas = Vec::new();
    let mut l = opts.grid_min;
    while l <= opts.grid_max + 1e-12 {
        lambdas.push(l);
        l += opts.grid_step;
    }
    let objs: Vec<Option<f64>> = lambdas
        .par_iter()
        .map(|&l| objective_on(&y, l).ok().map(|o| o.value).filter(|v| v.is_finite()))
        .collect();

    let mut best: Option<(f64, f64)> = None;
    for (&l, j) in lambdas.iter().zip(&objs) {
        if let Some(j) = j {
            if best.map_or(true, |(_, bj)| *j < bj) {
                best = Some((l, *j));
            }
        }
    }
    let (grid_lambda, grid_value) =
        best.ok_or_else(|| Error::Fit("objective non-finite across the entire grid".into()))?;

    // Golden-section refinement around the grid minimum.
    let mut a = (grid_lambda - opts.grid_step).max(opts.grid_min);
    let mut b = (grid_lambda + opts.grid_step).min(opts.grid_max);
    let mut best_lambda = grid_lambda;
    let mut best_value = grid_value;
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let eval = |l: f64, best: &mut (f64, f64)| -> f64 {
        match objective_on(&y, l) {
            Ok(o) if o.value.is_finite() => {
                if o.value < best.1 {
                    *best = (l, o.value);
                }
                o.value
            }
            _ => f64::INFINITY,
        }
    };
    let mut tracked = (best_lambda, best_value);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = eval(x1, &mut tracked);
    let mut f2 = eval(x2, &mut tracked);
    for _ in 0..opts.golden_iters {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = eval(x1, &mut tracked);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = eval(x2, &mut tracked);
        }
    }
    (best_lambda, best_value) = tracked;
    let _ = best_value;

    let mut t = y;
    lyj_forward_slice(&mut t, best_lambda)?;
    let noise_mean = mean(&t);
    let sigma_data = variance(&t).sqrt();
    if !(sigma_data > 0.0) {
        return Err(Error::Fit(format!("degenerate residual at lambda {best_lambda}")));
    }
    Ok(TransformSpec {
        lambda_dagger: best_lambda,
        noise_mean,
        sigma_data,
        looks,
        mc_samples: n,
        anchor_mu,
    })
}

/// Amplitude -> z domain: z = T(log x) - noise_mean.
pub fn to_z_domain(x: &Grid2, spec: &TransformSpec) -> Result<Grid2> {
    x.require_domain(Domain::Amplitude, "to_z_domain")?;
    let mut data = Vec::with_capacity(x.as_slice().len());
    for &v in x.as_slice() {
        if !(v > 0.0) {
            return Err(Error::Domain(format!("non-positive amplitude {v} in to_z_domain")));
        }
        let z = lyj_forward(v.ln(), spec.lambda_dagger)? - spec.noise_mean;
        if !z.is_finite() {
            return Err(Error::Numeric(format!("transform of amplitude {v} is not finite")));
        }
        data.push(z);
    }
    Grid2::new(x.height(), x.width(), Domain::ZDomain, data)
}

/// Z domain -> amplitude: x = exp(T^-1(z + noise_mean)).
pub fn from_z_domain(z: &Grid2, spec: &TransformSpec) -> Result<Grid2> {
    z.require_domain(Domain::ZDomain, "from_z_domain")?;
    let mut data = Vec::with_capacity(z.as_slice().len());
    for &v in z.as_slice() {
        let x = lyj_inverse(v + spec.noise_mean, spec.lambda_dagger)?.exp();
        if !(x > 0.0) || !x.is_finite() {
            return Err(Error::Numeric(format!("inverse transform of z {v} left amplitude {x}")));
        }
        data.push(x);
    }
    Grid2::new(z.height(), z.width(), Domain::Amplitude, data)
}

// ---------------------------------------------------------------------------
// TransformSpec file format: `key = value` lines, floats at 17 significant
// digits so reload is bit-exact.
// ---------------------------------------------------------------------------

impl TransformSpec {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lambda_dagger = {:.16e}", self.lambda_dagger);
        let _ = writeln!(s, "noise_mean = {:.16e}", self.noise_mean);
        let _ = writeln!(s, "sigma_data = {:.16e}", self.sigma_data);
        let _ = writeln!(s, "looks = {:.16e}", self.looks);
        let _ = writeln!(s, "mc_samples = {}", self.mc_samples);
        let _ = writeln!(s, "anchor_mu = {:.16e}", self.anchor_mu);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lambda_dagger = None;
        let mut noise_mean = None;
        let mut sigma_data = None;
        let mut looks = None;
        let mut mc_samples = None;
        let mut anchor_mu = None;
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("spec line {}: expected key = value", idx + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let fval = || {
                value
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("spec key {key}: bad float {value:?}")))
            };
            match key {
                "lambda_dagger" => lambda_dagger = Some(fval()?),
                "noise_mean" => noise_mean = Some(fval()?),
                "sigma_data" => sigma_data = Some(fval()?),
                "looks" => looks = Some(fval()?),
                "mc_samples" => {
                    mc_samples = Some(value.parse::<usize>().map_err(|_| {
                        Error::Format(format!("spec key mc_samples: bad integer {value:?}"))
                    })?)
                }
                "anchor_mu" => anchor_mu = Some(fval()?),
                other => return Err(Error::Format(format!("unknown spec key {other:?}"))),
            }
        }
        let missing = |k: &str| Error::Format(format!("missing spec key {k:?}"));
        let spec = Self {
            lambda_dagger: lambda_dagger.ok_or_else(|| missing("lambda_dagger"))?,
            noise_mean: noise_mean.ok_or_else(|| missing("noise_mean"))?,
            sigma_data: sigma_data.ok_or_else(|| missing("sigma_data"))?,
            looks: looks.ok_or_else(|| missing("looks"))?,
            mc_samples: mc_samples.ok_or_else(|| missing("mc_samples"))?,
            anchor_mu: anchor_mu.ok_or_else(|| missing("anchor_mu"))?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_data > 0.0) {
            return Err(Error::Format(format!("sigma_data must be positive, got {}", self.sigma_data)));
        }
        if !self.lambda_dagger.is_finite() {
            return Err(Error::Format("lambda_dagger must be finite".into()));
        }
        if self.mc_samples < 100_000 {
            return Err(Error::Format(format!(
                "mc_samples must be >= 1e5, got {}",
                self.mc_samples
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }
}
