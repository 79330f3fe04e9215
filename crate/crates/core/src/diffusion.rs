//! DDPM machinery: schedule, forward corruption, training losses with a
//! learned variance, ancestral sampling and EMA weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{LatentShape, VideoLatent};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{phi_cdf, phi_pdf, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ScheduleConfig {
    /// Linear schedule over `steps` whose endpoints are scaled by
    /// `1000 / steps`, so short chains still reach a near-zero `ᾱ_T`.
    pub fn scaled(steps: usize) -> Self {
        let scale = 1000.0 / steps as f64;
        Self {
            steps,
            beta_start: 1e-4 * scale,
            beta_end: 2e-2 * scale,
        }
    }
}

/// Per-step coefficients, indexed by 1-based `t ∈ [1, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_variance: Vec<f64>,
    posterior_log_variance: Vec<f64>,
    coef_z0: Vec<f64>,
    coef_zt: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        if c.steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        let betas = if c.steps == 1 {
            vec![c.beta_start]
        } else {
            (0..c.steps)
                .map(|i| c.beta_start + (c.beta_end - c.beta_start) * i as f64 / (c.steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn linear(steps: usize) -> Result<Self> {
        Self::from_config(&ScheduleConfig {
            steps,
            ..ScheduleConfig::default()
        })
    }

    /// The posterior variance at `t = 1` is zero; it is clipped to the `t = 2`
    /// value (or `β_1` for a one-step chain) so log-variances stay finite.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::config("every beta must lie in (0, 1)"));
        }
        let n = beta.len();
        let mut alpha_bar = Vec::with_capacity(n);
        let mut acc = 1.0;
        for &b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let mut posterior_variance = Vec::with_capacity(n);
        let mut coef_z0 = Vec::with_capacity(n);
        let mut coef_zt = Vec::with_capacity(n);
        for i in 0..n {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            let denom = 1.0 - alpha_bar[i];
            posterior_variance.push(beta[i] * (1.0 - prev) / denom);
            coef_z0.push(beta[i] * prev.sqrt() / denom);
            coef_zt.push((1.0 - prev) * (1.0 - beta[i]).sqrt() / denom);
        }
        posterior_variance[0] = if n > 1 { posterior_variance[1] } else { beta[0] };
        let posterior_log_variance = posterior_variance.iter().map(|v| v.ln()).collect();
        Ok(Self {
            beta,
            alpha_bar,
            posterior_variance,
            posterior_log_variance,
            coef_z0,
            coef_zt,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.idx(t)?])
    }

    /// `β̃_t`, clipped at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        Ok(self.posterior_variance[self.idx(t)?])
    }

    pub fn posterior_log_variance(&self, t: usize) -> Result<f64> {
        Ok(self.posterior_log_variance[self.idx(t)?])
    }

    /// `(c0, ct)` with `μ̃_t(z0, zt) = c0·z0 + ct·zt`.
    pub fn posterior_mean_coefs(&self, t: usize) -> Result<(f64, f64)> {
        let i = self.idx(t)?;
        Ok((self.coef_z0[i], self.coef_zt[i]))
    }

    /// Log-variance of the model from raw output `v`: `frac·log β_t +
    /// (1 − frac)·log β̃_t` with `frac = (v + 1) / 2`.
    pub fn model_log_variance(&self, t: usize, v: f64) -> Result<f64> {
        let frac = (v + 1.0) / 2.0;
        Ok(frac * self.beta(t)?.ln() + (1.0 - frac) * self.posterior_log_variance(t)?)
    }

    /// `ẑ0 = (zt − √(1−ᾱ)·ε) / √ᾱ`.
    pub fn predict_z0(&self, t: usize, zt: f64, eps: f64) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        Ok((zt - (1.0 - ab).sqrt() * eps) / ab.sqrt())
    }

    /// Model mean from a noise prediction.
    pub fn model_mean(&self, t: usize, zt: f64, eps: f64) -> Result<f64> {
        let (c0, ct) = self.posterior_mean_coefs(t)?;
        Ok(c0 * self.predict_z0(t, zt, eps)? + ct * zt)
    }
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn q_sample<T: Element>(
    schedule: &DiffusionSchedule,
    z0: &VideoLatent<T>,
    t: usize,
    eps: &VideoLatent<T>,
) -> Result<VideoLatent<T>> {
    let ab = schedule.alpha_bar(t)?;
    VideoLatent::new(z0.tensor().scale(ab.sqrt())?.add(&eps.tensor().scale((1.0 - ab).sqrt())?)?)
}

/// Mean squared error between the target and predicted noise.
pub fn loss_simple<T: Element>(eps_pred: &VideoLatent<T>, eps: &VideoLatent<T>) -> Result<Tensor<T>> {
    eps_pred.tensor().sub(eps.tensor())?.square()?.mean()
}

/// `KL(N(m1, e^lv1) ‖ N(m2, e^lv2))` per dimension, in nats.
pub fn normal_kl(m1: f64, lv1: f64, m2: f64, lv2: f64) -> f64 {
    // expm1(r) − r keeps the variance part exactly zero at r = 0
    let r = lv1 - lv2;
    0.5 * ((r.exp_m1() - r) + (m1 - m2) * (m1 - m2) * (-lv2).exp())
}

fn d_normal_kl_d_lv2(m1: f64, lv1: f64, m2: f64, lv2: f64) -> f64 {
    -0.5 * ((lv1 - lv2).exp_m1() + (m1 - m2) * (m1 - m2) * (-lv2).exp())
}

/// Half-width of one 8-bit quantization bin on `[-1, 1]`.
pub const BIN_HALF_WIDTH: f64 = 1.0 / 255.0;
const LOG_FLOOR: f64 = 1e-12;

/// `−log P(x)` for `x` quantized to 256 levels on `[-1, 1]` under
/// `N(mean, e^{2·log_scale})`, the outermost bins extending to ±∞. Returns
/// the value and its derivative in `log_scale`.
pub fn discretized_gaussian_nll(x: f64, mean: f64, log_scale: f64) -> (f64, f64) {
    let inv = (-log_scale).exp();
    let c = x - mean;
    let a = inv * (c + BIN_HALF_WIDTH);
    let b = inv * (c - BIN_HALF_WIDTH);
    // d a / d log_scale = −a, likewise for b
    let (p, dp) = if x < -0.999 {
        (phi_cdf(a), -a * phi_pdf(a))
    } else if x > 0.999 {
        (1.0 - phi_cdf(b), b * phi_pdf(b))
    } else {
        // take the difference in the lower tail to avoid cancellation
        let p = if b > 0.0 { phi_cdf(-b) - phi_cdf(-a) } else { phi_cdf(a) - phi_cdf(b) };
        (p, -a * phi_pdf(a) + b * phi_pdf(b))
    };
    if p <= LOG_FLOOR {
        (-LOG_FLOOR.ln(), 0.0)
    } else {
        (-p.ln(), -dp / p)
    }
}

/// Variational bound term for one timestep, averaged over elements. For
/// `t > 1` it is the KL from the true posterior `q(z_{t−1} | z_t, z0)` to the
/// model; for `t = 1` the discretized decoder likelihood of `z0`. The noise
/// prediction is detached, so only `var_raw` receives gradient.
pub fn loss_vlb<T: Element>(
    schedule: &DiffusionSchedule,
    z0: &VideoLatent<T>,
    zt: &VideoLatent<T>,
    t: usize,
    eps_pred: &VideoLatent<T>,
    var_raw: &VideoLatent<T>,
) -> Result<Tensor<T>> {
    let n = z0.tensor().numel();
    if zt.tensor().numel() != n || eps_pred.tensor().numel() != n || var_raw.tensor().numel() != n {
        return Err(Error::shape("loss_vlb", "inputs differ in size"));
    }
    let (c0, ct) = schedule.posterior_mean_coefs(t)?;
    let lv_post = schedule.posterior_log_variance(t)?;
    let dlv_dv = 0.5 * (schedule.beta(t)?.ln() - lv_post);
    let z0d = z0.tensor().to_f64_vec();
    let ztd = zt.tensor().to_f64_vec();
    // stop-gradient: only values of the mean path are read
    let eps = eps_pred.tensor().to_f64_vec();
    let mut means = Vec::with_capacity(n);
    for i in 0..n {
        means.push(schedule.model_mean(t, ztd[i], eps[i])?);
    }
    let terms = var_raw.tensor().map_indexed("loss_vlb", |i, v| {
        let lv = schedule.model_log_variance(t, v).expect("t validated above");
        if t == 1 {
            let (nll, d) = discretized_gaussian_nll(z0d[i], means[i], 0.5 * lv);
            (nll, d * 0.5 * dlv_dv)
        } else {
            let m_post = c0 * z0d[i] + ct * ztd[i];
            (
                normal_kl(m_post, lv_post, means[i], lv),
                d_normal_kl_d_lv2(m_post, lv_post, means[i], lv) * dlv_dv,
            )
        }
    })?;
    terms.mean()
}

pub struct StepLosses<T: Element> {
    pub total: Tensor<T>,
    pub simple: f64,
    pub vlb: f64,
}

/// `L_simple + λ·L_vlb` for one clip at one timestep.
pub fn training_losses<T: Element, F>(
    schedule: &DiffusionSchedule,
    model: F,
    z0: &VideoLatent<T>,
    t: usize,
    eps: &VideoLatent<T>,
    vlb_weight: f64,
) -> Result<StepLosses<T>>
where
    F: FnOnce(&VideoLatent<T>, usize) -> Result<(VideoLatent<T>, VideoLatent<T>)>,
{
    let zt = q_sample(schedule, z0, t, eps)?;
    let (eps_pred, var_raw) = model(&zt, t)?;
    let simple = loss_simple(&eps_pred, eps)?;
    let vlb = loss_vlb(schedule, z0, &zt, t, &eps_pred, &var_raw)?;
    Ok(StepLosses {
        simple: simple.item()?.to_f64(),
        vlb: vlb.item()?.to_f64(),
        total: simple.add(&vlb.scale(vlb_weight)?)?,
    })
}

/// Ancestral sampling from `t = T` down to 1 with learned variances; the
/// last step returns the mean. Deterministic in `seed`.
pub fn p_sample_loop<T: Element, F>(
    schedule: &DiffusionSchedule,
    mut model: F,
    shape: LatentShape,
    seed: u64,
) -> Result<VideoLatent<T>>
where
    F: FnMut(&VideoLatent<T>, usize) -> Result<(VideoLatent<T>, VideoLatent<T>)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.numel();
    let init: Vec<T> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::from_f64(z)
        })
        .collect();
    let mut z = VideoLatent::from_vec(init, shape)?;
    for t in (1..=schedule.steps()).rev() {
        let step = |z: &VideoLatent<T>, model: &mut F, rng: &mut ChaCha8Rng| -> Result<VideoLatent<T>> {
            let (eps, var) = model(z, t)?;
            let (zd, ed, vd) = (z.tensor().data(), eps.tensor().data(), var.tensor().data());
            let mut next = Vec::with_capacity(n);
            for i in 0..n {
                let mean = schedule.model_mean(t, zd[i].to_f64(), ed[i].to_f64())?;
                let value = if t > 1 {
                    let lv = schedule.model_log_variance(t, vd[i].to_f64())?;
                    let noise: f64 = StandardNormal.sample(rng);
                    mean + (0.5 * lv).exp() * noise
                } else {
                    mean
                };
                if !value.is_finite() {
                    return Err(Error::NonFinite { op: "p_sample" });
                }
                next.push(T::from_f64(value));
            }
            VideoLatent::from_vec(next, shape)
        };
        z = step(&z, &mut model, &mut rng).map_err(|e| Error::SamplerStep {
            step: t,
            source: Box::new(e),
        })?;
    }
    Ok(z)
}

/// Exponential moving average of the trainable parameters.
#[derive(Clone)]
pub struct EmaState<T: Element> {
    pub decay: f64,
    pub shadow: ParamStore<T>,
}

impl<T: Element> EmaState<T> {
    pub fn new(params: &ParamStore<T>, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::config(format!("ema decay {decay} outside (0, 1)")));
        }
        Ok(Self {
            decay,
            shadow: params.frozen(),
        })
    }

    /// `shadow ← decay·shadow + (1 − decay)·param` for every trainable entry.
    pub fn update(&mut self, params: &ParamStore<T>) -> Result<()> {
        let d = self.decay;
        for (name, p) in params.trainable() {
            let s = self.shadow.get(name)?;
            if s.shape() != p.shape() {
                return Err(Error::shape(
                    "ema_update",
                    format!("`{name}`: shadow {:?} vs parameter {:?}", s.shape(), p.shape()),
                ));
            }
            let next: Vec<T> = s
                .data()
                .iter()
                .zip(p.data())
                .map(|(&s, &p)| T::from_f64(d * s.to_f64() + (1.0 - d) * p.to_f64()))
                .collect();
            self.shadow.set_data(name, next)?;
        }
        Ok(())
    }
}
