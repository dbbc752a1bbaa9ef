//! Noise schedules, forward noising, anchored ancestral sampling and denoiser training.

use std::path::PathBuf;

use log::{info, warn};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_plan_batch, Normalizer};
use crate::denoiser::{adam_step, loss_and_grads, AdamConfig, AdamState, DenoiserModel};
use crate::env::Episode;
use crate::error::{Error, Result};
use crate::scalar::{to_scalar_vec, Scalar};
use crate::schedule::JumpSchedule;

pub const DEFAULT_DIFFUSION_STEPS: usize = 20;
const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    #[default]
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::validation(format!(
                "unknown noise schedule {other:?} (expected linear or cosine)"
            ))),
        }
    }
}

/// Variance schedule indexed by diffusion step `t ∈ 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    x0_clip: Option<f64>,
}

/// Squared-cosine profile `f(t) = cos²(((t/T)+s)/(1+s) · π/2)`.
fn cosine_profile(t: usize, steps: usize) -> f64 {
    let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 1 {
            return Err(Error::validation("diffusion step count T must be >= 1"));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear if steps == 1 => vec![LINEAR_BETA_START],
            ScheduleKind::Linear => (0..steps)
                .map(|i| {
                    let f = i as f64 / (steps - 1) as f64;
                    LINEAR_BETA_START + f * (LINEAR_BETA_END - LINEAR_BETA_START)
                })
                .collect(),
            ScheduleKind::Cosine => {
                let f0 = cosine_profile(0, steps);
                (1..=steps)
                    .map(|t| {
                        let prev = cosine_profile(t - 1, steps) / f0;
                        let cur = cosine_profile(t, steps) / f0;
                        (1.0 - cur / prev).min(MAX_BETA)
                    })
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for &b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self {
            kind,
            beta,
            alpha_bar,
            x0_clip: None,
        })
    }

    /// Reverse steps clip the denoised estimate `x̂₀` to `[-c, c]` before forming the
    /// posterior mean. Near `t = T` a step divides by `sqrt(α_t)`, which is tiny when β_t
    /// is clipped, so small noise-prediction errors would otherwise be amplified.
    pub fn with_x0_clip(mut self, clip: Option<f64>) -> Result<Self> {
        if let Some(c) = clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::validation(format!("x0 clip must be positive and finite, got {c}")));
            }
        }
        self.x0_clip = clip;
        Ok(self)
    }

    pub fn x0_clip(&self) -> Option<f64> {
        self.x0_clip
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::validation(format!(
                "diffusion step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Posterior standard deviation `σ_t = sqrt(β_t (1−ᾱ_{t−1})/(1−ᾱ_t))`; zero at `t = 1`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        let b = self.beta(t)?;
        Ok((b * (1.0 - self.alpha_bar(t - 1)?) / (1.0 - self.alpha_bar(t)?)).sqrt())
    }
}

pub fn build_noise_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    NoiseSchedule::new(steps, kind)
}

/// `x_t = √ᾱ_t x₀ + √(1−ᾱ_t) ε`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], ns: &NoiseSchedule) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::shape(format!(
            "x0 has {} values but eps has {}",
            x0.len(),
            eps.len()
        )));
    }
    ns.check(t)?;
    let ab = ns.alpha_bar(t)?;
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + s * e).collect())
}

/// Anything that predicts the noise in a batch of noisy plans.
pub trait NoisePredictor {
    fn token_dim(&self) -> usize;

    /// Largest offset the predictor accepts, when it has one.
    fn max_offset(&self) -> Option<usize> {
        None
    }

    /// `x` is `batch × H × D` with `H = offsets.len()`; `step` holds one step per row.
    fn predict_noise(&self, x: &[f64], batch: usize, offsets: &[usize], step: &[usize]) -> Result<Vec<f64>>;
}

impl<T: Scalar> NoisePredictor for DenoiserModel<T> {
    fn token_dim(&self) -> usize {
        self.config().token_dim
    }

    fn max_offset(&self) -> Option<usize> {
        Some(self.config().max_offset)
    }

    fn predict_noise(&self, x: &[f64], batch: usize, offsets: &[usize], step: &[usize]) -> Result<Vec<f64>> {
        let out = self.forward(&to_scalar_vec::<T>(x), batch, offsets, step)?;
        Ok(out.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
    }
}

/// One ancestral step `x_t → x_{t−1}` for every row of `x`, drawing row `b`'s noise from
/// `rngs[b]`. With an anchor, token 0 of every row is overwritten with it afterwards.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step<M: NoisePredictor + ?Sized, R: Rng>(
    model: &M,
    x: &mut [f64],
    t: usize,
    offsets: &[usize],
    ns: &NoiseSchedule,
    rngs: &mut [R],
    anchor: Option<&[f64]>,
) -> Result<()> {
    ns.check(t)?;
    let d = model.token_dim();
    let row = offsets.len() * d;
    let batch = rngs.len();
    if x.len() != batch * row {
        return Err(Error::shape(format!(
            "reverse step: {} values for {batch} rows of {row}",
            x.len()
        )));
    }
    if let Some(a) = anchor {
        if a.len() != d {
            return Err(Error::shape(format!("anchor has {} dims, expected {d}", a.len())));
        }
    }
    let eps = model.predict_noise(x, batch, offsets, &vec![t; batch])?;
    let (beta, alpha, ab, ab_prev) = (ns.beta(t)?, ns.alpha(t)?, ns.alpha_bar(t)?, ns.alpha_bar(t - 1)?);
    let coef = beta / (1.0 - ab).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    // Posterior mean written through x̂₀: μ = c0·x̂₀ + ct·x_t.
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let (sqrt_ab, sqrt_1m_ab) = (ab.sqrt(), (1.0 - ab).sqrt());
    let step_mean = |xv: f64, e: f64| match ns.x0_clip {
        None => (xv - coef * e) * inv_sqrt_alpha,
        Some(c) => {
            let x0 = ((xv - sqrt_1m_ab * e) / sqrt_ab).clamp(-c, c);
            c0 * x0 + ct * xv
        }
    };
    let sigma = if t > 1 { ns.sigma(t)? } else { 0.0 };
    for (b, rng) in rngs.iter_mut().enumerate() {
        let xr = &mut x[b * row..(b + 1) * row];
        let er = &eps[b * row..(b + 1) * row];
        for (xv, &e) in xr.iter_mut().zip(er) {
            let mean = step_mean(*xv, e);
            *xv = if sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                mean + sigma * z
            } else {
                mean
            };
        }
        if let Some(a) = anchor {
            xr[..d].copy_from_slice(a);
        }
        if let Some(k) = xr.iter().position(|v| !v.is_finite()) {
            let max_eps = er.iter().map(|v| v.abs()).fold(0.0_f64, f64::max);
            return Err(Error::NonFinite(format!(
                "reverse step t={t}: row {b} value {k} is non-finite (max |ε̂| {max_eps:.3e}, β_t {beta:.3e})"
            )));
        }
    }
    Ok(())
}

/// Derives one independent stream per candidate from a parent generator.
pub fn candidate_streams<R: RngCore + ?Sized>(rng: &mut R, n: usize) -> Vec<ChaCha8Rng> {
    (0..n).map(|_| ChaCha8Rng::seed_from_u64(rng.next_u64())).collect()
}

/// Runs the full reverse chain for `n_candidates` independent plans anchored at
/// `anchor` (normalized). Returns `n_candidates` rows of `H × D`.
pub fn sample<M: NoisePredictor + ?Sized, R: RngCore + ?Sized>(
    model: &M,
    ns: &NoiseSchedule,
    schedule: &JumpSchedule,
    anchor: &[f64],
    n_candidates: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    sample_traced(model, ns, schedule, anchor, &[], n_candidates, rng, |_, _| {})
}

/// As [`sample`], additionally holding `fixed` `(row position, value)` pairs at their
/// values throughout the chain, and calling `observe(t, x)` on the initial noise
/// (`t = T+1`) and after every reverse step.
#[allow(clippy::too_many_arguments)]
pub fn sample_traced<M: NoisePredictor + ?Sized, R: RngCore + ?Sized>(
    model: &M,
    ns: &NoiseSchedule,
    schedule: &JumpSchedule,
    anchor: &[f64],
    fixed: &[(usize, f64)],
    n_candidates: usize,
    rng: &mut R,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<Vec<Vec<f64>>> {
    if n_candidates == 0 {
        return Err(Error::validation("n_candidates must be >= 1"));
    }
    let offsets = schedule.time_offsets().into_vec();
    let d = model.token_dim();
    if anchor.len() != d {
        return Err(Error::shape(format!("anchor has {} dims, expected {d}", anchor.len())));
    }
    let row = offsets.len() * d;
    if let Some(&(k, _)) = fixed.iter().find(|(k, _)| *k < d || *k >= row) {
        return Err(Error::shape(format!("fixed position {k} is outside the free tokens")));
    }
    let pin = |x: &mut [f64]| {
        for r in x.chunks_exact_mut(row) {
            for &(k, v) in fixed {
                r[k] = v;
            }
        }
    };
    let mut streams = candidate_streams(rng, n_candidates);
    let mut x = Vec::with_capacity(n_candidates * row);
    for s in streams.iter_mut() {
        let start = x.len();
        x.extend((0..row).map(|_| -> f64 { StandardNormal.sample(s) }));
        x[start..start + d].copy_from_slice(anchor);
    }
    pin(&mut x);
    observe(ns.steps() + 1, &x);
    for t in (1..=ns.steps()).rev() {
        reverse_step(model, &mut x, t, &offsets, ns, &mut streams, Some(anchor))?;
        pin(&mut x);
        observe(t, &x);
    }
    Ok(x.chunks_exact(row).map(|c| c.to_vec()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Linear learning-rate warmup over this many steps.
    pub warmup: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            warmup: 100,
            grad_clip: Some(1.0),
            log_every: 100,
            checkpoint_every: 1000,
            checkpoint: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss at every optimisation step.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    /// Mean of the last `min(100, steps)` losses.
    pub final_smoothed_loss: f64,
    pub param_count: usize,
}

pub const SMOOTHING_WINDOW: usize = 100;

pub fn smoothed_tail(losses: &[f64]) -> f64 {
    let n = losses.len().min(SMOOTHING_WINDOW).max(1);
    let tail = &losses[losses.len().saturating_sub(n)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

/// Scales `g` in place so its Euclidean norm is at most `max_norm`; returns the norm before.
pub fn clip_grad_norm<T: Scalar>(g: &mut [T], max_norm: f64) -> f64 {
    let norm = g
        .iter()
        .map(|v| {
            let v = v.to_f64().unwrap();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64_lossy(max_norm / norm);
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

/// Learning rate after linear warmup.
pub fn warmup_lr(base: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 {
        base
    } else {
        base * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

/// Optimiser settings shared by the auxiliary models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub warmup: usize,
    pub grad_clip: Option<f64>,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 128,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            warmup: 50,
            grad_clip: Some(5.0),
            log_every: 500,
            seed: 0,
        }
    }
}

/// Generic Adam loop: `loss_fn(params, rng)` returns the loss and gradients of one
/// minibatch. Returns the per-step losses.
pub fn fit<T: Scalar>(
    params: &mut [T],
    opts: &FitOptions,
    label: &str,
    mut loss_fn: impl FnMut(&[T], &mut ChaCha8Rng) -> Result<(f64, Vec<T>)>,
) -> Result<Vec<f64>> {
    if opts.steps == 0 || opts.batch_size == 0 {
        return Err(Error::validation("training steps and batch size must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut state = AdamState::new(params.len(), opts.adam);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let (loss, mut grads) = loss_fn(params, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("{label}: loss {loss} at step {step}")));
        }
        if let Some(c) = opts.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        state.config.lr = warmup_lr(opts.adam.lr, opts.warmup, step);
        adam_step(params, &grads, &mut state)?;
        losses.push(loss);
        if opts.log_every > 0 && (step + 1) % opts.log_every == 0 {
            info!("{label} step {:>6}  loss {:.5}  smoothed {:.5}", step + 1, loss, smoothed_tail(&losses));
        }
    }
    Ok(losses)
}

/// Fits the denoiser to plans gathered at `schedule`'s offsets.
pub fn train<T: Scalar>(
    model: &mut DenoiserModel<T>,
    episodes: &[Episode],
    schedule: &JumpSchedule,
    normalizer: &Normalizer,
    ns: &NoiseSchedule,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if opts.steps == 0 || opts.batch_size == 0 {
        return Err(Error::validation("training steps and batch size must be >= 1"));
    }
    let offsets = schedule.time_offsets();
    if offsets.last() > model.config().max_offset {
        return Err(Error::validation(format!(
            "schedule span {} exceeds the model's max_offset {}",
            offsets.last(),
            model.config().max_offset
        )));
    }
    if ns.steps() >= model.config().max_diffusion_step {
        return Err(Error::validation(format!(
            "noise schedule has {} steps but the model accepts steps below {}",
            ns.steps(),
            model.config().max_diffusion_step
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    // Surface span errors before any work.
    sample_plan_batch(episodes, schedule, normalizer, 1, &mut rng.clone())?;

    let mut state = AdamState::new(model.params().len(), opts.adam);
    let mut losses = Vec::with_capacity(opts.steps);
    let meta = |step: usize| {
        serde_json::json!({
            "step": step,
            "schedule": schedule.jumps(),
            "noise_steps": ns.steps(),
            "noise_kind": ns.kind(),
            "x0_clip": ns.x0_clip(),
        })
    };
    for step in 0..opts.steps {
        let batch = sample_plan_batch(episodes, schedule, normalizer, opts.batch_size, &mut rng)?;
        let (loss, mut grads) = match loss_and_grads(model, &batch, ns, &mut rng) {
            Ok(v) => v,
            Err(e) => {
                if let Some(path) = &opts.checkpoint {
                    warn!("step {step}: {e}; saving last good parameters to {}", path.display());
                    model.save(path, meta(step))?;
                }
                return Err(e);
            }
        };
        if let Some(c) = opts.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        state.config.lr = warmup_lr(opts.adam.lr, opts.warmup, step);
        adam_step(&mut model.params_mut().values, &grads, &mut state)?;
        losses.push(loss);
        if opts.log_every > 0 && (step + 1) % opts.log_every == 0 {
            info!("step {:>6}  loss {:.5}  smoothed {:.5}", step + 1, loss, smoothed_tail(&losses));
        }
        if let Some(path) = &opts.checkpoint {
            if opts.checkpoint_every > 0 && (step + 1) % opts.checkpoint_every == 0 {
                model.save(path, meta(step + 1))?;
            }
        }
    }
    if let Some(path) = &opts.checkpoint {
        model.save(path, meta(opts.steps))?;
    }
    Ok(TrainReport {
        initial_loss: losses[0],
        final_smoothed_loss: smoothed_tail(&losses),
        losses,
        param_count: model.params().len(),
    })
}
