//! Analytic vs. central-difference gradient comparison for small denoisers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::{loss_and_grads_with, loss_with, DenoiserConfig, DenoiserModel};
use crate::dataset::PlanBatch;
use crate::diffusion::{NoiseSchedule, ScheduleKind};

const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute rather than relative terms.
const REL_FLOOR: f64 = 1e-6;
const PARAM_STD: f64 = 0.2;
const BATCH: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !(t.max_rel_error < self.tolerance))
    }
}

/// Checks every parameter of a randomly initialised 64-bit model with a fixed seed.
pub fn grad_check(config: &DenoiserConfig, tolerance: f64) -> GradCheckReport {
    grad_check_with_hook(config, tolerance, 0, |_| {})
}

/// As [`grad_check`], with `hook` applied to the analytic gradient before comparison.
pub fn grad_check_with_hook(
    config: &DenoiserConfig,
    tolerance: f64,
    seed: u64,
    hook: impl FnOnce(&mut [f64]),
) -> GradCheckReport {
    let failed = |name: &str| GradCheckReport {
        tolerance,
        max_rel_error: f64::INFINITY,
        passed: false,
        tensors: vec![TensorCheck {
            name: name.to_string(),
            max_rel_error: f64::INFINITY,
            worst_index: 0,
            analytic: f64::NAN,
            numeric: f64::NAN,
        }],
    };
    let mut model = match DenoiserModel::<f64>::random_dense(config.clone(), seed, PARAM_STD) {
        Ok(m) => m,
        Err(e) => return failed(&format!("invalid config: {e}")),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let m = config.max_offset;
    let offsets = if m >= 2 { vec![0, m / 2, m] } else { vec![0, m] };
    let (h, d) = (offsets.len(), config.token_dim);
    let mut anchor_mask = vec![false; h];
    anchor_mask[0] = true;
    let batch = PlanBatch {
        trajectories: (0..BATCH * h * d).map(|_| StandardNormal.sample(&mut rng)).collect(),
        batch: BATCH,
        horizon: h,
        dim: d,
        offsets,
        anchor_mask,
        sources: vec![(0, 0); BATCH],
    };
    let ns = match NoiseSchedule::new(config.max_diffusion_step.saturating_sub(1).max(1), ScheduleKind::Cosine) {
        Ok(ns) => ns,
        Err(e) => return failed(&format!("noise schedule: {e}")),
    };
    let steps: Vec<usize> = (0..BATCH)
        .map(|_| rng.random_range(0..config.max_diffusion_step).min(ns.steps()))
        .collect();
    let eps: Vec<f64> = (0..batch.trajectories.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();

    let mut analytic = match loss_and_grads_with(&model, &batch, &ns, &steps, &eps) {
        Ok((_, g)) => g,
        Err(e) => return failed(&format!("analytic gradient: {e}")),
    };
    hook(&mut analytic);

    let specs = model.params().specs.clone();
    let mut tensors = Vec::with_capacity(specs.len());
    for spec in &specs {
        let mut worst = TensorCheck {
            name: spec.name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in spec.range() {
            let orig = model.params().values[k];
            model.params_mut().values[k] = orig + FD_STEP;
            let up = loss_with(&model, &batch, &ns, &steps, &eps).unwrap_or(f64::NAN);
            model.params_mut().values[k] = orig - FD_STEP;
            let down = loss_with(&model, &batch, &ns, &steps, &eps).unwrap_or(f64::NAN);
            model.params_mut().values[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            let rel = if rel.is_nan() { f64::INFINITY } else { rel };
            if rel > worst.max_rel_error || k == spec.offset {
                worst.max_rel_error = rel;
                worst.worst_index = k - spec.offset;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        tensors.push(worst);
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    GradCheckReport {
        tolerance,
        max_rel_error,
        passed: max_rel_error < tolerance,
        tensors,
    }
}
