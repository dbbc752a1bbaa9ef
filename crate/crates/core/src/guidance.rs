//! Trajectory value regression and best-of-N candidate selection.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{sample_plan_batch, Normalizer};
use crate::diffusion::{fit, FitOptions};
use crate::env::Episode;
use crate::error::{Error, Result};
use crate::nn::{Init, Mlp, ParamBuilder, ParamSet};
use crate::schedule::JumpSchedule;

pub const CHECKPOINT_KIND: &str = "value";
pub const DEFAULT_GAMMA: f64 = 0.99;

/// `Σ γ^i r_i`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, &r| r + gamma * acc)
}

/// Anything that scores `count` trajectories of `H × D` laid out row-major.
pub trait TrajectoryScorer {
    /// Token count the scorer requires, when fixed.
    fn horizon(&self) -> Option<usize> {
        None
    }

    fn score(&self, trajectories: &[f64], count: usize, offsets: &[usize]) -> Result<Vec<f64>>;
}

/// Index of the largest score; ties go to the lowest index and NaN never wins unless
/// every score is NaN.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if scores[b].is_nan() && !s.is_nan() => best = Some(i),
            Some(b) if s > scores[b] => best = Some(i),
            _ => {}
        }
    }
    best
}

/// Scores every candidate and picks the best. Scores are returned in candidate order.
pub fn mc_select<S: TrajectoryScorer + ?Sized>(
    candidates: &[Vec<f64>],
    offsets: &[usize],
    scorer: &S,
) -> Result<(usize, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::validation("mc_select needs at least one candidate"));
    }
    let row = candidates[0].len();
    if candidates.iter().any(|c| c.len() != row) {
        return Err(Error::shape("candidates differ in length"));
    }
    let flat: Vec<f64> = candidates.concat();
    let scores = scorer.score(&flat, candidates.len(), offsets)?;
    if scores.len() != candidates.len() {
        return Err(Error::shape(format!(
            "scorer returned {} scores for {} candidates",
            scores.len(),
            candidates.len()
        )));
    }
    Ok((argmax_first(&scores).expect("non-empty"), scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueConfig {
    pub horizon: usize,
    pub token_dim: usize,
    /// Offsets enter the input divided by this scale.
    pub max_offset: usize,
    pub hidden: usize,
    pub gamma: f64,
    /// Targets are standardised with these before regression.
    pub target_mean: f64,
    pub target_std: f64,
}

impl ValueConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.token_dim == 0 || self.hidden == 0 || self.max_offset == 0 {
            return Err(Error::validation("value model dimensions must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::validation(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.target_std > 0.0) {
            return Err(Error::validation("target_std must be positive"));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.horizon * (self.token_dim + 1)
    }
}

/// MLP from a flattened normalized plan plus its scaled offsets to a scalar value.
#[derive(Debug, Clone)]
pub struct ValueModel {
    config: ValueConfig,
    params: ParamSet<f32>,
    mlp: Mlp,
}

impl ValueModel {
    pub fn new(config: ValueConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::<f32, _>::new(&mut rng);
        let h = config.hidden;
        let mlp = Mlp::build(&mut b, "value", &[config.input_dim(), h, h, 1], None, Init::Zeros);
        Ok(Self {
            params: b.finish(),
            config,
            mlp,
        })
    }

    pub fn config(&self) -> &ValueConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    fn features(&self, trajectories: &[f64], count: usize, offsets: &[usize]) -> Result<Vec<f32>> {
        let (h, d) = (self.config.horizon, self.config.token_dim);
        if offsets.len() != h || trajectories.len() != count * h * d {
            return Err(Error::shape(format!(
                "value model expects {h} tokens of {d} dims; got {} offsets and {} values for {count} plans",
                offsets.len(),
                trajectories.len()
            )));
        }
        let scale = self.config.max_offset as f64;
        let mut x = Vec::with_capacity(count * self.config.input_dim());
        for row in trajectories.chunks_exact(h * d) {
            x.extend(row.iter().map(|&v| v as f32));
            x.extend(offsets.iter().map(|&o| (o as f64 / scale) as f32));
        }
        Ok(x)
    }

    /// Predicted discounted return of each plan.
    pub fn predict(&self, trajectories: &[f64], count: usize, offsets: &[usize]) -> Result<Vec<f64>> {
        let x = self.features(trajectories, count, offsets)?;
        let out = self.mlp.forward(&self.params.values, &x, count).output;
        Ok(out
            .iter()
            .map(|&v| v as f64 * self.config.target_std + self.config.target_mean)
            .collect())
    }

    /// Standardised-target MSE and its gradients.
    fn loss_and_grads(&self, params: &[f32], trajectories: &[f64], targets: &[f64], offsets: &[usize]) -> Result<(f64, Vec<f32>)> {
        let count = targets.len();
        let x = self.features(trajectories, count, offsets)?;
        let cache = self.mlp.forward(params, &x, count);
        let mut loss = 0.0;
        let mut dout = vec![0.0_f32; count];
        for (i, (&p, &y)) in cache.output.iter().zip(targets).enumerate() {
            let z = (y - self.config.target_mean) / self.config.target_std;
            let diff = p as f64 - z;
            loss += diff * diff;
            dout[i] = (2.0 * diff / count as f64) as f32;
        }
        let mut g = vec![0.0_f32; params.len()];
        self.mlp.backward(params, &cache, &dout, &mut g);
        Ok((loss / count as f64, g))
    }

    /// Regresses onto minibatches from `next_batch(rng) -> (plans, targets, offsets)`.
    pub fn fit_with(
        &mut self,
        opts: &FitOptions,
        mut next_batch: impl FnMut(&mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>, Vec<usize>)>,
    ) -> Result<Vec<f64>> {
        let mut values = std::mem::take(&mut self.params.values);
        let result = fit(&mut values, opts, "value", |p, rng| {
            let (traj, targets, offsets) = next_batch(rng)?;
            self.loss_and_grads(p, &traj, &targets, &offsets)
        });
        self.params.values = values;
        result
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, &self.config, meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        ck.expect_kind(CHECKPOINT_KIND)?;
        let mut model = Self::new(ck.config()?, 0)?;
        model.params.load_values(&ck.specs, &ck.values)?;
        Ok(model)
    }
}

impl TrajectoryScorer for ValueModel {
    fn horizon(&self) -> Option<usize> {
        Some(self.config.horizon)
    }

    fn score(&self, trajectories: &[f64], count: usize, offsets: &[usize]) -> Result<Vec<f64>> {
        self.predict(trajectories, count, offsets)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTrainOptions {
    pub fit: FitOptions,
    pub hidden: usize,
    pub gamma: f64,
    /// Windows drawn to estimate the target mean and spread.
    pub calibration_windows: usize,
}

impl Default for ValueTrainOptions {
    fn default() -> Self {
        Self {
            fit: FitOptions::default(),
            hidden: 256,
            gamma: DEFAULT_GAMMA,
            calibration_windows: 4096,
        }
    }
}

fn window_returns(episodes: &[Episode], sources: &[(usize, usize)], span: usize, gamma: f64) -> Vec<f64> {
    sources
        .iter()
        .map(|&(e, t)| discounted_return(&episodes[e].rewards[t..t + span], gamma))
        .collect()
}

/// Regresses the discounted return of the `span` environment steps after each anchor
/// onto the normalized plan gathered at the schedule's offsets.
pub fn train_value(
    episodes: &[Episode],
    schedule: &JumpSchedule,
    normalizer: &Normalizer,
    opts: &ValueTrainOptions,
) -> Result<(ValueModel, Vec<f64>)> {
    let span = schedule.total_span();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.fit.seed ^ 0x5eed_0f_1a);
    let calib = sample_plan_batch(episodes, schedule, normalizer, opts.calibration_windows.max(2), &mut rng)?;
    let returns = window_returns(episodes, &calib.sources, span, opts.gamma);
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / returns.len() as f64;
    let config = ValueConfig {
        horizon: schedule.horizon_tokens(),
        token_dim: normalizer.dim(),
        max_offset: span,
        hidden: opts.hidden,
        gamma: opts.gamma,
        target_mean: mean,
        target_std: var.sqrt().max(1.0),
    };
    let mut model = ValueModel::new(config, opts.fit.seed)?;
    let batch_size = opts.fit.batch_size;
    let losses = model.fit_with(&opts.fit, |rng| {
        let b = sample_plan_batch(episodes, schedule, normalizer, batch_size, rng)?;
        let targets = window_returns(episodes, &b.sources, span, opts.gamma);
        Ok((b.trajectories, targets, b.offsets))
    })?;
    Ok((model, losses))
}

/// Draws a random plan batch of `count` rows with `rng`; test and benchmarking helper.
pub fn random_plans<R: Rng + ?Sized>(count: usize, horizon: usize, dim: usize, rng: &mut R) -> Vec<f64> {
    (0..count * horizon * dim).map(|_| rng.random_range(-2.0..2.0)).collect()
}
