//! Gap-conditioned inverse dynamics: the action that moves `s` toward `s'` observed `k`
//! steps later.
//!
//! Two heads share one interface. The diffusion head runs a short ε-prediction chain
//! over the action vector conditioned on `(s, s', k)`; the regression head predicts the
//! action directly. Both clamp to `[-1, 1]`.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{sample_invdyn_batch, InvDynBatch, Normalizer};
use crate::diffusion::{fit, reverse_step, FitOptions, NoisePredictor, NoiseSchedule, ScheduleKind};
use crate::env::Episode;
use crate::error::{Error, Result};
use crate::nn::{sinusoid, Init, Mlp, ParamBuilder, ParamSet, Slot};

pub const CHECKPOINT_KIND: &str = "invdyn";
const STEP_FEATURES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InvDynMode {
    #[default]
    Diffusion,
    Regression,
}

impl std::str::FromStr for InvDynMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion" => Ok(Self::Diffusion),
            "regression" => Ok(Self::Regression),
            other => Err(Error::validation(format!(
                "unknown inverse-dynamics mode {other:?} (expected diffusion or regression)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvDynConfig {
    pub state_dim: usize,
    pub act_dim: usize,
    /// Gaps seen in training, ascending; prediction for any other gap is an error.
    pub gaps: Vec<usize>,
    pub mode: InvDynMode,
    /// When false the gap embedding is left out of the input.
    pub gap_cond: bool,
    pub hidden: usize,
    pub gap_embed_dim: usize,
    pub diffusion_steps: usize,
    pub normalizer: Normalizer,
}

impl InvDynConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.act_dim == 0 || self.hidden == 0 || self.gap_embed_dim == 0 {
            return Err(Error::validation("inverse-dynamics dimensions must be positive"));
        }
        if self.gaps.is_empty() || self.gaps.contains(&0) {
            return Err(Error::validation("gap set must be non-empty with gaps >= 1"));
        }
        if self.gaps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation("gap set must be strictly ascending"));
        }
        if self.mode == InvDynMode::Diffusion && self.diffusion_steps == 0 {
            return Err(Error::validation("diffusion mode needs at least one step"));
        }
        if self.normalizer.dim() != self.state_dim {
            return Err(Error::shape(format!(
                "normalizer has {} dims but state_dim is {}",
                self.normalizer.dim(),
                self.state_dim
            )));
        }
        Ok(())
    }

    fn cond_dim(&self) -> usize {
        2 * self.state_dim + if self.gap_cond { self.gap_embed_dim } else { 0 }
    }

    fn input_dim(&self) -> usize {
        match self.mode {
            InvDynMode::Regression => self.cond_dim(),
            InvDynMode::Diffusion => self.cond_dim() + self.act_dim + STEP_FEATURES,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InvDynModel {
    config: InvDynConfig,
    params: ParamSet<f32>,
    gap_table: Slot,
    mlp: Mlp,
    noise: Option<NoiseSchedule>,
}

/// Conditioning rows `s ⊕ s' ⊕ emb(k)` for a batch (states already normalized).
struct Conditioning {
    rows: Vec<f32>,
    gap_index: Vec<usize>,
}

impl InvDynModel {
    pub fn new(config: InvDynConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::<f32, _>::new(&mut rng);
        let gap_table = b.add(
            "gap_embedding",
            &[config.gaps.len(), config.gap_embed_dim],
            Init::TruncNormal(1.0),
        );
        let h = config.hidden;
        let mlp = Mlp::build(&mut b, "invdyn", &[config.input_dim(), h, h, config.act_dim], None, Init::Zeros);
        let noise = match config.mode {
            // Actions live in [-1, 1], so the denoised estimate is clipped there.
            InvDynMode::Diffusion => {
                Some(NoiseSchedule::new(config.diffusion_steps, ScheduleKind::Cosine)?.with_x0_clip(Some(1.0))?)
            }
            InvDynMode::Regression => None,
        };
        Ok(Self {
            params: b.finish(),
            config,
            gap_table,
            mlp,
            noise,
        })
    }

    pub fn config(&self) -> &InvDynConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn gap_embedding(&self, gap: usize) -> Result<&[f32]> {
        let i = self.gap_index(gap)?;
        let e = self.config.gap_embed_dim;
        Ok(&self.params.values[self.gap_table.start + i * e..self.gap_table.start + (i + 1) * e])
    }

    fn gap_index(&self, gap: usize) -> Result<usize> {
        self.config.gaps.binary_search(&gap).map_err(|_| {
            Error::validation(format!(
                "gap {gap} was not in the trained gap set {:?}",
                self.config.gaps
            ))
        })
    }

    fn conditioning(&self, p: &[f32], s: &[f64], s_next: &[f64], gaps: &[usize]) -> Result<Conditioning> {
        let d = self.config.state_dim;
        let e = self.config.gap_embed_dim;
        let mut rows = Vec::with_capacity(gaps.len() * self.config.cond_dim());
        let mut gap_index = Vec::with_capacity(gaps.len());
        for (i, &g) in gaps.iter().enumerate() {
            let gi = self.gap_index(g)?;
            rows.extend(s[i * d..(i + 1) * d].iter().map(|&v| v as f32));
            rows.extend(s_next[i * d..(i + 1) * d].iter().map(|&v| v as f32));
            if self.config.gap_cond {
                rows.extend_from_slice(&p[self.gap_table.start + gi * e..self.gap_table.start + (gi + 1) * e]);
            }
            gap_index.push(gi);
        }
        Ok(Conditioning { rows, gap_index })
    }

    /// Network input: conditioning, then (diffusion mode) noisy action and step features.
    fn inputs(&self, cond: &Conditioning, noisy: Option<(&[f64], &[usize])>) -> Vec<f32> {
        let c = self.config.cond_dim();
        let a = self.config.act_dim;
        let n = cond.gap_index.len();
        let mut x = Vec::with_capacity(n * self.config.input_dim());
        for i in 0..n {
            x.extend_from_slice(&cond.rows[i * c..(i + 1) * c]);
            if let Some((act, steps)) = noisy {
                x.extend(act[i * a..(i + 1) * a].iter().map(|&v| v as f32));
                x.extend(sinusoid(steps[i] as f64, STEP_FEATURES, 100.0).iter().map(|&v| v as f32));
            }
        }
        x
    }

    /// Accumulates input-gradient columns belonging to the gap embedding into the table.
    fn backprop_gap(&self, dinput: &[f32], cond: &Conditioning, g: &mut [f32]) {
        if !self.config.gap_cond {
            return;
        }
        let (d, e, w) = (self.config.state_dim, self.config.gap_embed_dim, self.config.input_dim());
        for (i, &gi) in cond.gap_index.iter().enumerate() {
            let src = &dinput[i * w + 2 * d..i * w + 2 * d + e];
            let dst = &mut g[self.gap_table.start + gi * e..self.gap_table.start + (gi + 1) * e];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += v;
            }
        }
    }

    fn loss_and_grads<R: Rng + ?Sized>(&self, p: &[f32], batch: &InvDynBatch, rng: &mut R) -> Result<(f64, Vec<f32>)> {
        let a = self.config.act_dim;
        if batch.act_dim != a || batch.state_dim != self.config.state_dim {
            return Err(Error::shape("inverse-dynamics batch does not match the model"));
        }
        let cond = self.conditioning(p, &batch.s, &batch.s_next, &batch.gap)?;
        let n = batch.batch;
        let (x, target) = match &self.noise {
            None => (self.inputs(&cond, None), batch.a.clone()),
            Some(ns) => {
                let steps: Vec<usize> = (0..n).map(|_| rng.random_range(1..=ns.steps())).collect();
                let eps: Vec<f64> = (0..n * a).map(|_| StandardNormal.sample(rng)).collect();
                let mut noisy = Vec::with_capacity(n * a);
                for i in 0..n {
                    let ab = ns.alpha_bar(steps[i])?;
                    for j in 0..a {
                        noisy.push(ab.sqrt() * batch.a[i * a + j] + (1.0 - ab).sqrt() * eps[i * a + j]);
                    }
                }
                (self.inputs(&cond, Some((&noisy, &steps))), eps)
            }
        };
        let cache = self.mlp.forward(p, &x, n);
        let count = (n * a) as f64;
        let mut loss = 0.0;
        let dout: Vec<f32> = cache
            .output
            .iter()
            .zip(&target)
            .map(|(&pv, &t)| {
                let diff = pv as f64 - t;
                loss += diff * diff;
                (2.0 * diff / count) as f32
            })
            .collect();
        let mut g = vec![0.0_f32; p.len()];
        let dinput = self.mlp.backward(p, &cache, &dout, &mut g);
        self.backprop_gap(&dinput, &cond, &mut g);
        Ok((loss / count, g))
    }

    /// Action for raw observations `s → s_next` seen `gap` steps apart, in `[-1, 1]^A`.
    pub fn predict_action<R: RngCore + ?Sized>(&self, s: &[f64], s_next: &[f64], gap: usize, rng: &mut R) -> Result<Vec<f64>> {
        let d = self.config.state_dim;
        if s.len() != d || s_next.len() != d {
            return Err(Error::shape(format!(
                "inverse dynamics expects {d}-dim states, got {} and {}",
                s.len(),
                s_next.len()
            )));
        }
        let ns = self.config.normalizer.normalize(s);
        let nn = self.config.normalizer.normalize(s_next);
        let cond = self.conditioning(&self.params.values, &ns, &nn, &[gap])?;
        let raw = match &self.noise {
            None => {
                let x = self.inputs(&cond, None);
                self.mlp
                    .forward(&self.params.values, &x, 1)
                    .output
                    .iter()
                    .map(|&v| v as f64)
                    .collect()
            }
            Some(schedule) => {
                let mut stream = [ChaCha8Rng::seed_from_u64(rng.next_u64())];
                let mut act: Vec<f64> = (0..self.config.act_dim)
                    .map(|_| StandardNormal.sample(&mut stream[0]))
                    .collect();
                let chain = ActionChain { model: self, cond: &cond };
                for t in (1..=schedule.steps()).rev() {
                    reverse_step(&chain, &mut act, t, &[0], schedule, &mut stream, None)?;
                }
                act
            }
        };
        if let Some(v) = raw.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("inverse dynamics produced {v}")));
        }
        Ok(raw.iter().map(|v| v.clamp(-1.0, 1.0)).collect())
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

/// The action-space ε-predictor for one fixed conditioning row.
struct ActionChain<'a> {
    model: &'a InvDynModel,
    cond: &'a Conditioning,
}

impl NoisePredictor for ActionChain<'_> {
    fn token_dim(&self) -> usize {
        self.model.config.act_dim
    }

    fn predict_noise(&self, x: &[f64], batch: usize, _: &[usize], step: &[usize]) -> Result<Vec<f64>> {
        debug_assert_eq!(batch, 1);
        let input = self.model.inputs(self.cond, Some((x, step)));
        let out = self.model.mlp.forward(&self.model.params.values, &input, 1).output;
        Ok(out.iter().map(|&v| v as f64).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvDynTrainOptions {
    pub fit: FitOptions,
    pub mode: InvDynMode,
    pub gap_cond: bool,
    pub hidden: usize,
    pub gap_embed_dim: usize,
    pub diffusion_steps: usize,
}

impl Default for InvDynTrainOptions {
    fn default() -> Self {
        Self {
            fit: FitOptions::default(),
            mode: InvDynMode::Diffusion,
            gap_cond: true,
            hidden: 256,
            gap_embed_dim: 16,
            diffusion_steps: 10,
        }
    }
}

pub fn train_invdyn(
    episodes: &[Episode],
    gap_set: &[usize],
    normalizer: &Normalizer,
    opts: &InvDynTrainOptions,
) -> Result<(InvDynModel, Vec<f64>)> {
    let mut gaps = gap_set.to_vec();
    gaps.sort_unstable();
    gaps.dedup();
    let act_dim = episodes
        .iter()
        .find_map(|e| e.actions.first().map(Vec::len))
        .ok_or_else(|| Error::validation("dataset has no transitions"))?;
    let config = InvDynConfig {
        state_dim: normalizer.dim(),
        act_dim,
        gaps: gaps.clone(),
        mode: opts.mode,
        gap_cond: opts.gap_cond,
        hidden: opts.hidden,
        gap_embed_dim: opts.gap_embed_dim,
        diffusion_steps: opts.diffusion_steps,
        normalizer: normalizer.clone(),
    };
    let mut model = InvDynModel::new(config, opts.fit.seed)?;
    // Surface gap-span errors before training.
    sample_invdyn_batch(episodes, &gaps, normalizer, 1, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut values = std::mem::take(&mut model.params.values);
    let losses = fit(&mut values, &opts.fit, "invdyn", |p, rng| {
        let batch = sample_invdyn_batch(episodes, &gaps, normalizer, opts.fit.batch_size, rng)?;
        model.loss_and_grads(p, &batch, rng)
    });
    model.params.values = values;
    Ok((model, losses?))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 1D system `s_{t+1} = s_t + a_t` with uniform random actions.
    fn integrator_episodes(n: usize, len: usize, seed: u64) -> Vec<Episode> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut s = rng.random_range(-2.0..2.0);
                let mut obs = vec![vec![s]];
                let mut act = Vec::new();
                for _ in 0..len {
                    let a: f64 = rng.random_range(-1.0..1.0);
                    s += a;
                    obs.push(vec![s]);
                    act.push(vec![a]);
                }
                Episode {
                    observations: obs,
                    actions: act,
                    rewards: vec![0.0; len],
                    terminated: false,
                }
            })
            .collect()
    }

    fn opts(mode: InvDynMode, steps: usize) -> InvDynTrainOptions {
        InvDynTrainOptions {
            fit: FitOptions {
                steps,
                batch_size: 128,
                seed: 1,
                ..FitOptions::default()
            },
            mode,
            hidden: 64,
            ..InvDynTrainOptions::default()
        }
    }

    fn trained(mode: InvDynMode, steps: usize) -> (InvDynModel, Vec<Episode>) {
        let eps = integrator_episodes(40, 50, 2);
        let norm = crate::dataset::fit_normalizer(&eps).unwrap();
        let (m, _) = train_invdyn(&eps, &[1], &norm, &opts(mode, steps)).unwrap();
        (m, eps)
    }

    #[test]
    fn regression_recovers_the_integrator() {
        let (m, _) = trained(InvDynMode::Regression, 1500);
        let held_out = integrator_episodes(5, 40, 77);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut se = 0.0;
        let mut n = 0.0;
        for e in &held_out {
            for t in 0..e.len() {
                let a = m.predict_action(&e.observations[t], &e.observations[t + 1], 1, &mut rng).unwrap();
                se += (a[0] - e.actions[t][0]).powi(2);
                n += 1.0;
            }
        }
        assert!(se / n < 1e-3, "validation mse {}", se / n);
        let still = m.predict_action(&[0.3], &[0.3], 1, &mut rng).unwrap();
        assert!(still[0].abs() < 0.05, "{still:?}");
    }

    #[test]
    fn diffusion_head_learns_the_integrator() {
        let (m, _) = trained(InvDynMode::Diffusion, 2000);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let still = m.predict_action(&[0.3], &[0.3], 1, &mut rng).unwrap();
        assert!(still[0].abs() < 0.05, "{still:?}");
        let push = m.predict_action(&[0.0], &[0.5], 1, &mut rng).unwrap();
        assert!((push[0] - 0.5).abs() < 0.1, "{push:?}");
    }

    #[test]
    fn outputs_are_clamped_and_reproducible() {
        let (m, _) = trained(InvDynMode::Diffusion, 20);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            m.predict_action(&[0.0], &[40.0], 1, &mut rng).unwrap()
        };
        assert_eq!(run(5), run(5));
        let (r, _) = trained(InvDynMode::Regression, 300);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for target in [-50.0, -3.0, 0.0, 3.0, 50.0] {
            let a = r.predict_action(&[0.0], &[target], 1, &mut rng).unwrap();
            assert!(a[0] >= -1.0 && a[0] <= 1.0);
        }
        assert!(run(6).iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn unseen_gap_is_an_error() {
        let (m, _) = trained(InvDynMode::Regression, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = m.predict_action(&[0.0], &[1.0], 2, &mut rng).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn gap_embeddings_are_distinct_and_training_is_seeded() {
        let eps = integrator_episodes(10, 30, 4);
        let norm = crate::dataset::fit_normalizer(&eps).unwrap();
        let (a, la) = train_invdyn(&eps, &[3, 1, 2], &norm, &opts(InvDynMode::Diffusion, 10)).unwrap();
        let (b, lb) = train_invdyn(&eps, &[1, 2, 3], &norm, &opts(InvDynMode::Diffusion, 10)).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.params(), b.params());
        let fresh = InvDynModel::new(a.config().clone(), 0).unwrap();
        for (g, h) in [(1, 2), (1, 3), (2, 3)] {
            assert_ne!(fresh.gap_embedding(g).unwrap(), fresh.gap_embedding(h).unwrap());
        }
    }

    #[test]
    fn gap_conditioning_off_drops_the_embedding_input() {
        let eps = integrator_episodes(10, 30, 4);
        let norm = crate::dataset::fit_normalizer(&eps).unwrap();
        let mut o = opts(InvDynMode::Regression, 200);
        o.gap_cond = false;
        let (m, _) = train_invdyn(&eps, &[1, 2], &norm, &o).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a1 = m.predict_action(&[0.0], &[1.0], 1, &mut rng).unwrap();
        let a2 = m.predict_action(&[0.0], &[1.0], 2, &mut rng).unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (m, _) = trained(InvDynMode::Diffusion, 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.ckpt");
        m.save(&p, serde_json::Value::Null).unwrap();
        let back = InvDynModel::load(&p).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
    }
}
