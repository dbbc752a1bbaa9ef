//! Closed-loop control: sample anchored plans, keep the best, act toward its first token,
//! replan on a fixed cadence.

use std::io::Write;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Normalizer;
use crate::diffusion::{sample_traced, NoisePredictor, NoiseSchedule};
use crate::env::{EnvState, PointMaze, OBS_DIM};
use crate::error::{Error, Result};
use crate::guidance::{mc_select, TrajectoryScorer};
use crate::invdyn::InvDynModel;
use crate::schedule::JumpSchedule;

/// Seed offset separating the planner's stream from the environment reset stream.
const PLAN_STREAM: u64 = 0x9a11_7e5d;

/// Produces the executed action from a state and a target `gap` steps ahead.
pub trait ActionPredictor {
    /// Gaps the predictor accepts, ascending.
    fn gaps(&self) -> &[usize];

    fn predict(&self, s: &[f64], s_next: &[f64], gap: usize, rng: &mut dyn RngCore) -> Result<Vec<f64>>;
}

impl ActionPredictor for InvDynModel {
    fn gaps(&self) -> &[usize] {
        &self.config().gaps
    }

    fn predict(&self, s: &[f64], s_next: &[f64], gap: usize, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        self.predict_action(s, s_next, gap, rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub schedule: JumpSchedule,
    pub n_candidates: usize,
    pub replan_every: usize,
    pub max_episode_steps: usize,
    /// Between replans, aim at plan token 1 with the remaining gap instead of `K₁`.
    #[serde(default)]
    pub track_gap: bool,
    /// Hold the position of the final plan token at the task goal while sampling.
    #[serde(default)]
    pub goal_clamp: bool,
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates == 0 {
            return Err(Error::validation("n_candidates must be >= 1"));
        }
        let k1 = self.schedule.first_jump();
        if self.replan_every == 0 || self.replan_every > k1 {
            return Err(Error::validation(format!(
                "replan_every {} must lie in 1..={k1} (the first jump)",
                self.replan_every
            )));
        }
        Ok(())
    }

    /// Gap used to reach plan token 1 at `step` steps since the last replan.
    pub fn gap_at(&self, since_replan: usize) -> usize {
        let k1 = self.schedule.first_jump();
        if self.track_gap {
            k1 - since_replan
        } else {
            k1
        }
    }
}

/// Everything a planner needs at decision time.
pub struct Planner<'a> {
    pub denoiser: &'a dyn NoisePredictor,
    pub noise: &'a NoiseSchedule,
    pub value: &'a dyn TrajectoryScorer,
    pub actions: &'a dyn ActionPredictor,
    pub normalizer: &'a Normalizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    /// Winning plan, denormalized, one row per token.
    pub plan: Vec<Vec<f64>>,
    /// Every candidate, denormalized.
    pub candidates: Vec<Vec<Vec<f64>>>,
    pub scores: Vec<f64>,
    pub selected: usize,
}

impl Planner<'_> {
    fn check_shapes(&self, config: &PlannerConfig, obs_dim: usize) -> Result<()> {
        let d = self.denoiser.token_dim();
        if d != self.normalizer.dim() || d != obs_dim {
            return Err(Error::shape(format!(
                "denoiser token dim {d}, normalizer dim {}, observation dim {obs_dim} disagree",
                self.normalizer.dim()
            )));
        }
        let span = config.schedule.total_span();
        if let Some(m) = self.denoiser.max_offset() {
            if span > m {
                return Err(Error::shape(format!(
                    "schedule span {span} exceeds the denoiser's max offset {m}"
                )));
            }
        }
        let h = config.schedule.horizon_tokens();
        if let Some(vh) = self.value.horizon() {
            if vh != h {
                return Err(Error::shape(format!(
                    "value model expects {vh} tokens but the schedule has {h}"
                )));
            }
        }
        Ok(())
    }

    /// Samples candidates anchored at `obs`, scores them and returns the best.
    pub fn plan(&self, obs: &[f64], goal: Option<[f64; 2]>, config: &PlannerConfig, rng: &mut dyn RngCore) -> Result<PlanOutcome> {
        config.validate()?;
        self.check_shapes(config, obs.len())?;
        let d = obs.len();
        let h = config.schedule.horizon_tokens();
        let anchor = self.normalizer.normalize(obs);
        let fixed: Vec<(usize, f64)> = match (config.goal_clamp, goal) {
            (true, Some(g)) => {
                let mut raw = obs.to_vec();
                raw[0] = g[0];
                raw[1] = g[1];
                let n = self.normalizer.normalize(&raw);
                vec![((h - 1) * d, n[0]), ((h - 1) * d + 1, n[1])]
            }
            _ => Vec::new(),
        };
        let offsets = config.schedule.time_offsets().into_vec();
        let candidates = sample_traced(
            self.denoiser,
            self.noise,
            &config.schedule,
            &anchor,
            &fixed,
            config.n_candidates,
            rng,
            |_, _| {},
        )?;
        let (selected, scores) = mc_select(&candidates, &offsets, self.value)?;
        let candidates: Vec<Vec<Vec<f64>>> = candidates
            .iter()
            .map(|c| c.chunks_exact(d).map(|t| self.normalizer.denormalize(t)).collect())
            .collect();
        Ok(PlanOutcome {
            plan: candidates[selected].clone(),
            candidates,
            scores,
            selected,
        })
    }

    /// Trained gap nearest to `gap`; ties go to the larger gap.
    fn usable_gap(&self, gap: usize) -> usize {
        let gaps = self.actions.gaps();
        *gaps
            .iter()
            .min_by_key(|&&g| (g.abs_diff(gap), std::cmp::Reverse(g)))
            .unwrap_or(&gap)
    }

    /// One closed-loop episode from the start state drawn by `seed`.
    pub fn run_episode(&self, env: &mut PointMaze, config: &PlannerConfig, seed: u64) -> Result<EpisodeOutcome> {
        config.validate()?;
        let mut env_rng = ChaCha8Rng::seed_from_u64(seed);
        env.reset(&mut env_rng);
        self.continue_episode(env, config, seed)
    }

    /// One closed-loop episode from `start` instead of a drawn start state.
    pub fn run_from_state(&self, env: &mut PointMaze, start: EnvState, config: &PlannerConfig, seed: u64) -> Result<EpisodeOutcome> {
        config.validate()?;
        env.set_state(start);
        self.continue_episode(env, config, seed)
    }

    fn continue_episode(&self, env: &mut PointMaze, config: &PlannerConfig, seed: u64) -> Result<EpisodeOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PLAN_STREAM);
        let mut obs = env.observation().to_vec();
        let goal = env.layout().goal_position();
        let mut trace = Trace::default();
        let mut total = 0.0;
        let mut success = false;
        let mut target: Vec<f64> = Vec::new();
        for step in 0..config.max_episode_steps {
            let since = step % config.replan_every;
            let replanned = since == 0;
            if replanned {
                let outcome = self
                    .plan(&obs, Some(goal), config, &mut rng)
                    .map_err(|e| at_step(step, e))?;
                target = outcome.plan[1].clone();
                trace.plans.push(PlanRecord {
                    t: step,
                    selected: outcome.selected,
                    score: outcome.scores[outcome.selected],
                    plan: outcome.plan,
                });
            }
            let gap = self.usable_gap(config.gap_at(since));
            let action = self
                .actions
                .predict(&obs, &target, gap, &mut rng)
                .map_err(|e| at_step(step, e))?;
            if action.len() != 2 {
                return Err(Error::shape(format!("step {step}: action has {} dims", action.len())));
            }
            let r = env.step([action[0], action[1]]);
            total += r.reward;
            trace.steps.push(TraceStep {
                t: step,
                obs: obs.clone(),
                action,
                reward: r.reward,
                replanned,
            });
            obs = r.observation.to_vec();
            if r.done {
                success = true;
                break;
            }
        }
        debug_assert_eq!(obs.len(), OBS_DIM);
        Ok(EpisodeOutcome {
            total_return: total,
            success,
            steps: trace.steps.len(),
            final_obs: obs,
            trace,
        })
    }
}

fn at_step(step: usize, e: Error) -> Error {
    match e {
        Error::Validation(m) => Error::Validation(format!("step {step}: {m}")),
        Error::Shape(m) => Error::Shape(format!("step {step}: {m}")),
        Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub replanned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub t: usize,
    pub selected: usize,
    pub score: f64,
    pub plan: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub steps: Vec<TraceStep>,
    pub plans: Vec<PlanRecord>,
}

impl Trace {
    /// Writes the per-step JSON Lines file and, alongside it, the plans file.
    pub fn write(&self, steps_path: &Path, plans_path: &Path) -> Result<()> {
        fn jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
            let f = std::fs::File::create(path)
                .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
            let mut w = std::io::BufWriter::new(f);
            for r in rows {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n")
                    .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            }
            w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
        }
        jsonl(steps_path, &self.steps)?;
        jsonl(plans_path, &self.plans)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub total_return: f64,
    pub success: bool,
    pub steps: usize,
    pub final_obs: Vec<f64>,
    pub trace: Trace,
}
