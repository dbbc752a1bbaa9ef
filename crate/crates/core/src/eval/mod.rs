//! Scoring against calibrated references, planner training pipelines and schedule
//! comparisons.

pub mod plot;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{fit_normalizer, normalized_extent, Normalizer};
use crate::denoiser::{DenoiserConfig, DenoiserModel, EmbedMode};
use crate::diffusion::{train, NoiseSchedule, ScheduleKind, TrainOptions, TrainReport, DEFAULT_DIFFUSION_STEPS};
use crate::env::{Episode, MazeLayout, PointMaze, WaypointController, OBS_DIM};
use crate::error::{Error, Result};
use crate::guidance::{train_value, ValueModel, ValueTrainOptions};
use crate::invdyn::{train_invdyn, InvDynModel, InvDynTrainOptions};
use crate::planner::{EpisodeOutcome, Planner, PlannerConfig};
use crate::schedule::JumpSchedule;

pub const MIN_CALIBRATION_SEEDS: usize = 100;
pub const DEFAULT_EVAL_EPISODES: usize = 100;
pub const DEFAULT_MAX_EPISODE_STEPS: usize = 100;

/// `100 · (raw − random) / (expert − random)`.
pub fn normalized_score(raw: f64, random_ref: f64, expert_ref: f64) -> Result<f64> {
    if !(expert_ref > random_ref) {
        return Err(Error::validation(format!(
            "expert reference {expert_ref} must exceed random reference {random_ref}"
        )));
    }
    Ok(100.0 * (raw - random_ref) / (expert_ref - random_ref))
}

/// Mean and standard error of the mean (zero for a single value).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-layout random-policy and scripted-expert returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct References {
    pub layout: String,
    pub base_seed: u64,
    pub n_seeds: usize,
    pub max_episode_steps: usize,
    pub random_ref: f64,
    pub random_se: f64,
    pub random_success: f64,
    pub expert_ref: f64,
    pub expert_se: f64,
    pub expert_success: f64,
}

impl References {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn normalize(&self, raw: f64) -> Result<f64> {
        normalized_score(raw, self.random_ref, self.expert_ref)
    }
}

/// Seeds `base, base+1, …` used for every evaluation episode.
pub fn episode_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base + i).collect()
}

/// Rolls out `policy(state, rng)` from the start state drawn by `seed`.
fn rollout(
    layout: &MazeLayout,
    seed: u64,
    max_steps: usize,
    mut policy: impl FnMut(&PointMaze, &mut ChaCha8Rng) -> [f64; 2],
) -> (f64, bool) {
    let mut env = PointMaze::new(layout.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    env.reset(&mut rng);
    let mut total = 0.0;
    for _ in 0..max_steps {
        let a = policy(&env, &mut rng);
        let r = env.step(a);
        total += r.reward;
        if r.done {
            return (total, true);
        }
    }
    (total, false)
}

pub fn random_policy_return(layout: &MazeLayout, seed: u64, max_steps: usize) -> (f64, bool) {
    rollout(layout, seed, max_steps, |_, rng| {
        [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]
    })
}

pub fn expert_return(layout: &MazeLayout, seed: u64, max_steps: usize) -> (f64, bool) {
    let mut ctrl = WaypointController::new(0.0);
    ctrl.set_goal(layout, layout.goal_cell(), layout.goal_position());
    rollout(layout, seed, max_steps, |env, rng| ctrl.act(env.layout(), env.state(), rng))
}

/// Mean returns of the uniform-random policy and the noise-free scripted controller
/// over the same start states the planner is evaluated on.
pub fn calibrate_references(layout: &MazeLayout, base_seed: u64, n_seeds: usize, max_episode_steps: usize) -> Result<References> {
    if n_seeds < MIN_CALIBRATION_SEEDS {
        return Err(Error::validation(format!(
            "calibration needs at least {MIN_CALIBRATION_SEEDS} seeds, got {n_seeds}"
        )));
    }
    let seeds = episode_seeds(base_seed, n_seeds);
    let run = |f: &dyn Fn(u64) -> (f64, bool)| {
        let out: Vec<(f64, bool)> = seeds.iter().map(|&s| f(s)).collect();
        let returns: Vec<f64> = out.iter().map(|o| o.0).collect();
        let succ = out.iter().filter(|o| o.1).count() as f64 / n_seeds as f64;
        let (m, se) = mean_se(&returns);
        (m, se, succ)
    };
    let (random_ref, random_se, random_success) = run(&|s| random_policy_return(layout, s, max_episode_steps));
    let (expert_ref, expert_se, expert_success) = run(&|s| expert_return(layout, s, max_episode_steps));
    Ok(References {
        layout: layout.name().to_string(),
        base_seed,
        n_seeds,
        max_episode_steps,
        random_ref,
        random_se,
        random_success,
        expert_ref,
        expert_se,
        expert_success,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub raw_mean: f64,
    pub raw_se: f64,
    pub success_rate: f64,
    pub normalized_mean: f64,
    pub normalized_se: f64,
    pub n_episodes: usize,
    pub mean_steps: f64,
    pub returns: Vec<f64>,
    pub config: serde_json::Value,
}

impl ScoreReport {
    pub fn from_outcomes(outcomes: &[EpisodeOutcome], refs: &References, config: serde_json::Value) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::validation("a score report needs at least one episode"));
        }
        let returns: Vec<f64> = outcomes.iter().map(|o| o.total_return).collect();
        let (raw_mean, raw_se) = mean_se(&returns);
        let scale = 100.0 / (refs.expert_ref - refs.random_ref);
        Ok(Self {
            raw_mean,
            raw_se,
            success_rate: outcomes.iter().filter(|o| o.success).count() as f64 / outcomes.len() as f64,
            normalized_mean: refs.normalize(raw_mean)?,
            normalized_se: raw_se * scale,
            n_episodes: outcomes.len(),
            mean_steps: outcomes.iter().map(|o| o.steps as f64).sum::<f64>() / outcomes.len() as f64,
            returns,
            config,
        })
    }
}

/// Denoiser architecture and noise chain, independent of the schedule and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed: EmbedMode,
    pub noise_steps: usize,
    pub noise_kind: ScheduleKind,
    /// Clip the denoised estimate to the extent of the normalized training data.
    pub clip_denoised: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = DenoiserConfig::desk_default(OBS_DIM, 1, DEFAULT_DIFFUSION_STEPS);
        Self {
            model_dim: d.model_dim,
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            embed: d.embed,
            noise_steps: DEFAULT_DIFFUSION_STEPS,
            noise_kind: ScheduleKind::Cosine,
            clip_denoised: true,
        }
    }
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::validation(format!("bad model config: {e}")))
    }


    pub fn denoiser_config(&self, schedule: &JumpSchedule, token_dim: usize) -> DenoiserConfig {
        DenoiserConfig {
            model_dim: self.model_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            token_dim,
            max_offset: schedule.total_span(),
            max_diffusion_step: self.noise_steps + 1,
            embed: self.embed,
        }
    }

    /// The noise chain, with its `x̂₀` clip fitted to `episodes` when enabled.
    pub fn noise_schedule(&self, episodes: &[Episode], normalizer: &Normalizer) -> Result<NoiseSchedule> {
        let clip = self.clip_denoised.then(|| normalized_extent(episodes, normalizer));
        NoiseSchedule::new(self.noise_steps, self.noise_kind)?.with_x0_clip(clip)
    }
}

/// Architecture and training settings shared by every planner in an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub model: ModelConfig,
    pub denoiser: TrainOptions,
    pub value: ValueTrainOptions,
    pub invdyn: InvDynTrainOptions,
    pub n_candidates: usize,
    /// `None` replans every `K₁` steps.
    pub replan_every: Option<usize>,
    pub max_episode_steps: usize,
    pub track_gap: bool,
    pub goal_clamp: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            denoiser: TrainOptions::default(),
            value: ValueTrainOptions::default(),
            invdyn: InvDynTrainOptions::default(),
            n_candidates: 16,
            replan_every: None,
            max_episode_steps: DEFAULT_MAX_EPISODE_STEPS,
            track_gap: false,
            goal_clamp: false,
        }
    }
}

impl PipelineOptions {
    /// Gives every trained component its own stream derived from one seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.denoiser.seed = seed;
        self.value.fit.seed = seed.wrapping_add(1);
        self.invdyn.fit.seed = seed.wrapping_add(2);
        self
    }

    pub fn planner_config(&self, schedule: &JumpSchedule) -> PlannerConfig {
        PlannerConfig {
            schedule: schedule.clone(),
            n_candidates: self.n_candidates,
            replan_every: self.replan_every.unwrap_or(schedule.first_jump()),
            max_episode_steps: self.max_episode_steps,
            track_gap: self.track_gap,
            goal_clamp: self.goal_clamp,
        }
    }

    /// Gaps the inverse dynamics must cover for this schedule.
    pub fn gap_set(&self, schedule: &JumpSchedule) -> Vec<usize> {
        let k1 = schedule.first_jump();
        if self.track_gap {
            (1..=k1).collect()
        } else {
            vec![k1]
        }
    }

}

/// Every model of one trained planner.
#[derive(Debug, Clone)]
pub struct TrainedPlanner {
    pub schedule: JumpSchedule,
    pub normalizer: Normalizer,
    pub noise: NoiseSchedule,
    pub denoiser: DenoiserModel<f32>,
    pub value: ValueModel,
    pub invdyn: InvDynModel,
    pub config: PlannerConfig,
    pub denoiser_report: TrainReport,
    pub value_losses: Vec<f64>,
    pub invdyn_losses: Vec<f64>,
}

impl TrainedPlanner {
    pub fn planner(&self) -> Planner<'_> {
        Planner {
            denoiser: &self.denoiser,
            noise: &self.noise,
            value: &self.value,
            actions: &self.invdyn,
            normalizer: &self.normalizer,
        }
    }
}

pub fn train_planner(episodes: &[Episode], schedule: &JumpSchedule, opts: &PipelineOptions) -> Result<TrainedPlanner> {
    let config = opts.planner_config(schedule);
    config.validate()?;
    let normalizer = fit_normalizer(episodes)?;
    let noise = opts.model.noise_schedule(episodes, &normalizer)?;
    let mut denoiser = DenoiserModel::<f32>::new(
        opts.model.denoiser_config(schedule, normalizer.dim()),
        opts.denoiser.seed,
    )?;
    log::info!("training denoiser for schedule {schedule}");
    let denoiser_report = train(&mut denoiser, episodes, schedule, &normalizer, &noise, &opts.denoiser)?;
    log::info!("training value model");
    let (value, value_losses) = train_value(episodes, schedule, &normalizer, &opts.value)?;
    log::info!("training inverse dynamics");
    let (invdyn, invdyn_losses) = train_invdyn(episodes, &opts.gap_set(schedule), &normalizer, &opts.invdyn)?;
    Ok(TrainedPlanner {
        schedule: schedule.clone(),
        normalizer,
        noise,
        denoiser,
        value,
        invdyn,
        config,
        denoiser_report,
        value_losses,
        invdyn_losses,
    })
}

/// Runs one episode per seed and summarizes them.
pub fn evaluate(planner: &Planner<'_>, layout: &MazeLayout, config: &PlannerConfig, seeds: &[u64], refs: &References) -> Result<(ScoreReport, Vec<EpisodeOutcome>)> {
    if layout.name() != refs.layout {
        log::warn!("references were calibrated on {} but evaluating {}", refs.layout, layout.name());
    }
    let mut env = PointMaze::new(layout.clone());
    let mut outcomes = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let o = planner.run_episode(&mut env, config, seed)?;
        debug_assert_eq!(o.final_obs.len(), OBS_DIM);
        outcomes.push(o);
    }
    let echo = serde_json::json!({
        "layout": layout.name(),
        "planner": config,
        "seeds": [seeds.first(), seeds.last()],
    });
    Ok((ScoreReport::from_outcomes(&outcomes, refs, echo)?, outcomes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSchedule {
    pub name: String,
    pub schedule: JumpSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub schedule: JumpSchedule,
    pub offsets: Vec<usize>,
    pub report: ScoreReport,
    pub final_denoiser_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// `mean_difference[i][j]` = normalized mean of row `i` minus that of row `j`.
    pub mean_difference: Vec<Vec<f64>>,
}

impl Comparison {
    pub fn from_rows(rows: Vec<ComparisonRow>) -> Self {
        let mean_difference = rows
            .iter()
            .map(|a| {
                rows.iter()
                    .map(|b| a.report.normalized_mean - b.report.normalized_mean)
                    .collect()
            })
            .collect();
        Self { rows, mean_difference }
    }

    /// Plain-text table, one row per schedule.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<18} {:<22} {:>10} {:>8} {:>8} {:>6}\n",
            "name", "schedule", "score", "se", "success", "n"
        );
        for r in &self.rows {
            s += &format!(
                "{:<18} {:<22} {:>10.2} {:>8.2} {:>8.3} {:>6}\n",
                r.name,
                r.schedule.to_string(),
                r.report.normalized_mean,
                r.report.normalized_se,
                r.report.success_rate,
                r.report.n_episodes
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,schedule,span,normalized_mean,normalized_se,raw_mean,raw_se,success_rate,n_episodes,mean_steps\n");
        for r in &self.rows {
            s += &format!(
                "{},\"{}\",{},{},{},{},{},{},{},{}\n",
                r.name,
                r.schedule,
                r.schedule.total_span(),
                r.report.normalized_mean,
                r.report.normalized_se,
                r.report.raw_mean,
                r.report.raw_se,
                r.report.success_rate,
                r.report.n_episodes,
                r.report.mean_steps
            );
        }
        s
    }
}

/// Equal token counts keep model capacity matched across the schedules being compared.
pub fn check_comparable(schedules: &[NamedSchedule]) -> Result<()> {
    if schedules.len() < 2 {
        return Err(Error::validation("a comparison needs at least two schedules"));
    }
    let h = schedules[0].schedule.horizon_tokens();
    if let Some(bad) = schedules.iter().find(|s| s.schedule.horizon_tokens() != h) {
        return Err(Error::validation(format!(
            "schedule {} has {} tokens but {} has {h}; compared schedules must share H",
            bad.name,
            bad.schedule.horizon_tokens(),
            schedules[0].name
        )));
    }
    Ok(())
}

/// Trains one planner per schedule with identical options and evaluates each on the same
/// seeds. `on_trained` sees each planner before evaluation (for checkpointing).
pub fn compare_schedules(
    schedules: &[NamedSchedule],
    episodes: &[Episode],
    layout: &MazeLayout,
    opts: &PipelineOptions,
    seeds: &[u64],
    refs: &References,
    mut on_trained: impl FnMut(&NamedSchedule, &TrainedPlanner, &[EpisodeOutcome]) -> Result<()>,
) -> Result<Comparison> {
    check_comparable(schedules)?;
    for s in schedules {
        opts.planner_config(&s.schedule).validate().map_err(|e| {
            Error::validation(format!("schedule {}: {e}", s.name))
        })?;
    }
    let mut rows = Vec::with_capacity(schedules.len());
    for s in schedules {
        let trained = train_planner(episodes, &s.schedule, opts)?;
        let (report, outcomes) = evaluate(&trained.planner(), layout, &trained.config, seeds, refs)?;
        log::info!(
            "{}: normalized {:.2} ± {:.2}, success {:.3}",
            s.name,
            report.normalized_mean,
            report.normalized_se,
            report.success_rate
        );
        on_trained(s, &trained, &outcomes)?;
        rows.push(ComparisonRow {
            name: s.name.clone(),
            offsets: s.schedule.time_offsets().into_vec(),
            schedule: s.schedule.clone(),
            report,
            final_denoiser_loss: trained.denoiser_report.final_smoothed_loss,
        });
    }
    Ok(Comparison::from_rows(rows))
}
