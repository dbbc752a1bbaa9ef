//! File-level entry points behind each CLI subcommand. Every command writes its outputs
//! under one directory together with a JSON manifest. Manifests hold the arguments, a
//! summary and the SHA-256 of every output file, and never a timestamp, so repeating a
//! command with the same seeds reproduces the manifest byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::dataset::{fit_normalizer, load_episodes, save_episodes, Normalizer};
use crate::denoiser::{DenoiserModel, EmbedMode};
use crate::diffusion::{train as train_denoiser, NoiseSchedule, ScheduleKind, TrainOptions};
use crate::env::{generate_dataset_with, load_layout, DatasetOptions, MazeLayout};
use crate::error::{Error, Result};
use crate::eval::{
    calibrate_references, compare_schedules, episode_seeds, evaluate, plot, ModelConfig,
    NamedSchedule, PipelineOptions, References, ScoreReport, TrainedPlanner,
};
use crate::guidance::{train_value, ValueModel, ValueTrainOptions};
use crate::invdyn::{train_invdyn, InvDynModel, InvDynTrainOptions};
use crate::planner::{EpisodeOutcome, Planner, PlannerConfig};
use crate::schedule::{JumpSchedule, ScheduleConfig};

pub const MANIFEST: &str = "manifest.json";
pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const LAYOUT_FILE: &str = "layout.txt";
pub const DENOISER_FILE: &str = "denoiser.ckpt";
pub const VALUE_FILE: &str = "value.ckpt";
pub const INVDYN_FILE: &str = "invdyn.ckpt";
pub const NORMALIZER_FILE: &str = "normalizer.json";
pub const SCHEDULE_FILE: &str = "schedule.json";
pub const MODEL_FILE: &str = "model.json";
pub const REFERENCES_FILE: &str = "references.json";
pub const SCORE_FILE: &str = "score.json";
pub const COMPARISON_FILE: &str = "comparison.json";
pub const TRACES_DIR: &str = "traces";

/// What a command did: its arguments, a summary and a digest of every file it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: Value,
    pub summary: Value,
    /// Path relative to the output directory → SHA-256 hex digest.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read_text(path)?)?)
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Writes `manifest_name` under `dir`, digesting each listed output.
fn finish(dir: &Path, manifest_name: &str, command: &str, args: Value, summary: Value, outputs: &[PathBuf]) -> Result<Manifest> {
    let mut digests = BTreeMap::new();
    for p in outputs {
        let rel = p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/");
        digests.insert(rel, sha256_file(p)?);
    }
    let m = Manifest {
        command: command.to_string(),
        args,
        summary,
        outputs: digests,
    };
    write_json(&dir.join(manifest_name), &m)?;
    Ok(m)
}

fn losses_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{}", i + 1, l);
    }
    s
}

pub fn read_losses_csv(path: &Path) -> Result<Vec<f64>> {
    read_text(path)?
        .lines()
        .skip(1)
        .enumerate()
        .map(|(i, line)| {
            line.split(',')
                .nth(1)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Record {
                    path: path.to_path_buf(),
                    line: i + 2,
                    message: format!("expected `step,loss`, found {line:?}"),
                })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenDataArgs {
    pub layout: String,
    pub steps: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub episode_len: usize,
    pub action_noise: f64,
}

/// Generates undirected demonstrations and stores them with the layout they came from.
pub fn gen_data(args: &GenDataArgs) -> Result<Manifest> {
    let layout = load_layout(&args.layout)?;
    let opts = DatasetOptions {
        episode_len: args.episode_len,
        action_noise: args.action_noise,
        ..DatasetOptions::default()
    };
    let episodes = generate_dataset_with(&layout, args.steps, args.seed, &opts)?;
    create_dir(&args.out)?;
    let data = args.out.join(EPISODES_FILE);
    let lay = args.out.join(LAYOUT_FILE);
    save_episodes(&data, &episodes)?;
    layout.save_file(&lay)?;
    let transitions: usize = episodes.iter().map(|e| e.len()).sum();
    let summary = json!({
        "layout": layout.name(),
        "episodes": episodes.len(),
        "transitions": transitions,
        "task_goal_rewards": episodes.iter().map(|e| e.total_return()).sum::<f64>(),
    });
    finish(&args.out, MANIFEST, "gen-data", serde_json::to_value(args)?, summary, &[data, lay])
}

/// Loads a dataset from either an episodes file or a `gen-data` output directory.
pub fn load_data(path: &Path) -> Result<Vec<crate::env::Episode>> {
    if path.is_dir() {
        load_episodes(&path.join(EPISODES_FILE))
    } else {
        load_episodes(path)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub schedule_config: PathBuf,
    pub model_config: Option<PathBuf>,
    /// Overrides the model config's temporal embedding.
    pub embed: Option<EmbedMode>,
    pub out: PathBuf,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

/// Trains the denoiser for one schedule. The output directory becomes a planner
/// directory once `train-aux` has added the value and inverse-dynamics models.
pub fn train(args: &TrainArgs) -> Result<Manifest> {
    let schedule_text = read_text(&args.schedule_config)?;
    let schedule_cfg = ScheduleConfig::from_json(&schedule_text)?;
    let schedule = schedule_cfg.build()?;
    let mut model_cfg = match &args.model_config {
        Some(p) => ModelConfig::from_json(&read_text(p)?)?,
        None => ModelConfig::default(),
    };
    if let Some(e) = args.embed {
        model_cfg.embed = e;
    }
    let episodes = load_data(&args.data)?;
    let normalizer = fit_normalizer(&episodes)?;
    let noise = model_cfg.noise_schedule(&episodes, &normalizer)?;
    let mut model = DenoiserModel::<f32>::new(model_cfg.denoiser_config(&schedule, normalizer.dim()), args.seed)?;

    create_dir(&args.out)?;
    let ckpt = args.out.join(DENOISER_FILE);
    let opts = TrainOptions {
        steps: args.steps,
        batch_size: args.batch_size,
        adam: crate::denoiser::AdamConfig {
            lr: args.lr,
            ..TrainOptions::default().adam
        },
        checkpoint_every: args.checkpoint_every,
        checkpoint: Some(ckpt.clone()),
        seed: args.seed,
        ..TrainOptions::default()
    };
    let report = train_denoiser(&mut model, &episodes, &schedule, &normalizer, &noise, &opts)?;

    let norm = args.out.join(NORMALIZER_FILE);
    let sched = args.out.join(SCHEDULE_FILE);
    let modelf = args.out.join(MODEL_FILE);
    let losses = args.out.join("losses.csv");
    normalizer.save(&norm)?;
    write_text(&sched, &schedule_text)?;
    write_json(&modelf, &model_cfg)?;
    write_text(&losses, &losses_csv(&report.losses))?;

    let schedule_echo: Value = serde_json::from_str(&schedule_text)?;
    let cfg = json!({
        "args": args,
        "schedule_config": schedule_echo,
        "model": model_cfg,
        "train": opts,
    });
    let summary = json!({
        "schedule": schedule.jumps(),
        "offsets": schedule.time_offsets().as_slice(),
        "param_count": report.param_count,
        "initial_loss": report.initial_loss,
        "final_smoothed_loss": report.final_smoothed_loss,
        "losses": report.losses,
    });
    finish(&args.out, MANIFEST, "train", cfg, summary, &[ckpt, norm, sched, modelf, losses])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxKind {
    Value,
    InvDyn,
}

impl AuxKind {
    pub fn name(self) -> &'static str {
        match self {
            AuxKind::Value => "value",
            AuxKind::InvDyn => "invdyn",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainAuxArgs {
    pub data: PathBuf,
    /// Directory written by `train`; the auxiliary model is added to it.
    pub run_dir: PathBuf,
    pub what: AuxKind,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden: usize,
    pub invdyn_mode: crate::invdyn::InvDynMode,
    pub gap_cond: bool,
    /// Train inverse dynamics on every gap `1..=K₁` instead of `{K₁}` alone.
    pub track_gap: bool,
}

pub fn train_aux(args: &TrainAuxArgs) -> Result<Manifest> {
    let schedule = ScheduleConfig::from_json(&read_text(&args.run_dir.join(SCHEDULE_FILE))?)?.build()?;
    let normalizer = Normalizer::load(&args.run_dir.join(NORMALIZER_FILE))?;
    let episodes = load_data(&args.data)?;
    let fit = crate::diffusion::FitOptions {
        steps: args.steps,
        batch_size: args.batch_size,
        adam: crate::denoiser::AdamConfig {
            lr: args.lr,
            ..crate::diffusion::FitOptions::default().adam
        },
        seed: args.seed,
        ..crate::diffusion::FitOptions::default()
    };
    let name = args.what.name();
    let ckpt = args.run_dir.join(format!("{name}.ckpt"));
    let losses_path = args.run_dir.join(format!("{name}_losses.csv"));
    let meta = json!({ "schedule": schedule.jumps() });
    let (losses, options) = match args.what {
        AuxKind::Value => {
            let opts = ValueTrainOptions {
                fit,
                hidden: args.hidden,
                ..ValueTrainOptions::default()
            };
            let (model, losses) = train_value(&episodes, &schedule, &normalizer, &opts)?;
            model.save(&ckpt, meta)?;
            (losses, serde_json::to_value(&opts)?)
        }
        AuxKind::InvDyn => {
            let opts = InvDynTrainOptions {
                fit,
                mode: args.invdyn_mode,
                gap_cond: args.gap_cond,
                hidden: args.hidden,
                ..InvDynTrainOptions::default()
            };
            let gaps = gap_set(&schedule, args.track_gap);
            let (model, losses) = train_invdyn(&episodes, &gaps, &normalizer, &opts)?;
            model.save(&ckpt, meta)?;
            (losses, json!({ "train": opts, "gaps": gaps }))
        }
    };
    write_text(&losses_path, &losses_csv(&losses))?;
    let summary = json!({
        "final_smoothed_loss": crate::diffusion::smoothed_tail(&losses),
        "losses": losses,
        "options": options,
    });
    finish(
        &args.run_dir,
        &format!("manifest-{name}.json"),
        "train-aux",
        serde_json::to_value(args)?,
        summary,
        &[ckpt, losses_path],
    )
}

fn gap_set(schedule: &JumpSchedule, track_gap: bool) -> Vec<usize> {
    PipelineOptions {
        track_gap,
        ..PipelineOptions::default()
    }
    .gap_set(schedule)
}

/// Every model of a planner directory, loaded for evaluation.
pub struct PlannerDir {
    pub schedule: JumpSchedule,
    pub normalizer: Normalizer,
    pub noise: NoiseSchedule,
    pub denoiser: DenoiserModel<f32>,
    pub value: ValueModel,
    pub invdyn: InvDynModel,
}

impl PlannerDir {
    pub fn load(dir: &Path) -> Result<Self> {
        let schedule = ScheduleConfig::from_json(&read_text(&dir.join(SCHEDULE_FILE))?)?.build()?;
        let den_path = dir.join(DENOISER_FILE);
        let meta = checkpoint::load(&den_path)?.header.meta;
        let steps = meta["noise_steps"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint(format!("{}: meta lacks noise_steps", den_path.display())))?;
        let kind: ScheduleKind = serde_json::from_value(meta["noise_kind"].clone())
            .map_err(|e| Error::Checkpoint(format!("{}: bad noise_kind: {e}", den_path.display())))?;
        let missing = |f: &str| {
            let p = dir.join(f);
            if p.exists() {
                Ok(p)
            } else {
                Err(Error::validation(format!(
                    "{} is missing; run train-aux first",
                    p.display()
                )))
            }
        };
        Ok(Self {
            schedule,
            normalizer: Normalizer::load(&dir.join(NORMALIZER_FILE))?,
            noise: NoiseSchedule::new(steps as usize, kind)?.with_x0_clip(meta["x0_clip"].as_f64())?,
            denoiser: DenoiserModel::load(&den_path)?,
            value: ValueModel::load(&missing(VALUE_FILE)?)?,
            invdyn: InvDynModel::load(&missing(INVDYN_FILE)?)?,
        })
    }

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

/// Writes a trained planner in the layout `PlannerDir::load` reads.
pub fn save_planner(dir: &Path, trained: &TrainedPlanner) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let meta = json!({
        "step": trained.denoiser_report.losses.len(),
        "schedule": trained.schedule.jumps(),
        "noise_steps": trained.noise.steps(),
        "noise_kind": trained.noise.kind(),
        "x0_clip": trained.noise.x0_clip(),
    });
    let aux_meta = json!({ "schedule": trained.schedule.jumps() });
    let files = [
        DENOISER_FILE,
        VALUE_FILE,
        INVDYN_FILE,
        NORMALIZER_FILE,
        SCHEDULE_FILE,
        "losses.csv",
        "value_losses.csv",
        "invdyn_losses.csv",
    ]
    .map(|f| dir.join(f));
    trained.denoiser.save(&files[0], meta)?;
    trained.value.save(&files[1], aux_meta.clone())?;
    trained.invdyn.save(&files[2], aux_meta)?;
    trained.normalizer.save(&files[3])?;
    write_json(&files[4], &ScheduleConfig::from_schedule(&trained.schedule))?;
    write_text(&files[5], &losses_csv(&trained.denoiser_report.losses))?;
    write_text(&files[6], &losses_csv(&trained.value_losses))?;
    write_text(&files[7], &losses_csv(&trained.invdyn_losses))?;
    Ok(files.to_vec())
}

/// Writes per-episode numbers and the first `n_traces` traces; returns the files written.
fn save_outcomes(dir: &Path, seeds: &[u64], outcomes: &[EpisodeOutcome], n_traces: usize) -> Result<Vec<PathBuf>> {
    let mut csv = String::from("seed,return,success,steps\n");
    for (s, o) in seeds.iter().zip(outcomes) {
        let _ = writeln!(csv, "{s},{},{},{}", o.total_return, o.success, o.steps);
    }
    let csv_path = dir.join("episodes.csv");
    write_text(&csv_path, &csv)?;
    let mut files = vec![csv_path];
    if n_traces > 0 {
        let tdir = dir.join(TRACES_DIR);
        create_dir(&tdir)?;
        for (s, o) in seeds.iter().zip(outcomes).take(n_traces) {
            let steps = tdir.join(format!("seed_{s}.steps.jsonl"));
            let plans = tdir.join(format!("seed_{s}.plans.jsonl"));
            o.trace.write(&steps, &plans)?;
            files.push(steps);
            files.push(plans);
        }
    }
    Ok(files)
}

/// Loads references from `path`, or calibrates them on the evaluation seeds (at least
/// the minimum count) and stores them in `out`.
fn references_for(path: Option<&Path>, layout: &MazeLayout, seed: u64, episodes: usize, max_steps: usize, out: &Path) -> Result<(References, PathBuf)> {
    let refs = match path {
        Some(p) => References::load(p)?,
        None => calibrate_references(
            layout,
            seed,
            episodes.max(crate::eval::MIN_CALIBRATION_SEEDS),
            max_steps,
        )?,
    };
    let dest = out.join(REFERENCES_FILE);
    refs.save(&dest)?;
    Ok((refs, dest))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    pub checkpoint_dir: PathBuf,
    pub layout: String,
    pub episodes: usize,
    pub seed: u64,
    pub n_candidates: usize,
    /// `None` replans every `K₁` steps.
    pub replan_every: Option<usize>,
    pub max_episode_steps: usize,
    pub track_gap: bool,
    pub goal_clamp: bool,
    pub references: Option<PathBuf>,
    pub out: PathBuf,
    pub traces: usize,
}

pub fn eval(args: &EvalArgs) -> Result<Manifest> {
    if args.episodes == 0 {
        return Err(Error::validation("--episodes must be >= 1"));
    }
    let layout = load_layout(&args.layout)?;
    let dir = PlannerDir::load(&args.checkpoint_dir)?;
    let config = PlannerConfig {
        schedule: dir.schedule.clone(),
        n_candidates: args.n_candidates,
        replan_every: args.replan_every.unwrap_or(dir.schedule.first_jump()),
        max_episode_steps: args.max_episode_steps,
        track_gap: args.track_gap,
        goal_clamp: args.goal_clamp,
    };
    config.validate()?;
    create_dir(&args.out)?;
    let (refs, refs_path) = references_for(args.references.as_deref(), &layout, args.seed, args.episodes, args.max_episode_steps, &args.out)?;
    let seeds = episode_seeds(args.seed, args.episodes);
    let (report, outcomes) = evaluate(&dir.planner(), &layout, &config, &seeds, &refs)?;
    let score = args.out.join(SCORE_FILE);
    write_json(&score, &report)?;
    let mut files = vec![refs_path, score];
    files.extend(save_outcomes(&args.out, &seeds, &outcomes, args.traces)?);
    let summary = summary_of(&report);
    finish(&args.out, MANIFEST, "eval", json!({ "args": args, "layout": layout.name() }), summary, &files)
}

fn summary_of(r: &ScoreReport) -> Value {
    json!({
        "normalized_mean": r.normalized_mean,
        "normalized_se": r.normalized_se,
        "raw_mean": r.raw_mean,
        "raw_se": r.raw_se,
        "success_rate": r.success_rate,
        "n_episodes": r.n_episodes,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrateArgs {
    pub layout: String,
    pub seeds: usize,
    pub seed: u64,
    pub max_episode_steps: usize,
    pub out: PathBuf,
}

pub fn calibrate(args: &CalibrateArgs) -> Result<Manifest> {
    let layout = load_layout(&args.layout)?;
    let refs = calibrate_references(&layout, args.seed, args.seeds, args.max_episode_steps)?;
    create_dir(&args.out)?;
    let path = args.out.join(REFERENCES_FILE);
    refs.save(&path)?;
    finish(&args.out, MANIFEST, "calibrate", serde_json::to_value(args)?, serde_json::to_value(&refs)?, &[path])
}

/// Entry of a schedules file: `[{"name": "uniform", "schedule": {"ranges": [[11, 6]]}}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub name: String,
    pub schedule: ScheduleConfig,
}

pub fn parse_schedules(text: &str) -> Result<Vec<NamedSchedule>> {
    let entries: Vec<ScheduleEntry> =
        serde_json::from_str(text).map_err(|e| Error::validation(format!("bad schedules file: {e}")))?;
    let mut seen = std::collections::BTreeSet::new();
    entries
        .into_iter()
        .map(|e| {
            if e.name.is_empty() || e.name.contains(['/', '\\']) || e.name.starts_with('.') {
                return Err(Error::validation(format!("schedule name {:?} is not a plain file name", e.name)));
            }
            if !seen.insert(e.name.clone()) {
                return Err(Error::validation(format!("duplicate schedule name {:?}", e.name)));
            }
            Ok(NamedSchedule {
                schedule: e.schedule.build().map_err(|err| Error::validation(format!("{}: {err}", e.name)))?,
                name: e.name,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareArgs {
    pub schedules: PathBuf,
    pub data: PathBuf,
    pub layout: String,
    pub pipeline: PipelineOptions,
    pub episodes: usize,
    pub seed: u64,
    pub references: Option<PathBuf>,
    pub out: PathBuf,
    pub traces: usize,
}

/// Trains and evaluates one planner per schedule; each planner directory lands under
/// `out/<name>/` and can be re-evaluated with `eval`.
pub fn compare(args: &CompareArgs) -> Result<Manifest> {
    if args.episodes == 0 {
        return Err(Error::validation("--episodes must be >= 1"));
    }
    let schedules = parse_schedules(&read_text(&args.schedules)?)?;
    crate::eval::check_comparable(&schedules)?;
    let layout = load_layout(&args.layout)?;
    let episodes = load_data(&args.data)?;
    create_dir(&args.out)?;
    let (refs, refs_path) = references_for(
        args.references.as_deref(),
        &layout,
        args.seed,
        args.episodes,
        args.pipeline.max_episode_steps,
        &args.out,
    )?;
    let seeds = episode_seeds(args.seed, args.episodes);
    let mut files = vec![refs_path];
    let cmp = compare_schedules(&schedules, &episodes, &layout, &args.pipeline, &seeds, &refs, |s, trained, outcomes| {
        let dir = args.out.join(&s.name);
        files.extend(save_planner(&dir, trained)?);
        files.extend(save_outcomes(&dir, &seeds, outcomes, args.traces)?);
        Ok(())
    })?;
    let json_path = args.out.join(COMPARISON_FILE);
    let csv_path = args.out.join("comparison.csv");
    let table_path = args.out.join("table.txt");
    write_json(&json_path, &cmp)?;
    write_text(&csv_path, &cmp.to_csv())?;
    write_text(&table_path, &cmp.table())?;
    files.extend([json_path, csv_path, table_path]);
    let summary = json!({
        "rows": cmp.rows.iter().map(|r| json!({ "name": r.name, "score": summary_of(&r.report) })).collect::<Vec<_>>(),
        "mean_difference": cmp.mean_difference,
    });
    finish(&args.out, MANIFEST, "compare", json!({ "args": args, "layout": layout.name() }), summary, &files)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotArgs {
    pub results: PathBuf,
    pub out: PathBuf,
}

fn trace_positions(path: &Path) -> Result<Vec<[f64; 2]>> {
    read_text(path)?
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let step: crate::planner::TraceStep = serde_json::from_str(line).map_err(|e| Error::Record {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok([step.obs[0], step.obs[1]])
        })
        .collect()
}

fn trace_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let tdir = dir.join(TRACES_DIR);
    if !tdir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&tdir)
        .map_err(|e| Error::io(format!("listing {}", tdir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".steps.jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

/// Renders whatever a results directory holds: loss curves for planner directories,
/// trajectory overlays for evaluations and score bars for comparisons. Numbers behind
/// every figure are written as CSV beside it.
pub fn plot(args: &PlotArgs) -> Result<Manifest> {
    let manifest = Manifest::load(&args.results.join(MANIFEST))?;
    create_dir(&args.out)?;
    let mut files = Vec::new();
    let mut emit = |name: &str, text: &str| -> Result<()> {
        let p = args.out.join(name);
        write_text(&p, text)?;
        files.push(p);
        Ok(())
    };
    let layout_name = manifest.args["layout"].as_str().map(str::to_string);
    match manifest.command.as_str() {
        "train" | "train-aux" => {
            let mut series = Vec::new();
            for (label, f) in [("denoiser", "losses.csv"), ("value", "value_losses.csv"), ("invdyn", "invdyn_losses.csv")] {
                let p = args.results.join(f);
                if p.exists() {
                    series.push((label.to_string(), read_losses_csv(&p)?));
                }
            }
            emit("losses.svg", &plot::loss_curves_svg(&series, 50)?)?;
        }
        "eval" => {
            let layout = load_layout(layout_name.as_deref().unwrap_or_default())?;
            let paths = trace_files(&args.results)?
                .iter()
                .map(|p| Ok((p.file_name().unwrap().to_string_lossy().into_owned(), trace_positions(p)?)))
                .collect::<Result<Vec<_>>>()?;
            emit("trajectories.svg", &plot::trajectory_svg(&layout, &paths))?;
            emit("episodes.csv", &read_text(&args.results.join("episodes.csv"))?)?;
        }
        "compare" => {
            let cmp: crate::eval::Comparison = serde_json::from_str(&read_text(&args.results.join(COMPARISON_FILE))?)?;
            emit("scores.svg", &plot::score_bars_svg(&cmp))?;
            emit("scores.csv", &cmp.to_csv())?;
            let layout = load_layout(layout_name.as_deref().unwrap_or_default())?;
            let mut losses = Vec::new();
            let mut paths = Vec::new();
            for row in &cmp.rows {
                let dir = args.results.join(&row.name);
                losses.push((row.name.clone(), read_losses_csv(&dir.join("losses.csv"))?));
                if let Some(first) = trace_files(&dir)?.first() {
                    paths.push((row.name.clone(), trace_positions(first)?));
                }
            }
            emit("losses.svg", &plot::loss_curves_svg(&losses, 50)?)?;
            emit("trajectories.svg", &plot::trajectory_svg(&layout, &paths))?;
        }
        other => {
            return Err(Error::validation(format!("nothing to plot for a {other:?} results directory")));
        }
    }
    finish(&args.out, MANIFEST, "plot", serde_json::to_value(args)?, json!({ "source": manifest.command }), &files)
}
