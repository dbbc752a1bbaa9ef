use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mdd_core::commands::{self, AuxKind, Manifest};
use mdd_core::denoiser::EmbedMode;
use mdd_core::error::{Error, Result};
use mdd_core::eval::{ModelConfig, PipelineOptions, DEFAULT_EVAL_EPISODES, DEFAULT_MAX_EPISODE_STEPS};
use mdd_core::invdyn::InvDynMode;

/// Mixed-density diffusion planning on a point maze.
#[derive(Parser)]
#[command(name = "mdd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate undirected demonstrations on a maze layout.
    GenData {
        /// Built-in layout name or path to a layout text file.
        #[arg(long)]
        layout: String,
        /// Total transitions to generate.
        #[arg(long, default_value_t = 200_000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        episode_len: usize,
        #[arg(long, default_value_t = 0.15)]
        action_noise: f64,
    },
    /// Train the trajectory denoiser for one jump schedule.
    Train {
        /// Dataset file or gen-data output directory.
        #[arg(long)]
        data: PathBuf,
        /// JSON schedule config, e.g. {"ranges": [[11, 6]]}.
        #[arg(long)]
        schedule_config: PathBuf,
        /// JSON model config (model_dim, n_layers, n_heads, embed, noise_steps, noise_kind).
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long, value_enum)]
        embed: Option<Embed>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        checkpoint_every: usize,
    },
    /// Train the value model or the inverse dynamics for a trained planner directory.
    TrainAux {
        #[arg(long)]
        data: PathBuf,
        /// Output directory of `train`.
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_enum)]
        what: Aux,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        hidden: usize,
        #[arg(long, value_enum, default_value_t = Mode::Diffusion)]
        invdyn_mode: Mode,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        gap_cond: Switch,
        /// Cover every gap 1..=K1 so the planner can use --track-gap.
        #[arg(long)]
        track_gap: bool,
    },
    /// Evaluate a planner directory over episode seeds.
    Eval {
        #[arg(long)]
        checkpoint_dir: PathBuf,
        #[arg(long)]
        layout: String,
        #[arg(long, default_value_t = DEFAULT_EVAL_EPISODES)]
        episodes: usize,
        /// First episode seed; episodes use consecutive seeds.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        planner: PlannerFlags,
        /// References file from `calibrate`; calibrated on the episode seeds when absent.
        #[arg(long)]
        references: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Number of episode traces to write.
        #[arg(long, default_value_t = 5)]
        traces: usize,
    },
    /// Measure random-policy and scripted-expert reference returns.
    Calibrate {
        #[arg(long)]
        layout: String,
        #[arg(long, default_value_t = 100)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_MAX_EPISODE_STEPS)]
        max_episode_steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one planner per schedule on identical seeds.
    Compare {
        /// JSON list of {"name": ..., "schedule": {"ranges": ...}}.
        #[arg(long)]
        schedules: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        layout: String,
        #[arg(long, default_value_t = DEFAULT_EVAL_EPISODES)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        references: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        traces: usize,
        #[command(flatten)]
        training: TrainingFlags,
        #[command(flatten)]
        planner: PlannerFlags,
    },
    /// Render SVG figures and CSV tables for a results directory.
    Plot {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PlannerFlags {
    #[arg(long, default_value_t = 16)]
    candidates: usize,
    /// Environment steps between replans; defaults to the first jump K1.
    #[arg(long)]
    replan_every: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MAX_EPISODE_STEPS)]
    max_episode_steps: usize,
    /// Between replans, aim at plan token 1 with the remaining gap.
    #[arg(long)]
    track_gap: bool,
    /// Pin the final plan token's position to the goal.
    #[arg(long)]
    goal_clamp: bool,
}

#[derive(Args)]
struct TrainingFlags {
    /// JSON model config; defaults to the desk-scale architecture.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long, value_enum)]
    embed: Option<Embed>,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 2000)]
    aux_steps: usize,
    #[arg(long, value_enum, default_value_t = Mode::Diffusion)]
    invdyn_mode: Mode,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    gap_cond: Switch,
    /// Seed for model initialisation and minibatches.
    #[arg(long, default_value_t = 0)]
    train_seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Embed {
    Index,
    Offset,
}

impl From<Embed> for EmbedMode {
    fn from(e: Embed) -> Self {
        match e {
            Embed::Index => EmbedMode::Index,
            Embed::Offset => EmbedMode::Offset,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Aux {
    Value,
    Invdyn,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Mode {
    Diffusion,
    Regression,
}

impl From<Mode> for InvDynMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Diffusion => InvDynMode::Diffusion,
            Mode::Regression => InvDynMode::Regression,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Switch {
    On,
    Off,
}

fn read_model_config(path: &Option<PathBuf>) -> Result<ModelConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
            ModelConfig::from_json(&text)
        }
        None => Ok(ModelConfig::default()),
    }
}

fn pipeline(t: &TrainingFlags, p: &PlannerFlags) -> Result<PipelineOptions> {
    let mut o = PipelineOptions {
        model: read_model_config(&t.model_config)?,
        n_candidates: p.candidates,
        replan_every: p.replan_every,
        max_episode_steps: p.max_episode_steps,
        track_gap: p.track_gap,
        goal_clamp: p.goal_clamp,
        ..PipelineOptions::default()
    }
    .with_seed(t.train_seed);
    if let Some(e) = t.embed {
        o.model.embed = e.into();
    }
    o.denoiser.steps = t.steps;
    o.denoiser.batch_size = t.batch_size;
    o.value.fit.steps = t.aux_steps;
    o.invdyn.fit.steps = t.aux_steps;
    o.invdyn.mode = t.invdyn_mode.into();
    o.invdyn.gap_cond = t.gap_cond == Switch::On;
    Ok(o)
}

fn run(command: Command) -> Result<(Manifest, PathBuf)> {
    Ok(match command {
        Command::GenData { layout, steps, seed, out, episode_len, action_noise } => {
            let args = commands::GenDataArgs { layout, steps, seed, out, episode_len, action_noise };
            (commands::gen_data(&args)?, args.out)
        }
        Command::Train {
            data,
            schedule_config,
            model_config,
            embed,
            out,
            steps,
            batch_size,
            lr,
            seed,
            checkpoint_every,
        } => {
            let args = commands::TrainArgs {
                data,
                schedule_config,
                model_config,
                embed: embed.map(Into::into),
                out,
                steps,
                batch_size,
                lr,
                seed,
                checkpoint_every,
            };
            (commands::train(&args)?, args.out)
        }
        Command::TrainAux {
            data,
            run_dir,
            what,
            steps,
            batch_size,
            lr,
            seed,
            hidden,
            invdyn_mode,
            gap_cond,
            track_gap,
        } => {
            let args = commands::TrainAuxArgs {
                data,
                run_dir,
                what: match what {
                    Aux::Value => AuxKind::Value,
                    Aux::Invdyn => AuxKind::InvDyn,
                },
                steps,
                batch_size,
                lr,
                seed,
                hidden,
                invdyn_mode: invdyn_mode.into(),
                gap_cond: gap_cond == Switch::On,
                track_gap,
            };
            (commands::train_aux(&args)?, args.run_dir)
        }
        Command::Eval { checkpoint_dir, layout, episodes, seed, planner, references, out, traces } => {
            let args = commands::EvalArgs {
                checkpoint_dir,
                layout,
                episodes,
                seed,
                n_candidates: planner.candidates,
                replan_every: planner.replan_every,
                max_episode_steps: planner.max_episode_steps,
                track_gap: planner.track_gap,
                goal_clamp: planner.goal_clamp,
                references,
                out,
                traces,
            };
            (commands::eval(&args)?, args.out)
        }
        Command::Calibrate { layout, seeds, seed, max_episode_steps, out } => {
            let args = commands::CalibrateArgs { layout, seeds, seed, max_episode_steps, out };
            (commands::calibrate(&args)?, args.out)
        }
        Command::Compare {
            schedules,
            data,
            layout,
            episodes,
            seed,
            references,
            out,
            traces,
            training,
            planner,
        } => {
            let args = commands::CompareArgs {
                schedules,
                data,
                layout,
                pipeline: pipeline(&training, &planner)?,
                episodes,
                seed,
                references,
                out,
                traces,
            };
            (commands::compare(&args)?, args.out)
        }
        Command::Plot { results, out } => {
            let args = commands::PlotArgs { results, out };
            (commands::plot(&args)?, args.out)
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok((manifest, dir)) => {
            if manifest.command == "compare" {
                if let Ok(table) = std::fs::read_to_string(dir.join("table.txt")) {
                    print!("{table}");
                }
            } else if manifest.command == "eval" {
                println!("{}", manifest.summary);
            }
            println!("{} done; manifest in {}", manifest.command, dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
