//! Acceptance suite. Each criterion prints one PASS or FAIL line; the process exits
//! non-zero when any criterion fails. Pass substrings as arguments to run a subset,
//! e.g. `cargo test --test acceptance -- schedule kitchen`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mdd_core::commands::{self, AuxKind};
use mdd_core::dataset::fit_normalizer;
use mdd_core::denoiser::{grad_check, DenoiserConfig, DenoiserModel, EmbedMode};
use mdd_core::diffusion::{
    q_sample, sample_traced, train, NoiseSchedule, ScheduleKind, TrainOptions, SMOOTHING_WINDOW,
};
use mdd_core::env::{generate_dataset, MazeLayout};
use mdd_core::error::Result;
use mdd_core::eval::{
    calibrate_references, compare_schedules, episode_seeds, ModelConfig, NamedSchedule,
    PipelineOptions, DEFAULT_MAX_EPISODE_STEPS,
};
use mdd_core::guidance::{mc_select, TrajectoryScorer};
use mdd_core::invdyn::InvDynMode;
use mdd_core::schedule::{JumpSchedule, ScheduleConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Outcome of one criterion: pass flag and a one-line detail.
type Verdict = (bool, String);

fn within(elapsed: Duration, limit: Duration) -> (bool, String) {
    (elapsed <= limit, format!("{:.1}s of {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()))
}

/// Every jump vector of length `n` over `1..=k_max`, in lexicographic order.
fn all_jump_vectors(n: usize, k_max: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = k_max.pow(n as u32);
    (0..total).map(move |mut code| {
        (0..n)
            .map(|_| {
                let k = code % k_max + 1;
                code /= k_max;
                k
            })
            .collect()
    })
}

fn schedule_algebra() -> Result<Verdict> {
    let start = Instant::now();
    let mut cases = 0usize;
    let mut failures = Vec::new();
    for n in 1..=7 {
        for jumps in all_jump_vectors(n, 5) {
            cases += 1;
            let s = JumpSchedule::new(jumps.clone())?;
            let offsets = s.time_offsets();
            let sum: usize = jumps.iter().sum();
            let checks = [
                ("horizon", s.horizon_tokens() == n + 1 && offsets.len() == n + 1),
                ("anchor at 0", offsets[0] == 0),
                ("strictly increasing", offsets.windows(2).all(|w| w[0] < w[1])),
                ("differences reproduce jumps", offsets.jumps() == jumps),
                ("last offset is the sum", offsets.last() == sum && s.total_span() == sum),
                ("span covers every token", sum >= n),
                ("ranges round trip", JumpSchedule::from_ranges(&s.ranges())? == s),
                ("config round trip", ScheduleConfig::from_schedule(&s).build()? == s),
                (
                    "json round trip",
                    serde_json::from_str::<JumpSchedule>(&serde_json::to_string(&s)?)? == s,
                ),
            ];
            if let Some((name, _)) = checks.iter().find(|(_, ok)| !ok) {
                failures.push(format!("{jumps:?}: {name}"));
            }
        }
    }
    for h in 2..=8 {
        for k in 1..=5 {
            cases += 1;
            if JumpSchedule::from_ranges(&[(h - 1, k)])? != JumpSchedule::uniform(h, k)? {
                failures.push(format!("uniform({h},{k}) differs from its single range"));
            }
        }
    }
    let (fast, time) = within(start.elapsed(), Duration::from_secs(10));
    Ok((
        failures.is_empty() && fast && cases == 97_655 + 35,
        format!("{cases} cases, {} failures {:?}, {time}", failures.len(), failures.first()),
    ))
}

fn kitchen_fidelity() -> Result<Verdict> {
    let s = JumpSchedule::from_ranges(&[(10, 4), (21, 6)])?;
    let expected_last = 10 * 4 + 21 * 6;
    let h = s.horizon_tokens();
    let last = s.time_offsets().last();
    let pattern = s.jumps()[..10].iter().all(|&k| k == 4) && s.jumps()[10..].iter().all(|&k| k == 6);
    Ok((
        h == 32 && last == expected_last && last == 166 && pattern,
        format!("H={h}, final offset {last}"),
    ))
}

fn gradient_exactness() -> Result<Verdict> {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    let mut failed = Vec::new();
    for layers in 1..=2 {
        for heads in 1..=2 {
            let config = DenoiserConfig {
                model_dim: 8,
                n_layers: layers,
                n_heads: heads,
                token_dim: 2,
                max_offset: 6,
                max_diffusion_step: 11,
                embed: EmbedMode::Offset,
            };
            let r = grad_check(&config, 1e-4);
            worst = worst.max(r.max_rel_error);
            if !r.passed {
                failed.push(format!("{layers}x{heads}"));
            }
        }
    }
    let (fast, time) = within(start.elapsed(), Duration::from_secs(60));
    Ok((
        failed.is_empty() && worst < 1e-4 && fast,
        format!("max relative error {worst:.2e} over 4 corners, failing {failed:?}, {time}"),
    ))
}

/// ᾱ_t of the squared-cosine profile with each β clipped at 0.999, computed directly.
fn cosine_alpha_bar(t: usize, steps: usize) -> f64 {
    let f = |u: usize| {
        let s = 0.008;
        (((u as f64 / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    (1..=t).map(|u| 1.0 - (1.0 - f(u) / f(u - 1)).min(0.999)).product()
}

fn forward_statistics() -> Result<Verdict> {
    let start = Instant::now();
    let steps = 20;
    let ns = NoiseSchedule::new(steps, ScheduleKind::Cosine)?;
    let n = 100_000;
    let x0 = 0.7;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut ok = true;
    let mut detail = Vec::new();
    for t in [1, steps / 2, steps] {
        let ab = cosine_alpha_bar(t, steps);
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let xt = q_sample(&vec![x0; n], t, &eps, &ns)?;
        let mean = xt.iter().sum::<f64>() / n as f64;
        let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (m_true, v_true) = (ab.sqrt() * x0, 1.0 - ab);
        let mean_z = (mean - m_true) / (v_true / n as f64).sqrt();
        let var_z = (var - v_true) / (v_true * (2.0 / (n - 1) as f64).sqrt());
        ok &= mean_z.abs() < 3.0 && var_z.abs() < 3.0;
        detail.push(format!("t={t}: z_mean {mean_z:+.2}, z_var {var_z:+.2}"));
    }
    let (fast, time) = within(start.elapsed(), Duration::from_secs(10));
    Ok((ok && fast, format!("{}; {time}", detail.join("; "))))
}

fn anchor_preservation() -> Result<Verdict> {
    let start = Instant::now();
    let schedule = JumpSchedule::from_ranges(&[(3, 2), (4, 5)])?;
    let ns = NoiseSchedule::new(20, ScheduleKind::Cosine)?;
    let model = DenoiserModel::<f32>::new(
        DenoiserConfig {
            model_dim: 64,
            n_layers: 2,
            n_heads: 4,
            token_dim: 4,
            max_offset: schedule.total_span(),
            max_diffusion_step: 21,
            embed: EmbedMode::Offset,
        },
        5,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let row = schedule.horizon_tokens() * 4;
    let (mut trajectories, mut checked_steps, mut violations) = (0usize, 0usize, 0usize);
    for _ in 0..20 {
        let anchor: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let out = sample_traced(&model, &ns, &schedule, &anchor, &[], 50, &mut rng, |_, x| {
            for traj in x.chunks_exact(row) {
                checked_steps += 1;
                if traj[..4] != anchor[..] {
                    violations += 1;
                }
            }
        })?;
        trajectories += out.len();
        violations += out.iter().filter(|o| o[..4] != anchor[..]).count();
    }
    let (fast, time) = within(start.elapsed(), Duration::from_secs(60));
    Ok((
        trajectories == 1000 && violations == 0 && fast,
        format!("{trajectories} trajectories, {checked_steps} chain states checked, {violations} mismatches, {time}"),
    ))
}

/// Scores a trajectory by the sum of its final token, which is integral for the
/// integer-valued candidates below, so ties are common.
struct FinalTokenSum {
    dim: usize,
}

impl TrajectoryScorer for FinalTokenSum {
    fn score(&self, trajectories: &[f64], count: usize, _offsets: &[usize]) -> Result<Vec<f64>> {
        let row = trajectories.len() / count;
        Ok(trajectories
            .chunks_exact(row)
            .map(|t| t[row - self.dim..].iter().sum())
            .collect())
    }
}

fn mc_selection() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (dim, tokens) = (2, 4);
    let scorer = FinalTokenSum { dim };
    let offsets: Vec<usize> = (0..tokens).collect();
    let (mut mismatches, mut tie_sets) = (0, 0);
    for _ in 0..1000 {
        let n = rng.random_range(1..=12);
        let span = rng.random_range(1..=4);
        let cands: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..tokens * dim).map(|_| rng.random_range(0..span) as f64).collect())
            .collect();
        let finals: Vec<f64> = cands.iter().map(|c| c[(tokens - 1) * dim] + c[(tokens - 1) * dim + 1]).collect();
        let best = finals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let expected = finals.iter().position(|&v| v == best).unwrap();
        if finals.iter().filter(|&&v| v == best).count() > 1 {
            tie_sets += 1;
        }
        let (got, _) = mc_select(&cands, &offsets, &scorer)?;
        if got != expected {
            mismatches += 1;
        }
    }
    Ok((
        mismatches == 0 && tie_sets >= 100,
        format!("1000 sets, {tie_sets} with tied maxima, {mismatches} mismatches"),
    ))
}

fn training_descent() -> Result<Verdict> {
    let start = Instant::now();
    let layout = MazeLayout::builtin("umaze-toy").expect("built-in layout");
    let episodes = generate_dataset(&layout, 50_000, 0)?;
    let normalizer = fit_normalizer(&episodes)?;
    let schedule = JumpSchedule::from_ranges(&[(4, 2), (3, 4)])?;
    let ns = NoiseSchedule::new(20, ScheduleKind::Cosine)?;
    let mut model = DenoiserModel::<f32>::new(
        ModelConfig {
            model_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ..ModelConfig::default()
        }
        .denoiser_config(&schedule, normalizer.dim()),
        0,
    )?;
    let opts = TrainOptions {
        steps: 2000,
        log_every: 0,
        ..TrainOptions::default()
    };
    let report = train(&mut model, &episodes, &schedule, &normalizer, &ns, &opts)?;
    let head = &report.losses[..SMOOTHING_WINDOW];
    let initial = head.iter().sum::<f64>() / head.len() as f64;
    let ratio = report.final_smoothed_loss / initial;
    let (fast, time) = within(start.elapsed(), Duration::from_secs(600));
    Ok((
        ratio <= 0.5 && fast,
        format!(
            "smoothed loss {initial:.4} -> {:.4} (ratio {ratio:.3}), {time}",
            report.final_smoothed_loss
        ),
    ))
}

const E2E_TRANSITIONS: usize = 200_000;
const E2E_EPISODES: usize = 100;

fn e2e_schedules() -> Result<Vec<NamedSchedule>> {
    let named = |name: &str, ranges: &[(usize, usize)]| -> Result<NamedSchedule> {
        Ok(NamedSchedule {
            name: name.into(),
            schedule: JumpSchedule::from_ranges(ranges)?,
        })
    };
    Ok(vec![
        named("uniform", &[(11, 6)])?,
        named("dense-to-sparse", &[(4, 3), (4, 6), (3, 10)])?,
        named("sparse-to-dense", &[(3, 10), (4, 6), (4, 3)])?,
    ])
}

fn e2e_options(seed: u64) -> PipelineOptions {
    let mut o = PipelineOptions {
        model: ModelConfig {
            model_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ..ModelConfig::default()
        },
        n_candidates: 16,
        track_gap: true,
        ..PipelineOptions::default()
    }
    .with_seed(seed);
    o.denoiser.steps = 4000;
    o.denoiser.log_every = 500;
    o.invdyn.mode = InvDynMode::Regression;
    o.invdyn.fit.steps = 3000;
    o
}

/// One full three-schedule run; returns (criterion a, criterion b, table).
fn e2e_round(seed: u64) -> Result<(bool, bool, String)> {
    let layout = MazeLayout::builtin("medium-toy").expect("built-in layout");
    let episodes = generate_dataset(&layout, E2E_TRANSITIONS, seed)?;
    let schedules = e2e_schedules()?;
    let spans: Vec<usize> = schedules.iter().map(|s| s.schedule.total_span()).collect();
    assert!(spans.iter().all(|&s| s == spans[0]), "equal total span: {spans:?}");
    assert!(schedules.iter().all(|s| s.schedule.horizon_tokens() == 12));
    let eval_base = 1_000_000 * (seed + 1);
    let refs = calibrate_references(&layout, eval_base, E2E_EPISODES, DEFAULT_MAX_EPISODE_STEPS)?;
    let seeds = episode_seeds(eval_base, E2E_EPISODES);
    let cmp = compare_schedules(&schedules, &episodes, &layout, &e2e_options(seed), &seeds, &refs, |_, _, _| Ok(()))?;
    let beats_random = cmp
        .rows
        .iter()
        .all(|r| r.report.raw_mean - refs.random_ref >= 5.0 * r.report.raw_se && r.report.raw_se.is_finite());
    let uniform = cmp.rows[0].report.normalized_mean;
    let mixed_wins = cmp.rows[1..].iter().any(|r| r.report.normalized_mean >= uniform);
    let table = format!(
        "seed {seed}: random {:.3}, expert {:.3}\n{}",
        refs.random_ref,
        refs.expert_ref,
        cmp.table()
    );
    Ok((beats_random, mixed_wins, table))
}

fn end_to_end() -> Result<Verdict> {
    let start = Instant::now();
    let (a, b, table) = e2e_round(0)?;
    print!("{table}");
    let mut detail = format!("seed set 0: (a) {a}, (b) {b}");
    let (a, b) = if b {
        (a, b)
    } else {
        let (a2, b2, table2) = e2e_round(1)?;
        print!("{table2}");
        detail += &format!("; seed set 1: (a) {a2}, (b) {b2}");
        (a && a2, b2)
    };
    Ok((a && b, format!("{detail}; {:.0}s", start.elapsed().as_secs_f64())))
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("reading {}: {e}", p.display()))
}

fn manifest_determinism() -> Result<Verdict> {
    let dir = tempfile::tempdir().map_err(|e| mdd_core::error::Error::io("tempdir", e))?;
    let root = dir.path();
    let data = root.join("data");
    let run = root.join("run");
    let schedule_file = root.join("schedule.json");
    let model_file = root.join("model.json");
    let schedules_file = root.join("schedules.json");
    std::fs::write(&schedule_file, r#"{"ranges": [[2, 2], [2, 4]]}"#).unwrap();
    std::fs::write(&model_file, r#"{"model_dim": 16, "n_layers": 1, "n_heads": 2, "noise_steps": 5}"#).unwrap();
    std::fs::write(
        &schedules_file,
        r#"[{"name": "uniform", "schedule": {"ranges": [[4, 3]]}},
            {"name": "mixed", "schedule": {"ranges": [[2, 2], [2, 4]]}}]"#,
    )
    .unwrap();

    let gen = commands::GenDataArgs {
        layout: "umaze-toy".into(),
        steps: 4000,
        seed: 1,
        out: data.clone(),
        episode_len: 200,
        action_noise: 0.15,
    };
    let train_args = commands::TrainArgs {
        data: data.clone(),
        schedule_config: schedule_file,
        model_config: Some(model_file.clone()),
        embed: None,
        out: run.clone(),
        steps: 30,
        batch_size: 8,
        lr: 1e-3,
        seed: 2,
        checkpoint_every: 10,
    };
    let aux = |what| commands::TrainAuxArgs {
        data: data.clone(),
        run_dir: run.clone(),
        what,
        steps: 30,
        batch_size: 16,
        lr: 1e-3,
        seed: 3,
        hidden: 16,
        invdyn_mode: InvDynMode::Diffusion,
        gap_cond: true,
        track_gap: false,
    };
    let eval_args = commands::EvalArgs {
        checkpoint_dir: run.clone(),
        layout: "umaze-toy".into(),
        episodes: 3,
        seed: 4,
        n_candidates: 3,
        replan_every: None,
        max_episode_steps: 20,
        track_gap: false,
        goal_clamp: false,
        references: None,
        out: root.join("eval"),
        traces: 2,
    };
    let mut pipeline = PipelineOptions {
        model: ModelConfig {
            model_dim: 16,
            n_layers: 1,
            n_heads: 2,
            noise_steps: 5,
            ..ModelConfig::default()
        },
        n_candidates: 2,
        max_episode_steps: 15,
        ..PipelineOptions::default()
    }
    .with_seed(5);
    pipeline.denoiser.steps = 10;
    pipeline.denoiser.batch_size = 8;
    pipeline.value.fit.steps = 10;
    pipeline.value.hidden = 16;
    pipeline.invdyn.fit.steps = 10;
    pipeline.invdyn.hidden = 16;
    let compare_args = commands::CompareArgs {
        schedules: schedules_file,
        data: data.clone(),
        layout: "umaze-toy".into(),
        pipeline,
        episodes: 2,
        seed: 6,
        references: None,
        out: root.join("compare"),
        traces: 1,
    };

    let steps: Vec<(&str, Box<dyn Fn() -> Result<commands::Manifest>>, std::path::PathBuf)> = vec![
        ("gen-data", Box::new(|| commands::gen_data(&gen)), data.join(commands::MANIFEST)),
        ("train", Box::new(|| commands::train(&train_args)), run.join(commands::MANIFEST)),
        ("train-aux value", Box::new(|| commands::train_aux(&aux(AuxKind::Value))), run.join("manifest-value.json")),
        ("train-aux invdyn", Box::new(|| commands::train_aux(&aux(AuxKind::InvDyn))), run.join("manifest-invdyn.json")),
        ("eval", Box::new(|| commands::eval(&eval_args)), root.join("eval").join(commands::MANIFEST)),
        ("compare", Box::new(|| commands::compare(&compare_args)), root.join("compare").join(commands::MANIFEST)),
    ];
    let mut differing = Vec::new();
    for (name, run_once, manifest) in &steps {
        run_once()?;
        let first = read(manifest);
        run_once()?;
        if read(manifest) != first {
            differing.push(*name);
        }
    }
    Ok((
        differing.is_empty(),
        format!("{} commands repeated, differing manifests: {differing:?}", steps.len()),
    ))
}

type Criterion = (&'static str, fn() -> Result<Verdict>);

const CRITERIA: [Criterion; 9] = [
    ("schedule algebra", schedule_algebra),
    ("kitchen fidelity", kitchen_fidelity),
    ("gradient exactness", gradient_exactness),
    ("forward statistics", forward_statistics),
    ("anchor preservation", anchor_preservation),
    ("mc selection", mc_selection),
    ("training descent", training_descent),
    ("end-to-end comparison", end_to_end),
    ("manifest determinism", manifest_determinism),
];

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<&Criterion> = CRITERIA
        .iter()
        .filter(|(name, _)| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str())))
        .collect();
    let mut failed = 0;
    for (name, run) in &selected {
        let verdict = match catch_unwind(AssertUnwindSafe(run)) {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        println!("{} {name}: {}", if verdict.0 { "PASS" } else { "FAIL" }, verdict.1);
        failed += usize::from(!verdict.0);
    }
    println!("acceptance: {} of {} criteria passed", selected.len() - failed, selected.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
