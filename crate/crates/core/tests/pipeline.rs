//! End-to-end behaviour of a small planner trained on the U-maze.

use std::sync::OnceLock;

use mdd_core::env::{generate_dataset, EnvState, Episode, MazeLayout, PointMaze};
use mdd_core::eval::{train_planner, ModelConfig, PipelineOptions, TrainedPlanner};
use mdd_core::invdyn::InvDynMode;
use mdd_core::schedule::JumpSchedule;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const REPLAY_EPISODES: usize = 50;
/// The trained model replays 50 of 50; the bound leaves room for retraining noise.
const REPLAY_BOUND: f64 = 0.7;
const NEAR_GOAL_STARTS: usize = 30;
/// The trained model finishes from 24 of 30 starts with guidance and 9 of 30 without.
const NEAR_GOAL_BOUND: usize = 20;

fn layout() -> MazeLayout {
    MazeLayout::builtin("umaze-toy").unwrap()
}

fn trained() -> &'static TrainedPlanner {
    static PLANNER: OnceLock<TrainedPlanner> = OnceLock::new();
    PLANNER.get_or_init(|| {
        let episodes = generate_dataset(&layout(), 60_000, 0).unwrap();
        let mut opts = PipelineOptions {
            model: ModelConfig {
                model_dim: 64,
                n_layers: 2,
                n_heads: 4,
                ..ModelConfig::default()
            },
            n_candidates: 8,
            max_episode_steps: 12,
            track_gap: true,
            ..PipelineOptions::default()
        }
        .with_seed(0);
        opts.denoiser.steps = 3000;
        opts.denoiser.log_every = 0;
        opts.value.fit.steps = 1000;
        opts.value.hidden = 64;
        opts.invdyn.fit.steps = 2000;
        opts.invdyn.hidden = 128;
        opts.invdyn.mode = InvDynMode::Regression;
        let schedule = JumpSchedule::from_ranges(&[(3, 2), (3, 4)]).unwrap();
        train_planner(&episodes, &schedule, &opts).unwrap()
    })
}

/// Segments of held-out demonstrations that end on their first entry into the goal.
fn goal_segments(episodes: &[Episode], lead: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        let mut last_hit: Option<usize> = None;
        for (i, &r) in ep.rewards.iter().enumerate() {
            let entering = r > 0.0 && (i == 0 || ep.rewards[i - 1] == 0.0);
            if entering {
                let start = i.saturating_sub(lead).max(last_hit.map_or(0, |h| h + 1));
                if i > start {
                    out.push((e, start, i));
                }
            }
            if r > 0.0 {
                last_hit = Some(i);
            }
        }
    }
    out
}

#[test]
fn inverse_dynamics_replays_demonstrated_goal_reaches() {
    let planner = trained();
    let held_out = generate_dataset(&layout(), 100_000, 77).unwrap();
    let segments = goal_segments(&held_out, 30);
    assert!(segments.len() >= REPLAY_EPISODES, "only {} goal reaches", segments.len());
    let gap = planner.config.schedule.first_jump();
    let mut env = PointMaze::new(layout());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut reached = 0;
    for &(e, start, hit) in segments.iter().take(REPLAY_EPISODES) {
        let obs = &held_out[e].observations;
        env.set_state(EnvState {
            position: [obs[start][0], obs[start][1]],
            velocity: [obs[start][2], obs[start][3]],
            goal: layout().goal_position(),
        });
        let budget = hit - start + 1 + 10;
        for t in 0..budget {
            let target = &obs[(start + t + gap).min(obs.len() - 1)];
            let a = planner
                .invdyn
                .predict_action(&env.observation(), target, gap, &mut rng)
                .unwrap();
            if env.step([a[0], a[1]]).done {
                reached += 1;
                break;
            }
        }
    }
    let rate = reached as f64 / REPLAY_EPISODES as f64;
    assert!(rate >= REPLAY_BOUND, "replayed {reached} of {REPLAY_EPISODES} goal reaches");
}

/// Successes from states four steps before held-out demonstrations enter the goal.
fn near_goal_successes(n_candidates: usize) -> usize {
    let planner = trained();
    let held_out = generate_dataset(&layout(), 100_000, 78).unwrap();
    let mut config = planner.config.clone();
    config.n_candidates = n_candidates;
    let mut env = PointMaze::new(layout());
    goal_segments(&held_out, 4)
        .iter()
        .take(NEAR_GOAL_STARTS)
        .enumerate()
        .filter(|&(i, &(e, start, _))| {
            let o = &held_out[e].observations[start];
            let state = EnvState {
                position: [o[0], o[1]],
                velocity: [o[2], o[3]],
                goal: layout().goal_position(),
            };
            planner.planner().run_from_state(&mut env, state, &config, i as u64).unwrap().success
        })
        .count()
}

#[test]
fn guided_planner_finishes_near_the_goal() {
    let guided = near_goal_successes(trained().config.n_candidates);
    let unguided = near_goal_successes(1);
    assert!(guided >= NEAR_GOAL_BOUND, "guided planner reached the goal from {guided} of {NEAR_GOAL_STARTS} starts");
    assert!(guided > unguided, "guided {guided} vs a single candidate {unguided}");
}

#[test]
fn evaluation_is_reproducible_and_bounded() {
    let planner = trained();
    let mut env = PointMaze::new(layout());
    let a = planner.planner().run_episode(&mut env, &planner.config, 3).unwrap();
    let b = planner.planner().run_episode(&mut env, &planner.config, 3).unwrap();
    assert_eq!(a.trace, b.trace);
    let plans = a.trace.plans.len();
    assert_eq!(plans, a.steps.div_ceil(planner.config.replan_every));
    for s in &a.trace.steps {
        assert!(s.action.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}


