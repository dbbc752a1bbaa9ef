//! Continuous point-maze: a ball with bounded velocity moving through a grid of walls.
//!
//! Positions are in cell units: cell `(row, col)` covers `x ∈ [col, col+1)`,
//! `y ∈ [row, row+1)`. The agent is an axis-aligned box of half-width
//! [`AGENT_HALF_WIDTH`]; wall contact clips the box to the wall face and zeroes the
//! velocity component along that axis.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DT: f64 = 1.0;
pub const V_MAX: f64 = 0.5;
pub const GOAL_RADIUS: f64 = 0.5;
pub const AGENT_HALF_WIDTH: f64 = 0.1;
pub const OBS_DIM: usize = 4;
pub const ACT_DIM: usize = 2;

const CONTACT_EPS: f64 = 1e-9;

const UMAZE: &str = "\
#####
#G..#
###.#
#...#
#####
";

const MEDIUM: &str = "\
########
#..##..#
#..#...#
##...###
#..#...#
#.#..#.#
#...#.G#
########
";

const LARGE: &str = "\
############
#....#.....#
#.##.#.#.#.#
#......#...#
#.####.###.#
#..#.#.....#
##.#.#.#.###
#..#...#.G.#
############
";

pub const BUILTIN_LAYOUTS: [&str; 3] = ["umaze-toy", "medium-toy", "large-toy"];

/// Occupancy grid plus the task goal cell.
///
/// Text form: one row per line, `#` wall, `.` free, `G` free cell holding the goal.
/// Without a `G` the goal defaults to the last free cell in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MazeLayout {
    name: String,
    rows: usize,
    cols: usize,
    walls: Vec<bool>,
    goal: (usize, usize),
}

impl MazeLayout {
    pub fn builtin(name: &str) -> Option<Self> {
        let text = match name {
            "umaze-toy" => UMAZE,
            "medium-toy" => MEDIUM,
            "large-toy" => LARGE,
            _ => return None,
        };
        Some(Self::parse(name, text).expect("built-in layouts are valid"))
    }

    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let lines: Vec<&str> = text
            .lines()
            .map(|l| l.trim_end_matches('\r'))
            .filter(|l| !l.is_empty())
            .collect();
        if lines.is_empty() {
            return Err(Error::Parse {
                line: 1,
                column: 1,
                message: "layout is empty".into(),
            });
        }
        let cols = lines[0].chars().count();
        let rows = lines.len();
        let mut walls = Vec::with_capacity(rows * cols);
        let mut goal = None;
        for (r, line) in lines.iter().enumerate() {
            let n = line.chars().count();
            if n != cols {
                return Err(Error::Parse {
                    line: r + 1,
                    column: n.min(cols) + 1,
                    message: format!("ragged row: expected {cols} cells, found {n}"),
                });
            }
            for (c, ch) in line.chars().enumerate() {
                let wall = match ch {
                    '#' => true,
                    '.' => false,
                    'G' => {
                        if goal.is_some() {
                            return Err(Error::Parse {
                                line: r + 1,
                                column: c + 1,
                                message: "more than one goal cell".into(),
                            });
                        }
                        goal = Some((r, c));
                        false
                    }
                    other => {
                        return Err(Error::Parse {
                            line: r + 1,
                            column: c + 1,
                            message: format!("unknown cell character {other:?}"),
                        })
                    }
                };
                let boundary = r == 0 || c == 0 || r + 1 == rows || c + 1 == cols;
                if boundary && !wall {
                    return Err(Error::Parse {
                        line: r + 1,
                        column: c + 1,
                        message: "boundary cell must be a wall".into(),
                    });
                }
                walls.push(wall);
            }
        }
        let free = walls.iter().filter(|w| !**w).count();
        if free < 2 {
            return Err(Error::Parse {
                line: 1,
                column: 1,
                message: format!("layout needs at least two free cells, found {free}"),
            });
        }
        let goal = match goal {
            Some(g) => g,
            None => {
                let idx = walls.iter().rposition(|w| !*w).expect("free cells exist");
                (idx / cols, idx % cols)
            }
        };
        Ok(Self {
            name: name.to_string(),
            rows,
            cols,
            walls,
            goal,
        })
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading layout {}", path.display()), e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Self::parse(&name, &text)
    }

    pub fn save_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())
            .map_err(|e| Error::io(format!("writing layout {}", path.display()), e))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.rows * (self.cols + 1));
        for r in 0..self.rows {
            for c in 0..self.cols {
                s.push(if self.is_wall(r, c) {
                    '#'
                } else if (r, c) == self.goal {
                    'G'
                } else {
                    '.'
                });
            }
            s.push('\n');
        }
        s
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn goal_cell(&self) -> (usize, usize) {
        self.goal
    }

    pub fn goal_position(&self) -> [f64; 2] {
        cell_center(self.goal)
    }

    pub fn is_wall(&self, r: usize, c: usize) -> bool {
        r >= self.rows || c >= self.cols || self.walls[r * self.cols + c]
    }

    fn is_wall_i(&self, r: i64, c: i64) -> bool {
        r < 0 || c < 0 || self.is_wall(r as usize, c as usize)
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| !self.is_wall(r, c))
            .collect()
    }

    /// Free cells in the farther half of the maze by path distance to the goal; episodes
    /// start here so that reaching the goal takes deliberate navigation.
    pub fn start_cells(&self) -> Vec<(usize, usize)> {
        let field = self.distance_field(self.goal);
        let reach = |&(r, c): &(usize, usize)| field[r * self.cols + c];
        let cells: Vec<_> = self.free_cells().into_iter().filter(|c| reach(c) != usize::MAX).collect();
        let far = cells.iter().map(reach).max().unwrap_or(0);
        cells.into_iter().filter(|c| 2 * reach(c) >= far && reach(c) > 0).collect()
    }

    /// Cell containing a point, if the point is inside the grid.
    pub fn cell_of(&self, pos: [f64; 2]) -> Option<(usize, usize)> {
        if pos[0] < 0.0 || pos[1] < 0.0 {
            return None;
        }
        let (r, c) = (pos[1].floor() as usize, pos[0].floor() as usize);
        (r < self.rows && c < self.cols).then_some((r, c))
    }

    pub fn is_free_point(&self, pos: [f64; 2]) -> bool {
        matches!(self.cell_of(pos), Some((r, c)) if !self.is_wall(r, c))
    }

    /// Whether the agent box centred at `pos` overlaps any wall cell.
    pub fn box_hits_wall(&self, pos: [f64; 2]) -> bool {
        let (x0, x1) = (pos[0] - AGENT_HALF_WIDTH, pos[0] + AGENT_HALF_WIDTH);
        let (y0, y1) = (pos[1] - AGENT_HALF_WIDTH, pos[1] + AGENT_HALF_WIDTH);
        let c_lo = (x0 + CONTACT_EPS).floor() as i64;
        let c_hi = (x1 - CONTACT_EPS).floor() as i64;
        let r_lo = (y0 + CONTACT_EPS).floor() as i64;
        let r_hi = (y1 - CONTACT_EPS).floor() as i64;
        (r_lo..=r_hi).any(|r| (c_lo..=c_hi).any(|c| self.is_wall_i(r, c)))
    }

    /// Breadth-first distance (in cells, 4-connected) from every free cell to `target`.
    /// Unreachable cells hold `usize::MAX`.
    pub fn distance_field(&self, target: (usize, usize)) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.rows * self.cols];
        if self.is_wall(target.0, target.1) {
            return dist;
        }
        let mut queue = VecDeque::new();
        dist[target.0 * self.cols + target.1] = 0;
        queue.push_back(target);
        while let Some((r, c)) = queue.pop_front() {
            let d = dist[r * self.cols + c];
            for (nr, nc) in self.neighbours(r, c) {
                let idx = nr * self.cols + nc;
                if dist[idx] == usize::MAX {
                    dist[idx] = d + 1;
                    queue.push_back((nr, nc));
                }
            }
        }
        dist
    }

    fn neighbours(&self, r: usize, c: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let cand = [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ];
        cand.into_iter().filter(|&(nr, nc)| !self.is_wall(nr, nc))
    }
}

impl fmt::Display for MazeLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Built-in name or a path to a layout text file.
pub fn load_layout(name_or_path: &str) -> Result<MazeLayout> {
    if let Some(layout) = MazeLayout::builtin(name_or_path) {
        return Ok(layout);
    }
    let path = Path::new(name_or_path);
    if path.exists() {
        return MazeLayout::load_file(path);
    }
    Err(Error::validation(format!(
        "unknown layout {name_or_path:?}; built-ins are {BUILTIN_LAYOUTS:?}"
    )))
}

pub fn cell_center((r, c): (usize, usize)) -> [f64; 2] {
    [c as f64 + 0.5, r as f64 + 0.5]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub goal: [f64; 2],
}

impl EnvState {
    pub fn observation(&self) -> [f64; OBS_DIM] {
        [
            self.position[0],
            self.position[1],
            self.velocity[0],
            self.velocity[1],
        ]
    }

    pub fn at_goal(&self) -> bool {
        dist(self.position, self.goal) < GOAL_RADIUS
    }
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// One transition of the point-mass dynamics. Actions must already lie in `[-1, 1]`.
pub fn dynamics(layout: &MazeLayout, state: &EnvState, action: [f64; 2]) -> (EnvState, f64, bool) {
    let mut vel = [
        (state.velocity[0] + action[0] * DT).clamp(-V_MAX, V_MAX),
        (state.velocity[1] + action[1] * DT).clamp(-V_MAX, V_MAX),
    ];
    let mut pos = state.position;
    for axis in 0..2 {
        let mut next = pos;
        next[axis] += vel[axis] * DT;
        if vel[axis] != 0.0 && layout.box_hits_wall(next) {
            // Speeds stay below one cell per step, so only the leading cell can block.
            next[axis] = if vel[axis] > 0.0 {
                let blocking = (next[axis] + AGENT_HALF_WIDTH - CONTACT_EPS).floor();
                blocking - AGENT_HALF_WIDTH
            } else {
                let blocking = (next[axis] - AGENT_HALF_WIDTH + CONTACT_EPS).floor();
                blocking + 1.0 + AGENT_HALF_WIDTH
            };
            vel[axis] = 0.0;
        }
        pos = next;
    }
    let next = EnvState {
        position: pos,
        velocity: vel,
        goal: state.goal,
    };
    let done = next.at_goal();
    (next, if done { 1.0 } else { 0.0 }, done)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub observation: [f64; OBS_DIM],
    pub reward: f64,
    pub done: bool,
}

/// Stateful wrapper around [`dynamics`]. Single-threaded.
#[derive(Debug, Clone)]
pub struct PointMaze {
    layout: MazeLayout,
    state: EnvState,
    clamped_actions: u64,
}

impl PointMaze {
    pub fn new(layout: MazeLayout) -> Self {
        let goal = layout.goal_position();
        let start = layout.free_cells()[0];
        Self {
            state: EnvState {
                position: cell_center(start),
                velocity: [0.0; 2],
                goal,
            },
            layout,
            clamped_actions: 0,
        }
    }

    pub fn layout(&self) -> &MazeLayout {
        &self.layout
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn observation(&self) -> [f64; OBS_DIM] {
        self.state.observation()
    }

    /// Number of actions that arrived outside `[-1, 1]` and were clamped.
    pub fn clamped_actions(&self) -> u64 {
        self.clamped_actions
    }

    pub fn set_state(&mut self, state: EnvState) {
        self.state = state;
    }

    /// Random start in one of the start cells, jittered around its centre.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> [f64; OBS_DIM] {
        let cells = self.layout.start_cells();
        self.reset_in(&cells, rng)
    }

    /// Random start in any free cell other than the goal cell; demonstrations start here
    /// so that resting states cover the whole maze.
    pub fn reset_anywhere<R: Rng + ?Sized>(&mut self, rng: &mut R) -> [f64; OBS_DIM] {
        let goal = self.layout.goal_cell();
        let cells: Vec<_> = self.layout.free_cells().into_iter().filter(|&c| c != goal).collect();
        self.reset_in(&cells, rng)
    }

    fn reset_in<R: Rng + ?Sized>(&mut self, cells: &[(usize, usize)], rng: &mut R) -> [f64; OBS_DIM] {
        let cell = cells[rng.random_range(0..cells.len())];
        let center = cell_center(cell);
        self.state = EnvState {
            position: [
                center[0] + rng.random_range(-0.25..0.25),
                center[1] + rng.random_range(-0.25..0.25),
            ],
            velocity: [0.0; 2],
            goal: self.layout.goal_position(),
        };
        self.observation()
    }

    pub fn step(&mut self, action: [f64; 2]) -> StepResult {
        let mut a = action;
        let mut clamped = false;
        for v in a.iter_mut() {
            let c = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
            if c != *v {
                clamped = true;
            }
            *v = c;
        }
        if clamped {
            self.clamped_actions += 1;
        }
        let (next, reward, done) = dynamics(&self.layout, &self.state, a);
        self.state = next;
        StepResult {
            observation: next.observation(),
            reward,
            done,
        }
    }
}

/// Proportional-derivative controller that follows the breadth-first path to a goal cell.
#[derive(Debug, Clone)]
pub struct WaypointController {
    pub kp: f64,
    pub kd: f64,
    pub noise_std: f64,
    target: Option<((usize, usize), [f64; 2], Vec<usize>)>,
}

impl WaypointController {
    pub fn new(noise_std: f64) -> Self {
        Self {
            kp: 1.0,
            kd: 0.6,
            noise_std,
            target: None,
        }
    }

    pub fn set_goal(&mut self, layout: &MazeLayout, cell: (usize, usize), position: [f64; 2]) {
        let field = layout.distance_field(cell);
        self.target = Some((cell, position, field));
    }

    pub fn goal_position(&self) -> Option<[f64; 2]> {
        self.target.as_ref().map(|t| t.1)
    }

    /// Whether the current goal is reachable from `pos`.
    pub fn reachable(&self, layout: &MazeLayout, pos: [f64; 2]) -> bool {
        match (&self.target, layout.cell_of(pos)) {
            (Some((_, _, field)), Some((r, c))) => field[r * layout.cols() + c] != usize::MAX,
            _ => false,
        }
    }

    fn waypoint(&self, layout: &MazeLayout, pos: [f64; 2]) -> Option<[f64; 2]> {
        let (goal_cell, goal_pos, field) = self.target.as_ref()?;
        let (r, c) = layout.cell_of(pos)?;
        let here = field[r * layout.cols() + c];
        if here == usize::MAX {
            return None;
        }
        if (r, c) == *goal_cell {
            return Some(*goal_pos);
        }
        let next = layout
            .neighbours(r, c)
            .filter(|&(nr, nc)| field[nr * layout.cols() + nc] + 1 == here)
            .min()?;
        if next == *goal_cell {
            return Some(*goal_pos);
        }
        Some(cell_center(next))
    }

    pub fn act<R: Rng + ?Sized>(&self, layout: &MazeLayout, state: &EnvState, rng: &mut R) -> [f64; 2] {
        let mut a = match self.waypoint(layout, state.position) {
            Some(wp) => [
                self.kp * (wp[0] - state.position[0]) - self.kd * state.velocity[0],
                self.kp * (wp[1] - state.position[1]) - self.kd * state.velocity[1],
            ],
            None => [0.0, 0.0],
        };
        if self.noise_std > 0.0 {
            for v in a.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += self.noise_std * z;
            }
        }
        [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)]
    }
}

/// One environment rollout. `actions`, `rewards` have one entry per transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    #[serde(rename = "obs")]
    pub observations: Vec<Vec<f64>>,
    #[serde(rename = "act")]
    pub actions: Vec<Vec<f64>>,
    #[serde(rename = "rew")]
    pub rewards: Vec<f64>,
    #[serde(rename = "term")]
    pub terminated: bool,
}

impl Episode {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.observations.len();
        if n == 0 {
            return Err(Error::validation("episode has no observations"));
        }
        if self.actions.len() + 1 != n || self.rewards.len() + 1 != n {
            return Err(Error::validation(format!(
                "episode lengths disagree: {} observations, {} actions, {} rewards",
                n,
                self.actions.len(),
                self.rewards.len()
            )));
        }
        let od = self.observations[0].len();
        if self.observations.iter().any(|o| o.len() != od) {
            return Err(Error::validation("observation dimensions differ within episode"));
        }
        if let Some(a0) = self.actions.first() {
            let ad = a0.len();
            if self.actions.iter().any(|a| a.len() != ad) {
                return Err(Error::validation("action dimensions differ within episode"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetOptions {
    /// Transitions per episode (episodes end on this time limit, never on reward).
    pub episode_len: usize,
    /// Steps before an unreached waypoint goal is abandoned and resampled.
    pub goal_timeout: usize,
    pub action_noise: f64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            episode_len: 500,
            goal_timeout: 120,
            action_noise: 0.15,
        }
    }
}

pub fn generate_dataset(layout: &MazeLayout, n_steps: usize, seed: u64) -> Result<Vec<Episode>> {
    generate_dataset_with(layout, n_steps, seed, &DatasetOptions::default())
}

/// Undirected demonstrations: the controller chases uniformly resampled waypoints while
/// rewards are scored against the layout's task goal. The task goal does not end a
/// demonstration episode.
pub fn generate_dataset_with(
    layout: &MazeLayout,
    n_steps: usize,
    seed: u64,
    opts: &DatasetOptions,
) -> Result<Vec<Episode>> {
    if n_steps == 0 {
        return Err(Error::validation("n_steps must be >= 1"));
    }
    if opts.episode_len == 0 || opts.goal_timeout == 0 {
        return Err(Error::validation("episode_len and goal_timeout must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = layout.free_cells();
    let mut env = PointMaze::new(layout.clone());
    let mut controller = WaypointController::new(opts.action_noise);
    let mut episodes = Vec::new();
    let mut total = 0;
    let mut timeouts = 0usize;
    while total < n_steps {
        env.reset_anywhere(&mut rng);
        let mut obs = vec![env.observation().to_vec()];
        let mut act = Vec::with_capacity(opts.episode_len);
        let mut rew = Vec::with_capacity(opts.episode_len);
        let mut since_goal = 0;
        let pick_goal = |controller: &mut WaypointController, rng: &mut ChaCha8Rng| {
            let cell = cells[rng.random_range(0..cells.len())];
            let c = cell_center(cell);
            let jitter = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)];
            controller.set_goal(layout, cell, [c[0] + jitter[0], c[1] + jitter[1]]);
        };
        pick_goal(&mut controller, &mut rng);
        for _ in 0..opts.episode_len {
            let state = *env.state();
            let a = controller.act(layout, &state, &mut rng);
            let step = env.step(a);
            obs.push(step.observation.to_vec());
            act.push(a.to_vec());
            rew.push(step.reward);
            since_goal += 1;
            let wp = controller.goal_position().expect("goal set");
            if dist(env.state().position, wp) < GOAL_RADIUS {
                pick_goal(&mut controller, &mut rng);
                since_goal = 0;
            } else if since_goal >= opts.goal_timeout {
                if !controller.reachable(layout, env.state().position) {
                    log::debug!("waypoint unreachable from {:?}; resampling", env.state().position);
                }
                timeouts += 1;
                pick_goal(&mut controller, &mut rng);
                since_goal = 0;
            }
        }
        total += act.len();
        episodes.push(Episode {
            observations: obs,
            actions: act,
            rewards: rew,
            terminated: false,
        });
    }
    if timeouts > 0 {
        log::info!("dataset generation: {timeouts} waypoint timeouts");
    }
    Ok(episodes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(pos: [f64; 2], vel: [f64; 2], layout: &MazeLayout) -> EnvState {
        EnvState {
            position: pos,
            velocity: vel,
            goal: layout.goal_position(),
        }
    }

    #[test]
    fn builtin_layouts_parse() {
        for name in BUILTIN_LAYOUTS {
            let l = MazeLayout::builtin(name).unwrap();
            assert!(!l.is_wall(l.goal_cell().0, l.goal_cell().1));
        }
        let u = load_layout("umaze-toy").unwrap();
        assert_eq!((u.rows(), u.cols()), (5, 5));
        assert_eq!(u.goal_cell(), (1, 1));
        assert_eq!(u.free_cells().len(), 7);
    }

    #[test]
    fn ragged_row_reports_its_line() {
        let err = MazeLayout::parse("x", "####\n#..#\n#.#\n####\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_open_boundary_and_bad_chars() {
        let open = MazeLayout::parse("x", "####\n#...\n####\n").unwrap_err();
        assert!(matches!(open, Error::Parse { line: 2, column: 4, .. }));
        let bad = MazeLayout::parse("x", "####\n#.x#\n####\n").unwrap_err();
        assert!(matches!(bad, Error::Parse { line: 2, column: 3, .. }));
        let tiny = MazeLayout::parse("x", "###\n#.#\n###\n").unwrap_err();
        assert!(matches!(tiny, Error::Parse { .. }));
    }

    #[test]
    fn layout_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("medium-toy.txt");
        let l = MazeLayout::builtin("medium-toy").unwrap();
        l.save_file(&path).unwrap();
        let back = load_layout(path.to_str().unwrap()).unwrap();
        assert_eq!(back, l);
    }

    #[test]
    fn goal_defaults_to_last_free_cell() {
        let l = MazeLayout::parse("x", "####\n#..#\n####\n").unwrap();
        assert_eq!(l.goal_cell(), (1, 2));
    }

    #[test]
    fn zero_action_is_a_fixed_point() {
        let l = MazeLayout::builtin("umaze-toy").unwrap();
        let s = state([2.5, 1.5], [0.0, 0.0], &l);
        let (n, r, done) = dynamics(&l, &s, [0.0, 0.0]);
        assert_eq!(n.position, s.position);
        assert_eq!(r, 0.0);
        assert!(!done);
    }

    #[test]
    fn goal_position_rewards_any_action() {
        let l = MazeLayout::builtin("umaze-toy").unwrap();
        let s = state(l.goal_position(), [0.0, 0.0], &l);
        let (_, r, done) = dynamics(&l, &s, [0.3, -0.2]);
        assert_eq!(r, 1.0);
        assert!(done);
    }

    #[test]
    fn head_on_wall_clips_to_face() {
        // Row 1 of umaze-toy is free for columns 1..=3; column 4 is wall, face at x = 4.
        let l = MazeLayout::builtin("umaze-toy").unwrap();
        let s = state([3.7, 1.5], [0.5, 0.0], &l);
        let (n, _, _) = dynamics(&l, &s, [1.0, 0.0]);
        // 1D hand computation: x + v = 4.2, box edge would be 4.3 > 4, so x = 4 - 0.1.
        assert!((n.position[0] - 3.9).abs() < 1e-12);
        assert_eq!(n.velocity[0], 0.0);
        assert_eq!(n.position[1], 1.5);

        // Leftward into column 0.
        let s = state([1.3, 1.5], [-0.5, 0.0], &l);
        let (n, _, _) = dynamics(&l, &s, [-1.0, 0.0]);
        assert!((n.position[0] - 1.1).abs() < 1e-12);
        assert_eq!(n.velocity[0], 0.0);

        // Resting against the face and pushing stays put.
        let (m, _, _) = dynamics(&l, &n, [-1.0, 0.0]);
        assert!((m.position[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn velocity_is_bounded() {
        let l = MazeLayout::builtin("large-toy").unwrap();
        let s = state([1.5, 3.5], [0.4, 0.0], &l);
        let (n, _, _) = dynamics(&l, &s, [1.0, 0.0]);
        assert_eq!(n.velocity[0], V_MAX);
    }

    #[test]
    fn step_clamps_and_counts_out_of_range_actions() {
        let mut env = PointMaze::new(MazeLayout::builtin("umaze-toy").unwrap());
        env.set_state(state([2.5, 1.5], [0.0, 0.0], env.layout()));
        env.step([3.0, 0.0]);
        assert_eq!(env.clamped_actions(), 1);
        assert_eq!(env.state().velocity[0], V_MAX);
        env.step([0.0, 0.0]);
        assert_eq!(env.clamped_actions(), 1);
    }

    #[test]
    fn dataset_is_deterministic_and_contained() {
        let l = MazeLayout::builtin("umaze-toy").unwrap();
        let a = generate_dataset(&l, 1000, 7).unwrap();
        let b = generate_dataset(&l, 1000, 7).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert!(a.iter().map(Episode::len).sum::<usize>() >= 1000);
        for ep in &a {
            ep.validate().unwrap();
            for o in &ep.observations {
                assert!(l.is_free_point([o[0], o[1]]));
            }
        }
    }

    #[test]
    fn rewards_count_goal_reach_events() {
        let l = MazeLayout::builtin("umaze-toy").unwrap();
        let goal = l.goal_position();
        for ep in generate_dataset(&l, 3000, 3).unwrap() {
            let reaches = ep.observations[1..]
                .iter()
                .filter(|o| dist([o[0], o[1]], goal) < GOAL_RADIUS)
                .count();
            assert_eq!(ep.total_return(), reaches as f64);
        }
    }

    #[test]
    fn start_cells_lie_in_the_far_half() {
        for name in BUILTIN_LAYOUTS {
            let l = MazeLayout::builtin(name).unwrap();
            let field = l.distance_field(l.goal_cell());
            let d = |(r, c): (usize, usize)| field[r * l.cols() + c];
            let far = l.free_cells().into_iter().map(d).max().unwrap();
            let starts = l.start_cells();
            assert!(starts.contains(&l.free_cells().into_iter().max_by_key(|&c| d(c)).unwrap()));
            assert!(starts.iter().all(|&c| c != l.goal_cell() && 2 * d(c) >= far));
        }
    }

    #[test]
    fn expert_controller_reaches_the_goal() {
        let l = MazeLayout::builtin("large-toy").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut env = PointMaze::new(l.clone());
        let mut ctl = WaypointController::new(0.0);
        ctl.set_goal(&l, l.goal_cell(), l.goal_position());
        for _ in 0..20 {
            env.reset(&mut rng);
            let mut reached = false;
            for _ in 0..400 {
                let a = ctl.act(&l, env.state(), &mut rng);
                if env.step(a).done {
                    reached = true;
                    break;
                }
            }
            assert!(reached);
        }
    }
}
