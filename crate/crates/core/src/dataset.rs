//! Episode persistence, observation normalization and mixed-density batch sampling.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Episode;
use crate::error::{Error, Result};
use crate::schedule::JumpSchedule;

pub const STD_FLOOR: f64 = 1e-6;

/// Writes episodes as JSON Lines, replacing any existing file.
pub fn save_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_lines(path, file, episodes)
}

/// Appends episodes to a JSON Lines file, creating it if needed.
pub fn append_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    write_lines(path, file, episodes)
}

fn write_lines(path: &Path, file: File, episodes: &[Episode]) -> Result<()> {
    let mut w = BufWriter::new(file);
    for ep in episodes {
        serde_json::to_writer(&mut w, ep)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_episodes(path: &Path) -> Result<Vec<Episode>> {
    let file =
        File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut reader = BufReader::new(file);
    let mut episodes = Vec::new();
    let mut line = String::new();
    let mut line_no = 0;
    loop {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let complete = line.ends_with('\n');
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let record = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let ep: Episode = match serde_json::from_str(text) {
            Ok(ep) => ep,
            Err(e) if e.is_eof() && !complete => {
                return Err(record(format!("file is truncated: {e}")))
            }
            Err(e) => return Err(record(e.to_string())),
        };
        ep.validate().map_err(|e| record(e.to_string()))?;
        episodes.push(ep);
    }
    Ok(episodes)
}

/// Per-dimension affine normalization of observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::shape(format!(
                "normalizer mean has {} dims, std has {}",
                mean.len(),
                std.len()
            )));
        }
        if std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::validation("normalizer std must be positive and finite"));
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    /// Normalizes a flat buffer of consecutive `dim`-sized rows in place.
    pub fn normalize_rows(&self, data: &mut [f64]) {
        let d = self.dim();
        for row in data.chunks_exact_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
    }

    pub fn denormalize_rows(&self, data: &mut [f64]) {
        let d = self.dim();
        for row in data.chunks_exact_mut(d) {
            for j in 0..d {
                row[j] = row[j] * self.std[j] + self.mean[j];
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let n: Normalizer = serde_json::from_str(&text)?;
        Self::new(n.mean, n.std)
    }
}

/// Mean and population standard deviation over every observation of every episode.
pub fn fit_normalizer(episodes: &[Episode]) -> Result<Normalizer> {
    let mut count = 0usize;
    let mut dim = None;
    for ep in episodes {
        for o in &ep.observations {
            match dim {
                None => dim = Some(o.len()),
                Some(d) if d != o.len() => {
                    return Err(Error::shape("observation dimensions differ across episodes"))
                }
                _ => {}
            }
            count += 1;
        }
    }
    let dim = match dim {
        Some(d) if count > 0 => d,
        _ => return Err(Error::validation("cannot fit a normalizer to zero observations")),
    };
    let mut mean = vec![0.0; dim];
    for o in episodes.iter().flat_map(|e| &e.observations) {
        for j in 0..dim {
            mean[j] += o[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; dim];
    for o in episodes.iter().flat_map(|e| &e.observations) {
        for j in 0..dim {
            var[j] += (o[j] - mean[j]).powi(2);
        }
    }
    let std = var
        .iter()
        .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
        .collect();
    Normalizer::new(mean, std)
}

/// Largest absolute normalized coordinate over every observation; the box that bounds
/// the denoised estimate during sampling.
pub fn normalized_extent(episodes: &[Episode], normalizer: &Normalizer) -> f64 {
    episodes
        .iter()
        .flat_map(|e| &e.observations)
        .flat_map(|o| normalizer.normalize(o))
        .fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Normalized plans gathered at the offsets of one schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanBatch {
    /// `batch × horizon × dim`, row-major.
    pub trajectories: Vec<f64>,
    pub batch: usize,
    pub horizon: usize,
    pub dim: usize,
    pub offsets: Vec<usize>,
    /// `true` for tokens held at their clean value (token 0, the anchor).
    pub anchor_mask: Vec<bool>,
    /// `(episode index, anchor time)` of every row.
    pub sources: Vec<(usize, usize)>,
}

impl PlanBatch {
    pub fn row(&self, b: usize) -> &[f64] {
        let n = self.horizon * self.dim;
        &self.trajectories[b * n..(b + 1) * n]
    }

    pub fn token(&self, b: usize, i: usize) -> &[f64] {
        let start = (b * self.horizon + i) * self.dim;
        &self.trajectories[start..start + self.dim]
    }
}

/// Draws `(episode, anchor)` pairs whose window of `span` steps fits inside the episode:
/// an episode is chosen uniformly among those long enough, then the anchor uniformly.
pub fn sample_windows<R: Rng + ?Sized>(
    episodes: &[Episode],
    span: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let eligible: Vec<usize> = episodes
        .iter()
        .enumerate()
        .filter(|(_, ep)| ep.observations.len() > span)
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        let longest = episodes
            .iter()
            .map(|e| e.observations.len().saturating_sub(1))
            .max()
            .unwrap_or(0);
        return Err(Error::validation(format!(
            "no episode spans {span} environment steps (longest has {longest} transitions)"
        )));
    }
    Ok((0..count)
        .map(|_| {
            let e = eligible[rng.random_range(0..eligible.len())];
            let last_anchor = episodes[e].observations.len() - 1 - span;
            (e, rng.random_range(0..=last_anchor))
        })
        .collect())
}

/// Gathers normalized observations at `anchor + offsets[i]` into one row of `H × D`.
pub fn gather_plan(
    episode: &Episode,
    anchor: usize,
    offsets: &[usize],
    normalizer: &Normalizer,
    out: &mut Vec<f64>,
) {
    for &o in offsets {
        out.extend(normalizer.normalize(&episode.observations[anchor + o]));
    }
}

pub fn sample_plan_batch<R: Rng + ?Sized>(
    episodes: &[Episode],
    schedule: &JumpSchedule,
    normalizer: &Normalizer,
    batch_size: usize,
    rng: &mut R,
) -> Result<PlanBatch> {
    if batch_size == 0 {
        return Err(Error::validation("batch_size must be >= 1"));
    }
    let offsets = schedule.time_offsets().into_vec();
    let sources = sample_windows(episodes, schedule.total_span(), batch_size, rng)?;
    let dim = normalizer.dim();
    let horizon = offsets.len();
    let mut trajectories = Vec::with_capacity(batch_size * horizon * dim);
    for &(e, t) in &sources {
        if episodes[e].observations[t].len() != dim {
            return Err(Error::shape(format!(
                "normalizer has {dim} dims but episode {e} observations have {}",
                episodes[e].observations[t].len()
            )));
        }
        gather_plan(&episodes[e], t, &offsets, normalizer, &mut trajectories);
    }
    let mut anchor_mask = vec![false; horizon];
    anchor_mask[0] = true;
    Ok(PlanBatch {
        trajectories,
        batch: batch_size,
        horizon,
        dim,
        offsets,
        anchor_mask,
        sources,
    })
}

/// State pairs `gap` steps apart and the first action of the window.
#[derive(Debug, Clone, PartialEq)]
pub struct InvDynBatch {
    pub s: Vec<f64>,
    pub s_next: Vec<f64>,
    pub gap: Vec<usize>,
    /// Raw (unnormalized) actions, `batch × act_dim`.
    pub a: Vec<f64>,
    pub batch: usize,
    pub state_dim: usize,
    pub act_dim: usize,
    pub sources: Vec<(usize, usize)>,
}

pub fn sample_invdyn_batch<R: Rng + ?Sized>(
    episodes: &[Episode],
    gap_set: &[usize],
    normalizer: &Normalizer,
    batch_size: usize,
    rng: &mut R,
) -> Result<InvDynBatch> {
    if gap_set.is_empty() || gap_set.contains(&0) {
        return Err(Error::validation("gap set must be non-empty with gaps >= 1"));
    }
    if batch_size == 0 {
        return Err(Error::validation("batch_size must be >= 1"));
    }
    let eligible_per_gap: Vec<Vec<usize>> = gap_set
        .iter()
        .map(|&g| {
            episodes
                .iter()
                .enumerate()
                .filter(|(_, ep)| ep.observations.len() > g)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    if let Some(pos) = eligible_per_gap.iter().position(Vec::is_empty) {
        return Err(Error::validation(format!(
            "no episode spans gap {} environment steps",
            gap_set[pos]
        )));
    }
    let state_dim = normalizer.dim();
    let act_dim = episodes
        .iter()
        .find_map(|e| e.actions.first().map(Vec::len))
        .unwrap_or(0);
    let mut batch = InvDynBatch {
        s: Vec::with_capacity(batch_size * state_dim),
        s_next: Vec::with_capacity(batch_size * state_dim),
        gap: Vec::with_capacity(batch_size),
        a: Vec::with_capacity(batch_size * act_dim),
        batch: batch_size,
        state_dim,
        act_dim,
        sources: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let gi = rng.random_range(0..gap_set.len());
        let gap = gap_set[gi];
        let eligible = &eligible_per_gap[gi];
        let e = eligible[rng.random_range(0..eligible.len())];
        let ep = &episodes[e];
        let t = rng.random_range(0..ep.observations.len() - gap);
        batch.s.extend(normalizer.normalize(&ep.observations[t]));
        batch.s_next.extend(normalizer.normalize(&ep.observations[t + gap]));
        batch.a.extend_from_slice(&ep.actions[t]);
        batch.gap.push(gap);
        batch.sources.push((e, t));
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// 1D episode whose observation at time t is t and action is 10 t.
    pub(crate) fn counting_episode(len: usize) -> Episode {
        Episode {
            observations: (0..=len).map(|t| vec![t as f64]).collect(),
            actions: (0..len).map(|t| vec![10.0 * t as f64]).collect(),
            rewards: vec![0.0; len],
            terminated: false,
        }
    }

    fn identity(dim: usize) -> Normalizer {
        Normalizer::new(vec![0.0; dim], vec![1.0; dim]).unwrap()
    }

    #[test]
    fn episode_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eps.jsonl");
        let eps: Vec<Episode> = (3..6).map(counting_episode).collect();
        save_episodes(&path, &eps).unwrap();
        assert_eq!(load_episodes(&path).unwrap(), eps);
        append_episodes(&path, &eps[..1]).unwrap();
        assert_eq!(load_episodes(&path).unwrap().len(), 4);
    }

    #[test]
    fn empty_file_loads_no_episodes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_episodes(&path).unwrap().is_empty());
    }

    #[test]
    fn corrupted_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&counting_episode(2)).unwrap();
        std::fs::write(&path, format!("{good}\n{{\"obs\": [[1.0]], oops}}\n{good}\n")).unwrap();
        match load_episodes(&path).unwrap_err() {
            Error::Record { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.jsonl");
        let good = serde_json::to_string(&counting_episode(4)).unwrap();
        std::fs::write(&path, format!("{good}\n{}", &good[..good.len() / 2])).unwrap();
        match load_episodes(&path).unwrap_err() {
            Error::Record { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_episode_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.jsonl");
        std::fs::write(&path, "{\"obs\": [[0.0],[1.0]], \"act\": [], \"rew\": [0.0], \"term\": false}\n")
            .unwrap();
        assert!(matches!(load_episodes(&path), Err(Error::Record { line: 1, .. })));
    }

    #[test]
    fn normalizer_hand_values() {
        let ep = Episode {
            observations: vec![vec![0.0], vec![2.0]],
            actions: vec![vec![0.0]],
            rewards: vec![0.0],
            terminated: false,
        };
        let n = fit_normalizer(&[ep]).unwrap();
        assert_eq!(n.mean, vec![1.0]);
        assert_eq!(n.std, vec![1.0]);
    }

    #[test]
    fn extent_is_the_largest_normalized_magnitude() {
        let ep = Episode {
            observations: vec![vec![0.0, 5.0], vec![2.0, 1.0], vec![1.0, 3.0]],
            actions: vec![vec![0.0]; 2],
            rewards: vec![0.0; 2],
            terminated: false,
        };
        let n = Normalizer::new(vec![1.0, 1.0], vec![0.5, 2.0]).unwrap();
        assert_eq!(normalized_extent(&[ep], &n), 2.0);
    }

    #[test]
    fn degenerate_variance_hits_the_floor() {
        let ep = Episode {
            observations: vec![vec![3.0, -1.0]; 5],
            actions: vec![vec![0.0]; 4],
            rewards: vec![0.0; 4],
            terminated: false,
        };
        let n = fit_normalizer(&[ep]).unwrap();
        assert_eq!(n.std, vec![STD_FLOOR, STD_FLOOR]);
        assert_eq!(n.normalize(&[3.0, -1.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_observations_is_an_error() {
        assert!(fit_normalizer(&[]).is_err());
    }

    #[test]
    fn normalizer_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("norm.json");
        let n = Normalizer::new(vec![1.0, -2.5], vec![0.5, 3.0]).unwrap();
        n.save(&path).unwrap();
        assert_eq!(Normalizer::load(&path).unwrap(), n);
    }

    #[test]
    fn smallest_schedule_gives_consecutive_pairs() {
        let eps = vec![counting_episode(10)];
        let s = JumpSchedule::uniform(2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_plan_batch(&eps, &s, &identity(1), 32, &mut rng).unwrap();
        for i in 0..b.batch {
            let row = b.row(i);
            assert_eq!(row[1] - row[0], 1.0);
        }
        assert_eq!(b.anchor_mask, vec![true, false]);
    }

    #[test]
    fn kitchen_schedule_rows_span_166_steps() {
        let eps = vec![counting_episode(200)];
        let s = JumpSchedule::from_ranges(&[(10, 4), (21, 6)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_plan_batch(&eps, &s, &identity(1), 64, &mut rng).unwrap();
        assert_eq!(b.horizon, 32);
        for i in 0..b.batch {
            let row = b.row(i);
            assert_eq!(row[31] - row[0], 166.0);
        }
    }

    #[test]
    fn stride_three_rows_match_brute_force_gather() {
        // 13 transitions, uniform(4, 3) spans 9 steps: valid anchors are 0..=4.
        let eps = vec![counting_episode(13)];
        let s = JumpSchedule::uniform(4, 3).unwrap();
        let norm = Normalizer::new(vec![6.5], vec![4.0]).unwrap();
        let valid: Vec<Vec<f64>> = (0..=4)
            .map(|t| (0..4).map(|i| (t + 3 * i) as f64).collect())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = sample_plan_batch(&eps, &s, &norm, 200, &mut rng).unwrap();
        let mut seen = [false; 5];
        for i in 0..b.batch {
            let row = norm.denormalize(b.row(i));
            let t = row[0].round() as usize;
            for (got, want) in row.iter().zip(&valid[t]) {
                assert!((got - want).abs() < 1e-12, "{row:?} vs {:?}", valid[t]);
            }
            seen[t] = true;
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn too_short_episodes_are_reported() {
        let eps = vec![counting_episode(5), counting_episode(8)];
        let s = JumpSchedule::uniform(4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_plan_batch(&eps, &s, &identity(1), 4, &mut rng).unwrap_err();
        assert!(err.to_string().contains("spans 9"));
    }

    #[test]
    fn short_episodes_are_skipped() {
        let eps = vec![counting_episode(3), counting_episode(30)];
        let s = JumpSchedule::uniform(3, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_plan_batch(&eps, &s, &identity(1), 50, &mut rng).unwrap();
        assert!(b.sources.iter().all(|&(e, _)| e == 1));
    }

    #[test]
    fn unit_gap_gives_one_step_pairs() {
        let eps = vec![counting_episode(20)];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = sample_invdyn_batch(&eps, &[1], &identity(1), 64, &mut rng).unwrap();
        for i in 0..b.batch {
            assert_eq!(b.s_next[i] - b.s[i], 1.0);
            assert_eq!(b.gap[i], 1);
        }
    }

    #[test]
    fn gaps_come_from_the_gap_set() {
        let eps = vec![counting_episode(200)];
        let kitchen = JumpSchedule::from_ranges(&[(10, 4), (21, 6)]).unwrap();
        let gaps = kitchen.distinct_jumps();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = sample_invdyn_batch(&eps, &gaps, &identity(1), 500, &mut rng).unwrap();
        let mut seen: Vec<usize> = b.gap.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen, vec![4, 6]);
        for i in 0..b.batch {
            assert_eq!(b.s_next[i] - b.s[i], b.gap[i] as f64);
        }
    }

    #[test]
    fn action_labels_are_the_first_action_of_the_window() {
        let eps = vec![counting_episode(40), counting_episode(25)];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = sample_invdyn_batch(&eps, &[2, 7], &identity(1), 300, &mut rng).unwrap();
        for i in 0..b.batch {
            let (e, t) = b.sources[i];
            assert_eq!(b.a[i], eps[e].actions[t][0]);
            assert_eq!(b.s[i], t as f64);
        }
    }
}
