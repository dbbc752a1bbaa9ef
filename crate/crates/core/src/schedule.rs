//! Jump schedules: how many environment steps separate consecutive planned states.
//!
//! A schedule with jumps `K_1..K_{H-1}` describes a plan of `H` tokens. Token 0 is the
//! anchor (the current observation, offset 0) and token `i` sits at the cumulative sum
//! of the first `i` jumps. Uniform schedules repeat one jump; mixed-density schedules
//! vary it across the horizon.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered jump sizes `K_1..K_{H-1}`. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct JumpSchedule {
    jumps: Vec<usize>,
}

/// Cumulative environment-time offset of every token; `offsets[0] == 0`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TimeOffsets(Vec<usize>);

impl JumpSchedule {
    pub fn new(jumps: Vec<usize>) -> Result<Self> {
        if jumps.is_empty() {
            return Err(Error::validation(
                "a jump schedule needs at least one jump (two tokens)",
            ));
        }
        if let Some(i) = jumps.iter().position(|&k| k == 0) {
            return Err(Error::validation(format!(
                "jump K_{} is 0; every jump must be at least 1",
                i + 1
            )));
        }
        Ok(Self { jumps })
    }

    /// `h - 1` jumps of size `k`.
    pub fn uniform(h: usize, k: usize) -> Result<Self> {
        if h < 2 {
            return Err(Error::validation(format!(
                "uniform schedule needs h >= 2 tokens, got {h}"
            )));
        }
        if k < 1 {
            return Err(Error::validation("uniform schedule needs jump size k >= 1"));
        }
        Self::new(vec![k; h - 1])
    }

    /// Concatenates `count` copies of each jump size, in order.
    pub fn from_ranges(ranges: &[(usize, usize)]) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::validation("range list is empty"));
        }
        let mut jumps = Vec::new();
        for (i, &(count, jump)) in ranges.iter().enumerate() {
            if count == 0 || jump == 0 {
                return Err(Error::validation(format!(
                    "range {i} = ({count}, {jump}): count and jump must both be >= 1"
                )));
            }
            jumps.extend(std::iter::repeat_n(jump, count));
        }
        Self::new(jumps)
    }

    pub fn jumps(&self) -> &[usize] {
        &self.jumps
    }

    /// Number of planned states including the anchor.
    pub fn horizon_tokens(&self) -> usize {
        self.jumps.len() + 1
    }

    /// Environment steps between the anchor and the last token.
    pub fn total_span(&self) -> usize {
        self.jumps.iter().sum()
    }

    pub fn first_jump(&self) -> usize {
        self.jumps[0]
    }

    pub fn time_offsets(&self) -> TimeOffsets {
        let mut offsets = Vec::with_capacity(self.jumps.len() + 1);
        let mut acc = 0;
        offsets.push(acc);
        for &k in &self.jumps {
            acc += k;
            offsets.push(acc);
        }
        TimeOffsets(offsets)
    }

    /// Distinct jump sizes, ascending.
    pub fn distinct_jumps(&self) -> Vec<usize> {
        let mut v = self.jumps.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn is_uniform(&self) -> bool {
        self.jumps.windows(2).all(|w| w[0] == w[1])
    }

    /// Run-length encoding of the jumps, i.e. the inverse of [`JumpSchedule::from_ranges`].
    pub fn ranges(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for &k in &self.jumps {
            match out.last_mut() {
                Some((count, jump)) if *jump == k => *count += 1,
                _ => out.push((1, k)),
            }
        }
        out
    }
}

impl TryFrom<Vec<usize>> for JumpSchedule {
    type Error = Error;

    fn try_from(jumps: Vec<usize>) -> Result<Self> {
        Self::new(jumps)
    }
}

impl From<JumpSchedule> for Vec<usize> {
    fn from(s: JumpSchedule) -> Self {
        s.jumps
    }
}

impl fmt::Display for JumpSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .ranges()
            .iter()
            .map(|(c, k)| format!("{c}x{k}"))
            .collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

impl TimeOffsets {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> usize {
        *self.0.last().expect("offsets are never empty")
    }

    /// Successive differences, which reproduce the generating jumps.
    pub fn jumps(&self) -> Vec<usize> {
        self.0.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

impl std::ops::Deref for TimeOffsets {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

/// On-disk schedule description: `{"ranges": [[count, jump], ...]}` with optional
/// per-index overrides `{"overrides": [[i, jump], ...]}` where `i` is the 1-based jump
/// index (`K_i`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub ranges: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<(usize, usize)>,
}

impl ScheduleConfig {
    pub fn from_schedule(schedule: &JumpSchedule) -> Self {
        Self {
            ranges: schedule.ranges(),
            overrides: Vec::new(),
        }
    }

    pub fn build(&self) -> Result<JumpSchedule> {
        let base = JumpSchedule::from_ranges(&self.ranges)?;
        if self.overrides.is_empty() {
            return Ok(base);
        }
        let mut jumps = base.jumps;
        for &(i, k) in &self.overrides {
            if i == 0 || i > jumps.len() {
                return Err(Error::validation(format!(
                    "override index {i} outside K_1..K_{}",
                    jumps.len()
                )));
            }
            jumps[i - 1] = k;
        }
        JumpSchedule::new(jumps)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::validation(format!("bad schedule config: {e}")))
    }
}
