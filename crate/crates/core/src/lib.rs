//! Mixed-density diffusion planning.
//!
//! A single flat diffusion model denoises state-only plans whose tokens sit at
//! non-uniform environment-time offsets given by a [`schedule::JumpSchedule`]. Candidate
//! plans are ranked by a learned value model and turned into actions by a gap-conditioned
//! inverse dynamics model. A continuous point maze provides the offline data and the
//! closed-loop test bed.

pub mod checkpoint;
pub mod commands;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod env;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod invdyn;
pub mod nn;
pub mod planner;
pub mod scalar;
pub mod schedule;

pub use error::{Error, Result};
pub use schedule::{JumpSchedule, ScheduleConfig, TimeOffsets};
