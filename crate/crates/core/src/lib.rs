//! Reward-guided step-level search for segment-based reasoning.
//!
//! A response is modelled as a sequence of fixed-length token segments. The
//! crate provides:
//!
//! - [`mdp`] and [`answer`]: the shared vocabulary (problems, segments,
//!   trajectories, answer extraction and matching).
//! - [`synthenv`]: a layered decision-tree environment with exact success
//!   probabilities, used both as a policy and as a brute-force oracle.
//! - [`backends`]: policy and reward interfaces with synthetic, replay and
//!   HTTP (chat-completions) policies and oracle, learned and constant rewards.
//! - [`search`]: single-shot, best-of-N, step-level best-of-N, fixed beam and
//!   annealed beam search under shared token accounting.
//! - [`datagen`]: rollout-labelled step data with class balancing and
//!   per-length reward statistics.
//! - [`prmtrain`]: value and margin-rank losses, a hashed-feature MLP scorer
//!   with analytic gradients, and a deterministic trainer.

pub mod answer;
pub mod backends;
pub mod datagen;
pub mod error;
pub mod mdp;
pub mod prmtrain;
pub mod search;
pub mod seed;
pub mod synthenv;

pub use error::{Error, Result};
pub use mdp::{ActionSegment, EngineConfig, Problem, ProblemSource, TrajectoryState};
