//! Generation and scoring interfaces.
//!
//! Search and data construction talk to a [`Policy`] and a [`RewardModel`]
//! and never learn which model sits behind them. Every random choice is keyed
//! by an explicit per-candidate seed, so results come back in candidate order
//! no matter how the underlying requests were scheduled.

mod fanout;
mod http;
mod replay;
mod reward;
mod synthetic;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{ActionSegment, EngineConfig, TrajectoryState};
use crate::seed::derive_seed;
use crate::synthenv::TaskSuite;

pub use fanout::{fan_out, Gate};
pub use http::{HttpConfig, HttpPolicy, RetryPolicy};
pub use replay::{ReplayPolicy, ReplayScript};
pub use reward::{ConstantReward, LearnedReward, OracleReward};
pub use synthetic::SyntheticPolicy;

/// A generator of fixed-length continuations.
pub trait Policy: Send + Sync {
    fn engine(&self) -> &EngineConfig;

    /// Upper bound on concurrent requests this backend wants in flight.
    fn concurrency_limit(&self) -> usize {
        1
    }

    /// Produces one continuation of `state` per seed, in seed order.
    fn generate(&self, state: &TrajectoryState, seeds: &[u64]) -> Result<Vec<ActionSegment>>;
}

/// A step-level scorer of `(state, action)` pairs.
pub trait RewardModel: Send + Sync {
    /// A value in `[0, 1]`.
    fn score(&self, state: &TrajectoryState, action: &ActionSegment) -> Result<f64>;

    fn score_batch(&self, state: &TrajectoryState, actions: &[ActionSegment]) -> Result<Vec<f64>> {
        actions.iter().map(|a| self.score(state, a)).collect()
    }
}

fn check_open(state: &TrajectoryState, engine: &EngineConfig) -> Result<()> {
    if state.is_terminal() {
        return Err(Error::usage("cannot sample from a terminal state"));
    }
    if state.step_index() >= engine.max_steps {
        return Err(Error::usage("state is already at max_steps"));
    }
    Ok(())
}

/// Seeds for `count` candidates at the state's step.
pub fn candidate_seeds(state: &TrajectoryState, count: usize, seed: u64) -> Vec<u64> {
    let t = state.step_index() as u64;
    (0..count as u64).map(|i| derive_seed(seed, t, i)).collect()
}

/// Samples `count` candidate continuations of `state`.
pub fn sample_continuations(
    policy: &dyn Policy,
    state: &TrajectoryState,
    count: usize,
    seed: u64,
) -> Result<Vec<ActionSegment>> {
    if count == 0 {
        return Err(Error::usage("count must be at least 1"));
    }
    generate_checked(policy, state, &candidate_seeds(state, count, seed))
}

/// Calls the policy and validates what it returns.
pub fn generate_checked(policy: &dyn Policy, state: &TrajectoryState, seeds: &[u64]) -> Result<Vec<ActionSegment>> {
    let engine = policy.engine();
    check_open(state, engine)?;
    let out = policy.generate(state, seeds)?;
    if out.len() != seeds.len() {
        return Err(Error::Protocol(format!("asked for {} continuations, got {}", seeds.len(), out.len())));
    }
    for seg in &out {
        seg.check(engine.segment_length).map_err(|e| Error::Protocol(e.to_string()))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub state: TrajectoryState,
    /// Stopped at `max_steps` without a terminal segment.
    pub truncated: bool,
}

/// Extends `state` one sampled segment at a time until it is terminal or
/// capped. Step `t` uses seed `derive_seed(seed, t, 0)`.
pub fn rollout_to_completion(policy: &dyn Policy, state: &TrajectoryState, seed: u64) -> Result<Rollout> {
    let engine = policy.engine();
    check_open(state, engine)?;
    let mut cur = state.clone();
    while cur.is_open(engine) {
        let seg =
            generate_checked(policy, &cur, &candidate_seeds(&cur, 1, seed))?.pop().expect("one segment requested");
        cur = cur.append_action(seg, engine)?;
    }
    let truncated = !cur.is_terminal();
    Ok(Rollout { state: cur, truncated })
}

/// Serializable choice of policy backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyDescriptor {
    /// The synthetic environment's built-in policy.
    Synthetic,
    /// Scripted continuations loaded from a JSON file.
    Replay {
        script: PathBuf,
    },
    Http(HttpConfig),
}

impl PolicyDescriptor {
    pub fn build(&self, engine: &EngineConfig, suite: Option<&TaskSuite>) -> Result<Box<dyn Policy>> {
        engine.validate()?;
        Ok(match self {
            PolicyDescriptor::Synthetic => {
                let suite = suite.ok_or_else(|| Error::usage("synthetic policy needs a task suite"))?;
                Box::new(SyntheticPolicy::new(suite, engine.clone()))
            }
            PolicyDescriptor::Replay { script } => {
                Box::new(ReplayPolicy::new(ReplayScript::read(script)?, engine.clone()))
            }
            PolicyDescriptor::Http(cfg) => Box::new(HttpPolicy::new(cfg.clone(), engine.clone())?),
        })
    }
}

/// Serializable choice of reward backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardDescriptor {
    /// Exact success probability from the synthetic environment.
    Oracle,
    /// A trained scorer checkpoint.
    Learned {
        checkpoint: PathBuf,
    },
    Constant {
        value: f64,
    },
}

impl RewardDescriptor {
    pub fn build(&self, engine: &EngineConfig, suite: Option<&TaskSuite>) -> Result<Box<dyn RewardModel>> {
        Ok(match self {
            RewardDescriptor::Oracle => {
                let suite = suite.ok_or_else(|| Error::usage("oracle reward needs a task suite"))?;
                Box::new(OracleReward::new(suite))
            }
            RewardDescriptor::Learned { checkpoint } => {
                let model = crate::prmtrain::ScorerModel::load(checkpoint)?;
                model.check_engine(engine)?;
                Box::new(LearnedReward::new(model))
            }
            RewardDescriptor::Constant { value } => Box::new(ConstantReward::new(*value)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthenv::{SuiteSpec, SyntheticTask};
    use std::sync::Arc;

    fn one_task(depth: usize, slip: f64) -> TaskSuite {
        TaskSuite::new(vec![SyntheticTask {
            depth,
            branching: 3,
            correct_path: vec![1; depth],
            slip_prob: vec![slip; depth],
            recovery_prob: 0.0,
            seed: 9,
        }])
        .unwrap()
    }

    #[test]
    fn synthetic_sampling_is_seeded() {
        let suite = TaskSuite::generate(&SuiteSpec { count: 3, ..SuiteSpec::default() }).unwrap();
        let policy = SyntheticPolicy::new(&suite, EngineConfig::default());
        let state = TrajectoryState::new(suite.problems()[0].clone());
        let a = sample_continuations(&policy, &state, 3, 77).unwrap();
        let b = sample_continuations(&policy, &state, 3, 77).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
    }

    #[test]
    fn depth_one_gives_terminal_segment() {
        let suite = one_task(1, 0.2);
        let policy = SyntheticPolicy::new(&suite, EngineConfig::default());
        let state = TrajectoryState::new(suite.problems()[0].clone());
        let segs = sample_continuations(&policy, &state, 1, 1).unwrap();
        assert!(segs[0].terminal);
    }

    #[test]
    fn candidate_prefix_is_stable_under_count() {
        let suite = one_task(4, 0.5);
        let policy = SyntheticPolicy::new(&suite, EngineConfig::default());
        let state = TrajectoryState::new(suite.problems()[0].clone());
        let few = sample_continuations(&policy, &state, 3, 5).unwrap();
        let many = sample_continuations(&policy, &state, 12, 5).unwrap();
        assert_eq!(few[..], many[..3]);
    }

    #[test]
    fn rollout_reaches_depth() {
        let suite = one_task(2, 0.2);
        let policy = SyntheticPolicy::new(&suite, EngineConfig::default());
        let r = rollout_to_completion(&policy, &TrajectoryState::new(suite.problems()[0].clone()), 3).unwrap();
        assert!(!r.truncated);
        assert_eq!(r.state.step_index(), 2);
        assert!(r.state.is_terminal());
    }

    #[test]
    fn rollout_cap_is_flagged() {
        let suite = one_task(2, 0.2);
        let engine = EngineConfig { max_steps: 1, ..EngineConfig::default() };
        let policy = SyntheticPolicy::new(&suite, engine);
        let r = rollout_to_completion(&policy, &TrajectoryState::new(suite.problems()[0].clone()), 3).unwrap();
        assert!(r.truncated);
        assert_eq!(r.state.step_index(), 1);
    }

    #[test]
    fn empirical_rate_matches_dp() {
        let suite = one_task(4, 0.3);
        let task = &suite.tasks()[0];
        let cfg = EngineConfig::default();
        let policy = SyntheticPolicy::new(&suite, cfg.clone());
        let root = TrajectoryState::new(Arc::new(task.to_problem()));
        let n = 2000;
        let hits = (0..n)
            .filter(|&i| rollout_to_completion(&policy, &root, derive_seed(1, 99, i)).unwrap().state.is_correct(&cfg))
            .count();
        let p = task.root().true_success_prob();
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - p).abs() <= 3.0 * se, "rate {} vs {p}", hits as f64 / n as f64);
    }

    #[test]
    fn oracle_scores() {
        let suite = TaskSuite::new(vec![SyntheticTask {
            depth: 2,
            branching: 3,
            correct_path: vec![0, 2],
            slip_prob: vec![0.2, 0.2],
            recovery_prob: 0.0,
            seed: 1,
        }])
        .unwrap();
        let cfg = EngineConfig::default();
        let oracle = OracleReward::new(&suite);
        let task = &suite.tasks()[0];
        let state = TrajectoryState::new(Arc::new(task.to_problem()));
        let on = task.root().render_segment(0, &cfg).unwrap();
        let off = task.root().render_segment(1, &cfg).unwrap();
        assert!((oracle.score(&state, &on).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(oracle.score(&state, &off).unwrap(), 0.0);
        assert!(oracle.score_batch(&state, &[]).unwrap().is_empty());
    }

    #[test]
    fn oracle_rejects_ingested_problem() {
        let suite = one_task(2, 0.1);
        let oracle = OracleReward::new(&suite);
        let p = crate::mdp::Problem::new("q", "2+2", "4", crate::mdp::ProblemSource::Ingested).unwrap();
        let seg = ActionSegment::new("step 0: option 1; check consistent\n", 30, false, 30).unwrap();
        assert!(matches!(oracle.score(&TrajectoryState::new(Arc::new(p)), &seg), Err(Error::Unsupported(_))));
    }

    #[test]
    fn constant_reward() {
        let r = ConstantReward::new(0.5).unwrap();
        let suite = one_task(2, 0.1);
        let state = TrajectoryState::new(suite.problems()[0].clone());
        let seg = ActionSegment::new("x", 30, false, 30).unwrap();
        assert_eq!(r.score(&state, &seg).unwrap(), 0.5);
        assert!(ConstantReward::new(1.5).is_err());
    }

    #[test]
    fn descriptor_round_trip() {
        let d = RewardDescriptor::Constant { value: 0.25 };
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(json, r#"{"kind":"constant","value":0.25}"#);
        assert_eq!(serde_json::from_str::<RewardDescriptor>(&json).unwrap(), d);
    }
}
