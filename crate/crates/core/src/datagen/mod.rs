//! Rollout-labelled reward data.
//!
//! Construction walks each problem greedily: at step `t` it samples `M_t`
//! candidate segments, labels each with the success rate of `N_t` rollouts,
//! keeps a class-balanced subset as training triplets and advances along the
//! best-labelled candidate.

mod balance;
mod dataset;
mod stats;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{fan_out, rollout_to_completion, sample_continuations, Policy};
use crate::error::{Error, Result};
use crate::mdp::{ActionSegment, Problem, TrajectoryState};
use crate::seed::{derive_seed, hash_str};
use crate::synthenv::TaskSuite;

pub use balance::{balance_candidates, BalanceConfig};
pub use dataset::{read_dataset, write_dataset, Dataset, DATASET_FORMAT_VERSION};
pub use stats::{step_bucket_stats, write_stats_csv, StepBucketStats};

const ESTIMATE_SALT: u64 = 0xE571_3A7E;
const BALANCE_SALT: u64 = 0xBA1A_4CE0;

/// Candidates and rollouts per step: `early[t]` for `t < early.len()`,
/// `tail` afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSchedule {
    pub early: Vec<(usize, usize)>,
    pub tail: (usize, usize),
}

impl Default for SamplingSchedule {
    fn default() -> Self {
        SamplingSchedule { early: vec![(8, 8); 3], tail: (4, 4) }
    }
}

impl SamplingSchedule {
    pub fn uniform(m: usize, n: usize) -> Self {
        SamplingSchedule { early: Vec::new(), tail: (m, n) }
    }

    pub fn validate(&self) -> Result<()> {
        let (tm, tn) = self.tail;
        if tm == 0 || tn == 0 {
            return Err(Error::usage("tail M and N must be at least 1"));
        }
        for &(m, n) in &self.early {
            if m < tm || n < tn {
                return Err(Error::usage("early-step M and N must be at least the tail values"));
            }
        }
        Ok(())
    }

    /// `(M_t, N_t)`.
    pub fn at(&self, t: usize) -> (usize, usize) {
        self.early.get(t).copied().unwrap_or(self.tail)
    }
}

/// One labelled `(state, action)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTriplet {
    pub problem_id: String,
    pub step_index: usize,
    pub state_text: String,
    pub action_text: String,
    pub action_tokens: u32,
    pub reward: f64,
    pub n_rollouts: usize,
    pub chosen: bool,
    pub source: String,
}

impl RewardTriplet {
    pub fn validate(&self, segment_length: u32) -> Result<()> {
        if !(0.0..=1.0).contains(&self.reward) {
            return Err(Error::invalid(format!("reward {} outside [0, 1]", self.reward)));
        }
        if self.n_rollouts == 0 {
            return Err(Error::invalid("n_rollouts must be at least 1"));
        }
        let c = self.reward * self.n_rollouts as f64;
        if (c - c.round()).abs() > 1e-9 {
            return Err(Error::invalid(format!("reward {} is not a multiple of 1/{}", self.reward, self.n_rollouts)));
        }
        if self.action_tokens == 0 || self.action_tokens > segment_length {
            return Err(Error::invalid(format!("action_tokens {} outside 1..={segment_length}", self.action_tokens)));
        }
        if self.problem_id.is_empty() {
            return Err(Error::invalid("empty problem_id"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub reward: f64,
    pub outcomes: Vec<bool>,
}

/// Success rate of `n` rollouts after taking `action` in `state`. A rollout
/// that stops at `max_steps` without finishing counts as incorrect; a
/// terminal action is judged directly, once per rollout slot.
pub fn estimate_action_reward(
    state: &TrajectoryState,
    action: &ActionSegment,
    policy: &dyn Policy,
    n: usize,
    seed: u64,
) -> Result<Estimate> {
    if n == 0 {
        return Err(Error::usage("N must be at least 1"));
    }
    let engine = policy.engine();
    let next = state.append_action(action.clone(), engine)?;
    let outcomes = if next.is_open(engine) {
        fan_out(n, policy.concurrency_limit(), |i| {
            rollout_to_completion(policy, &next, derive_seed(seed, 0, i as u64))
                .map(|r| !r.truncated && r.state.is_correct(engine))
                .map_err(|e| Error::Rollout { index: i, source: Box::new(e) })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?
    } else {
        vec![next.is_correct(engine); n]
    };
    let hits = outcomes.iter().filter(|&&o| o).count();
    Ok(Estimate { reward: hits as f64 / n as f64, outcomes })
}

#[derive(Debug)]
pub struct ProblemConstruction {
    pub triplets: Vec<RewardTriplet>,
    /// The path taken through the best-labelled candidates.
    pub trajectory: TrajectoryState,
    /// Set when a step produced no usable candidate; triplets of earlier
    /// steps are kept.
    pub error: Option<Error>,
}

/// Builds the triplets of one problem.
pub fn construct_for_problem(
    problem: &Arc<Problem>,
    policy: &dyn Policy,
    schedule: &SamplingSchedule,
    balance: &BalanceConfig,
    seed: u64,
) -> Result<ProblemConstruction> {
    schedule.validate()?;
    let engine = policy.engine();
    let mut state = TrajectoryState::new(Arc::clone(problem));
    let mut triplets = Vec::new();
    let state_error = |step: usize, message: String| Error::Construction { step, message };
    while state.is_open(engine) {
        let t = state.step_index();
        let (m, n) = schedule.at(t);
        let cands = match sample_continuations(policy, &state, m, seed) {
            Ok(c) => c,
            Err(e) => {
                let error = Some(state_error(t, e.to_string()));
                return Ok(ProblemConstruction { triplets, trajectory: state, error });
            }
        };
        let mut labelled = Vec::with_capacity(cands.len());
        let mut last_err = None;
        for (i, cand) in cands.into_iter().enumerate() {
            match estimate_action_reward(
                &state,
                &cand,
                policy,
                n,
                derive_seed(seed ^ ESTIMATE_SALT, t as u64, i as u64),
            ) {
                Ok(est) => labelled.push((cand, est.reward)),
                Err(e) => last_err = Some(e),
            }
        }
        if labelled.is_empty() {
            let message = last_err.map_or_else(|| "no candidates".into(), |e| e.to_string());
            return Ok(ProblemConstruction { triplets, trajectory: state, error: Some(state_error(t, message)) });
        }
        let best = labelled.iter().enumerate().fold(0, |b, (i, (_, r))| if *r > labelled[b].1 { i } else { b });
        let state_text = state.response_text();
        let group: Vec<RewardTriplet> = labelled
            .iter()
            .enumerate()
            .map(|(i, (cand, reward))| RewardTriplet {
                problem_id: problem.id.clone(),
                step_index: t,
                state_text: state_text.clone(),
                action_text: cand.text.clone(),
                action_tokens: cand.token_count,
                reward: *reward,
                n_rollouts: n,
                chosen: i == best,
                source: problem.source.as_str().to_string(),
            })
            .collect();
        triplets.extend(balance_candidates(group, balance, derive_seed(seed ^ BALANCE_SALT, t as u64, 0)));
        let (next, _) = labelled.swap_remove(best);
        state = state.append_action(next, engine)?;
    }
    Ok(ProblemConstruction { triplets, trajectory: state, error: None })
}

#[derive(Debug)]
pub struct ConstructionReport {
    pub dataset: Dataset,
    /// `(problem_id, message)` for every problem that stopped early.
    pub failures: Vec<(String, String)>,
}

/// Seed used for one problem during construction.
pub fn construction_seed(seed: u64, problem_id: &str) -> u64 {
    derive_seed(seed, hash_str(problem_id), 1)
}

/// Runs [`construct_for_problem`] over all problems in parallel and
/// concatenates the triplets in problem order.
pub fn construct_dataset(
    problems: &[Arc<Problem>],
    policy: &dyn Policy,
    schedule: &SamplingSchedule,
    balance: &BalanceConfig,
    seed: u64,
) -> Result<ConstructionReport> {
    construct_dataset_with_progress(problems, policy, schedule, balance, seed, &|| {})
}

/// [`construct_dataset`], calling `progress` once per finished problem.
pub fn construct_dataset_with_progress(
    problems: &[Arc<Problem>],
    policy: &dyn Policy,
    schedule: &SamplingSchedule,
    balance: &BalanceConfig,
    seed: u64,
    progress: &(dyn Fn() + Sync),
) -> Result<ConstructionReport> {
    schedule.validate()?;
    balance.validate()?;
    let results: Vec<(String, Result<ProblemConstruction>)> = problems
        .par_iter()
        .map(|p| {
            let r = construct_for_problem(p, policy, schedule, balance, construction_seed(seed, &p.id));
            progress();
            (p.id.clone(), r)
        })
        .collect();
    let mut triplets = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(c) => {
                triplets.extend(c.triplets);
                if let Some(e) = c.error {
                    failures.push((id, e.to_string()));
                }
            }
            Err(e) => failures.push((id, e.to_string())),
        }
    }
    Ok(ConstructionReport { dataset: Dataset { segment_length: policy.engine().segment_length, triplets }, failures })
}

/// The candidates of one state with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGroup {
    pub problem_id: String,
    pub step_index: usize,
    pub state_text: String,
    pub actions: Vec<(String, u32)>,
    pub targets: Vec<f64>,
}

/// Splits triplets into consecutive `(problem_id, step_index)` runs.
pub fn group_triplets(triplets: &[RewardTriplet]) -> Vec<StateGroup> {
    let mut groups: Vec<StateGroup> = Vec::new();
    for tr in triplets {
        let same = groups.last().is_some_and(|g| g.problem_id == tr.problem_id && g.step_index == tr.step_index);
        if !same {
            groups.push(StateGroup {
                problem_id: tr.problem_id.clone(),
                step_index: tr.step_index,
                state_text: tr.state_text.clone(),
                actions: Vec::new(),
                targets: Vec::new(),
            });
        }
        let g = groups.last_mut().expect("pushed above");
        g.actions.push((tr.action_text.clone(), tr.action_tokens));
        g.targets.push(tr.reward);
    }
    groups
}

/// Held-out groups labelled with exact success probabilities: each task is
/// walked along its best-valued candidate, sampling `m` candidates per step.
pub fn oracle_labelled_groups(suite: &TaskSuite, policy: &dyn Policy, m: usize, seed: u64) -> Result<Vec<StateGroup>> {
    let engine = policy.engine();
    let per_task: Vec<Result<Vec<StateGroup>>> = suite
        .tasks()
        .par_iter()
        .map(|task| {
            let mut state = TrajectoryState::new(Arc::new(task.to_problem()));
            let s = construction_seed(seed, &task.problem_id());
            let mut groups = Vec::new();
            while state.is_open(engine) {
                let cands = sample_continuations(policy, &state, m, s)?;
                let pos = task.position_of_state(&state)?;
                let targets = cands
                    .iter()
                    .map(|c| {
                        let b = crate::synthenv::parse_branch(&c.text)
                            .ok_or_else(|| Error::Unsupported("unparseable synthetic segment".into()))?;
                        Ok(pos.child(b)?.true_success_prob())
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let best = targets.iter().enumerate().fold(0, |b, (i, &v)| if v > targets[b] { i } else { b });
                groups.push(StateGroup {
                    problem_id: task.problem_id(),
                    step_index: state.step_index(),
                    state_text: state.response_text(),
                    actions: cands.iter().map(|c| (c.text.clone(), c.token_count)).collect(),
                    targets,
                });
                state = state.append_action(cands[best].clone(), engine)?;
            }
            Ok(groups)
        })
        .collect();
    let mut out = Vec::new();
    for g in per_task {
        out.extend(g?);
    }
    Ok(out)
}
