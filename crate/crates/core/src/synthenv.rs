//! Layered decision-tree tasks with exactly computable success probabilities.
//!
//! A task has `depth` decision steps with `branching` options each and one
//! fully correct branch sequence. The built-in policy follows the correct
//! branch at step `t` with probability `1 - slip_prob[t]` and otherwise picks
//! one of the other branches uniformly; once off the correct path it picks
//! uniformly among all branches. A complete off-path trajectory still ends
//! correct when a keyed hash of its branch history falls below
//! `recovery_prob`, so every outcome is a deterministic function of the
//! branch history and success probabilities are exact sums over the tree.
//!
//! Rendered segments carry a check word ("consistent" or "doubtful") that
//! agrees with the on-path status of the new state with probability
//! [`cue_reliability`], which grows with the step index. Learned scorers can
//! read it; the oracle ignores it.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{ActionSegment, EngineConfig, Problem, ProblemSource, TrajectoryState};
use crate::seed::{derive_seed, hash_seq, splitmix64, unit_interval};

pub const ENUMERATION_LIMIT: u64 = 10_000;
pub const SUITE_FORMAT_VERSION: u64 = 1;

const GOLD_SALT: u64 = 0x601D;
const WRONG_SALT: u64 = 0x3A0B;
const RECOVERY_SALT: u64 = 0x7EC0;
const CUE_SALT: u64 = 0xC0E5;
const BRANCH_SALT: u64 = 0xB4A7;

const CUE_POSITIVE: &str = "consistent";
const CUE_NEGATIVE: &str = "doubtful";

/// Probability that the check word printed at `step` tells the truth.
pub fn cue_reliability(step: usize) -> f64 {
    1.0 - 0.08 * 0.5f64.powi(step.min(60) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub depth: usize,
    pub branching: usize,
    pub correct_path: Vec<usize>,
    pub slip_prob: Vec<f64>,
    pub recovery_prob: f64,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("task depth must be at least 1"));
        }
        if self.branching < 2 {
            return Err(Error::invalid(format!("task branching must be at least 2, got {}", self.branching)));
        }
        if self.correct_path.len() != self.depth || self.slip_prob.len() != self.depth {
            return Err(Error::invalid("correct_path and slip_prob must have one entry per step"));
        }
        if self.correct_path.iter().any(|&b| b >= self.branching) {
            return Err(Error::invalid("correct_path entry out of range"));
        }
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !self.slip_prob.iter().copied().all(prob_ok) || !prob_ok(self.recovery_prob) {
            return Err(Error::invalid("probabilities must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn problem_id(&self) -> String {
        format!("syn-{:016x}", self.seed)
    }

    pub fn gold_answer(&self) -> String {
        (100 + splitmix64(self.seed ^ GOLD_SALT) % 900).to_string()
    }

    pub fn to_problem(&self) -> Problem {
        Problem {
            id: self.problem_id(),
            prompt: format!(
                "Decision task {}: make {} choices, each among options 0..{}, and report the resulting code.",
                self.problem_id(),
                self.depth,
                self.branching - 1
            ),
            media: None,
            gold_answer: self.gold_answer(),
            source: ProblemSource::Synthetic,
        }
    }

    pub fn root(&self) -> OraclePosition<'_> {
        OraclePosition { task: self, history: Vec::new() }
    }

    pub fn position(&self, history: &[usize]) -> Result<OraclePosition<'_>> {
        if history.len() > self.depth || history.iter().any(|&b| b >= self.branching) {
            return Err(Error::usage("branch history does not fit the task"));
        }
        Ok(OraclePosition { task: self, history: history.to_vec() })
    }

    /// Recovers the branch history from a state whose segments were rendered
    /// by [`OraclePosition::render_segment`].
    pub fn position_of_state(&self, state: &TrajectoryState) -> Result<OraclePosition<'_>> {
        let history = state
            .segments()
            .iter()
            .map(|s| parse_branch(&s.text))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Unsupported("state was not rendered by the synthetic environment".into()))?;
        self.position(&history)
    }

    fn is_on_path(&self, history: &[usize]) -> bool {
        history.iter().zip(&self.correct_path).all(|(a, b)| a == b)
    }

    fn leaf_success(&self, history: &[usize]) -> bool {
        self.is_on_path(history) || unit_interval(hash_seq(self.seed ^ RECOVERY_SALT, history)) < self.recovery_prob
    }

    fn branch_probabilities(&self, history: &[usize], on_path: bool) -> Vec<f64> {
        let b = self.branching;
        if on_path {
            let t = history.len();
            let slip = self.slip_prob[t];
            let mut p = vec![slip / (b - 1) as f64; b];
            p[self.correct_path[t]] = 1.0 - slip;
            p
        } else {
            vec![1.0 / b as f64; b]
        }
    }

    /// Backward recursion over the subtree below `history`.
    fn value(&self, history: &mut Vec<usize>, on_path: bool) -> f64 {
        if history.len() == self.depth {
            return if self.leaf_success(history) { 1.0 } else { 0.0 };
        }
        if !on_path {
            if self.recovery_prob == 0.0 {
                return 0.0;
            }
            if self.recovery_prob >= 1.0 {
                return 1.0;
            }
        }
        let probs = self.branch_probabilities(history, on_path);
        let t = history.len();
        let mut total = 0.0;
        for (branch, p) in probs.into_iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let child_on = on_path && branch == self.correct_path[t];
            history.push(branch);
            total += p * self.value(history, child_on);
            history.pop();
        }
        total
    }
}

/// A node of the task tree.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePosition<'a> {
    task: &'a SyntheticTask,
    history: Vec<usize>,
}

impl<'a> OraclePosition<'a> {
    pub fn task(&self) -> &'a SyntheticTask {
        self.task
    }

    pub fn branch_history(&self) -> &[usize] {
        &self.history
    }

    pub fn step(&self) -> usize {
        self.history.len()
    }

    pub fn is_complete(&self) -> bool {
        self.history.len() == self.task.depth
    }

    pub fn on_path(&self) -> bool {
        self.task.is_on_path(&self.history)
    }

    pub fn child(&self, branch: usize) -> Result<OraclePosition<'a>> {
        if self.is_complete() {
            return Err(Error::usage("position is already at full depth"));
        }
        if branch >= self.task.branching {
            return Err(Error::usage(format!("branch {branch} out of range 0..{}", self.task.branching)));
        }
        let mut history = self.history.clone();
        history.push(branch);
        Ok(OraclePosition { task: self.task, history })
    }

    /// The built-in policy's distribution over the next branch.
    pub fn branch_probabilities(&self) -> Vec<f64> {
        self.task.branch_probabilities(&self.history, self.on_path())
    }

    /// Draws the next branch from the built-in policy, keyed by `seed`.
    pub fn sample_branch(&self, seed: u64) -> usize {
        let u = unit_interval(splitmix64(seed ^ BRANCH_SALT));
        let probs = self.branch_probabilities();
        let mut acc = 0.0;
        for (b, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return b;
            }
        }
        // Rounding left a sliver above the last cumulative sum.
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    /// Exact probability that a rollout of the built-in policy from here ends
    /// with a correct answer.
    pub fn true_success_prob(&self) -> f64 {
        let mut history = self.history.clone();
        self.task.value(&mut history, self.on_path()).clamp(0.0, 1.0)
    }

    /// Whether a complete trajectory ends correct.
    pub fn is_success(&self) -> Option<bool> {
        self.is_complete().then(|| self.task.leaf_success(&self.history))
    }

    /// Renders the segment produced by choosing `branch` here.
    pub fn render_segment(&self, branch: usize, cfg: &EngineConfig) -> Result<ActionSegment> {
        let next = self.child(branch)?;
        let t = self.step();
        let u = unit_interval(hash_seq(self.task.seed ^ CUE_SALT, &next.history));
        let truthful = u < cue_reliability(t);
        let cue = if next.on_path() == truthful { CUE_POSITIVE } else { CUE_NEGATIVE };
        let mut text = format!("step {t}: option {branch}; check {cue}\n");
        if next.is_complete() {
            let answer = if next.is_success() == Some(true) {
                self.task.gold_answer()
            } else {
                let gold: u64 = self.task.gold_answer().parse().unwrap_or(0);
                (gold + 1 + hash_seq(self.task.seed ^ WRONG_SALT, &next.history) % 97).to_string()
            };
            text.push_str(&format!("{} {answer}\n", cfg.answer_marker));
            let tokens = cfg.segment_length.div_ceil(2);
            ActionSegment::new(text, tokens, true, cfg.segment_length)
        } else {
            ActionSegment::new(text, cfg.segment_length, false, cfg.segment_length)
        }
    }
}

/// Extracts `j` from a segment starting `step <t>: option <j>;`.
pub fn parse_branch(text: &str) -> Option<usize> {
    let rest = text.strip_prefix("step ")?;
    let (_, rest) = rest.split_once(": option ")?;
    let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedTrajectory {
    pub branches: Vec<usize>,
    pub success: bool,
    /// Probability of this exact branch sequence under the built-in policy.
    pub probability: f64,
}

/// Lists every branch sequence of a task with its policy mass.
pub fn enumerate_trajectories(task: &SyntheticTask) -> Result<Vec<EnumeratedTrajectory>> {
    task.validate()?;
    let count = (task.branching as u128).checked_pow(task.depth as u32).unwrap_or(u128::MAX);
    if count > u128::from(ENUMERATION_LIMIT) {
        return Err(Error::TooLarge { count, limit: ENUMERATION_LIMIT });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut branches = vec![0usize; task.depth];
    loop {
        let mut probability = 1.0;
        for t in 0..task.depth {
            let prefix = &branches[..t];
            let p = task.branch_probabilities(prefix, task.is_on_path(prefix));
            probability *= p[branches[t]];
        }
        out.push(EnumeratedTrajectory {
            branches: branches.clone(),
            success: task.leaf_success(&branches),
            probability,
        });
        // Odometer increment, last step fastest.
        let mut i = task.depth;
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            branches[i] += 1;
            if branches[i] < task.branching {
                break;
            }
            branches[i] = 0;
        }
    }
}

/// How slip probabilities are drawn for generated tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VarianceProfile {
    /// Large first-step slip decaying geometrically; slips below 0.02 are
    /// zeroed. Reward variance is high early and vanishes late.
    Shaped,
    /// The same slip at every step.
    Flat { slip: f64 },
    /// No slips: the policy always follows the correct path.
    Deterministic,
}

impl VarianceProfile {
    fn slips(&self, depth: usize, seed: u64) -> Vec<f64> {
        match *self {
            VarianceProfile::Shaped => {
                let s0 = 0.35 + 0.20 * unit_interval(derive_seed(seed, 1, 0));
                let decay = 0.25 + 0.10 * unit_interval(derive_seed(seed, 1, 1));
                (0..depth)
                    .map(|t| {
                        let s = s0 * decay.powi(t as i32);
                        if s < 0.02 {
                            0.0
                        } else {
                            (s * 1e4).round() / 1e4
                        }
                    })
                    .collect()
            }
            VarianceProfile::Flat { slip } => vec![slip; depth],
            VarianceProfile::Deterministic => vec![0.0; depth],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub count: usize,
    pub depth_min: usize,
    pub depth_max: usize,
    pub branching: usize,
    pub profile: VarianceProfile,
    pub recovery_prob: f64,
    pub seed: u64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            count: 200,
            depth_min: 3,
            depth_max: 12,
            branching: 3,
            profile: VarianceProfile::Shaped,
            recovery_prob: 0.0,
            seed: 0,
        }
    }
}

/// An ordered collection of tasks with unique problem ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    tasks: Vec<SyntheticTask>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct SuiteFile {
    format_version: u64,
    tasks: Vec<SyntheticTask>,
}

impl TaskSuite {
    pub fn new(tasks: Vec<SyntheticTask>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tasks.len());
        for (i, task) in tasks.iter().enumerate() {
            task.validate()?;
            if index.insert(task.problem_id(), i).is_some() {
                return Err(Error::invalid(format!("duplicate task id {}", task.problem_id())));
            }
        }
        Ok(TaskSuite { tasks, index })
    }

    pub fn generate(spec: &SuiteSpec) -> Result<Self> {
        if spec.depth_min == 0 || spec.depth_min > spec.depth_max {
            return Err(Error::usage("depth range must satisfy 1 <= depth_min <= depth_max"));
        }
        if spec.branching < 2 {
            return Err(Error::usage(format!("branching must be at least 2, got {}", spec.branching)));
        }
        let tasks = (0..spec.count)
            .map(|i| {
                let seed = derive_seed(spec.seed, 0, i as u64);
                let span = (spec.depth_max - spec.depth_min + 1) as u64;
                let depth = spec.depth_min + (derive_seed(seed, 2, 0) % span) as usize;
                let correct_path =
                    (0..depth).map(|t| (derive_seed(seed, 3, t as u64) % spec.branching as u64) as usize).collect();
                SyntheticTask {
                    depth,
                    branching: spec.branching,
                    correct_path,
                    slip_prob: spec.profile.slips(depth, seed),
                    recovery_prob: spec.recovery_prob,
                    seed,
                }
            })
            .collect();
        TaskSuite::new(tasks)
    }

    pub fn tasks(&self) -> &[SyntheticTask] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, problem_id: &str) -> Option<&SyntheticTask> {
        self.index.get(problem_id).map(|&i| &self.tasks[i])
    }

    pub fn problems(&self) -> Vec<Arc<Problem>> {
        self.tasks.iter().map(|t| Arc::new(t.to_problem())).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = SuiteFile { format_version: SUITE_FORMAT_VERSION, tasks: self.tasks.clone() };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SuiteFile = serde_json::from_str(text)?;
        if file.format_version != SUITE_FORMAT_VERSION {
            return Err(Error::Version { found: file.format_version, expected: SUITE_FORMAT_VERSION });
        }
        TaskSuite::new(file.tasks)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        TaskSuite::from_json(&std::fs::read_to_string(path)?)
    }
}
