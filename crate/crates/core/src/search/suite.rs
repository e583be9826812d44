use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{single_shot, SearchResult, Strategy};
use crate::backends::{Policy, RewardModel};
use crate::error::{Error, Result};
use crate::mdp::Problem;
use crate::seed::{derive_seed, hash_str};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemOutcome {
    pub problem_id: String,
    pub correct: bool,
    pub tokens: u64,
    /// Tokens of the paired single-shot run.
    pub baseline_tokens: Option<u64>,
    pub token_ratio: Option<f64>,
    pub steps: usize,
    pub answer: Option<String>,
    pub truncated: bool,
    pub error: Option<String>,
}

/// Per-problem outcomes and aggregates of one strategy over a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub strategy: String,
    pub seed: u64,
    pub problems: Vec<ProblemOutcome>,
    /// Correct over all problems; failed problems count as incorrect.
    pub accuracy: f64,
    pub mean_tokens: f64,
    /// Mean of per-problem ratios against the paired single-shot run.
    pub mean_token_ratio: f64,
    pub failures: usize,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    problem_id: &'a str,
    strategy: &'a str,
    correct: bool,
    tokens: u64,
    token_ratio: Option<f64>,
}

impl SuiteReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for p in &self.problems {
            w.serialize(CsvRow {
                problem_id: &p.problem_id,
                strategy: &self.strategy,
                correct: p.correct,
                tokens: p.tokens,
                token_ratio: p.token_ratio,
            })
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_files(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        std::fs::write(json_path, self.to_json()?)?;
        self.write_csv(std::fs::File::create(csv_path)?)
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

/// Seed used for one problem of a suite run.
pub fn problem_seed(seed: u64, problem_id: &str) -> u64 {
    derive_seed(seed, hash_str(problem_id), 0)
}

/// Runs `strategy` on every problem in parallel, each paired with a
/// single-shot run under the same seed.
pub fn run_suite(
    problems: &[Arc<Problem>],
    strategy: &Strategy,
    policy: &dyn Policy,
    reward: &dyn RewardModel,
    seed: u64,
) -> Result<SuiteReport> {
    run_suite_with_progress(problems, strategy, policy, reward, seed, &|| {})
}

/// [`run_suite`], calling `progress` once per finished problem.
pub fn run_suite_with_progress(
    problems: &[Arc<Problem>],
    strategy: &Strategy,
    policy: &dyn Policy,
    reward: &dyn RewardModel,
    seed: u64,
    progress: &(dyn Fn() + Sync),
) -> Result<SuiteReport> {
    if problems.is_empty() {
        return Err(Error::usage("suite has no problems"));
    }
    strategy.validate()?;
    let outcomes: Vec<ProblemOutcome> = problems
        .par_iter()
        .map(|p| {
            let s = problem_seed(seed, &p.id);
            let baseline = if *strategy == Strategy::Single {
                None
            } else {
                single_shot(p, policy, s).ok().map(|r| r.tokens_generated)
            };
            let o = outcome(p, strategy.run(p, policy, reward, s), baseline);
            progress();
            o
        })
        .collect();
    let n = outcomes.len() as f64;
    let ok: Vec<&ProblemOutcome> = outcomes.iter().filter(|o| o.error.is_none()).collect();
    let ratios: Vec<f64> = outcomes.iter().filter_map(|o| o.token_ratio).collect();
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    Ok(SuiteReport {
        strategy: strategy.to_string(),
        seed,
        accuracy: outcomes.iter().filter(|o| o.correct).count() as f64 / n,
        mean_tokens: mean(&ok.iter().map(|o| o.tokens as f64).collect::<Vec<_>>()),
        mean_token_ratio: mean(&ratios),
        failures: outcomes.len() - ok.len(),
        problems: outcomes,
    })
}

fn outcome(p: &Problem, result: Result<SearchResult>, baseline: Option<u64>) -> ProblemOutcome {
    match result {
        Ok(r) => {
            let baseline = baseline.or((r.strategy == "single").then_some(r.tokens_generated));
            ProblemOutcome {
                problem_id: p.id.clone(),
                correct: r.correct == Some(true),
                tokens: r.tokens_generated,
                baseline_tokens: baseline,
                token_ratio: baseline.filter(|&b| b > 0).map(|b| r.tokens_generated as f64 / b as f64),
                steps: r.trajectory.step_index(),
                answer: r.answer,
                truncated: r.truncated,
                error: None,
            }
        }
        Err(e) => ProblemOutcome {
            problem_id: p.id.clone(),
            correct: false,
            tokens: 0,
            baseline_tokens: baseline,
            token_ratio: None,
            steps: 0,
            answer: None,
            truncated: false,
            error: Some(e.to_string()),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{OracleReward, SyntheticPolicy};
    use crate::mdp::EngineConfig;
    use crate::search::BasSchedule;
    use crate::synthenv::{SuiteSpec, TaskSuite, VarianceProfile};

    #[test]
    fn deterministic_single_problem() {
        let suite = TaskSuite::generate(&SuiteSpec {
            count: 1,
            profile: VarianceProfile::Deterministic,
            ..SuiteSpec::default()
        })
        .unwrap();
        let policy = SyntheticPolicy::new(&suite, EngineConfig::default());
        let reward = OracleReward::new(&suite);
        let r = run_suite(&suite.problems(), &Strategy::Single, &policy, &reward, 1).unwrap();
        assert!(r.accuracy == 0.0 || r.accuracy == 1.0);
        assert_eq!(r.mean_token_ratio, 1.0);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let suite = TaskSuite::generate(&SuiteSpec { count: 12, ..SuiteSpec::default() }).unwrap();
        let policy = SyntheticPolicy::new(&suite, EngineConfig::default());
        let reward = OracleReward::new(&suite);
        let strategy = Strategy::Bas { schedule: BasSchedule::default(), final_rule: Default::default() };
        let a = run_suite(&suite.problems(), &strategy, &policy, &reward, 7).unwrap();
        let b = run_suite(&suite.problems(), &strategy, &policy, &reward, 7).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(SuiteReport::from_json(&a.to_json().unwrap()).unwrap(), a);
        let mut csv = Vec::new();
        a.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("problem_id,strategy,correct,tokens,token_ratio\n"));
        assert_eq!(text.lines().count(), 13);
    }

    #[test]
    fn failures_are_recorded() {
        let suite = TaskSuite::generate(&SuiteSpec { count: 2, ..SuiteSpec::default() }).unwrap();
        let other = TaskSuite::generate(&SuiteSpec { count: 1, seed: 99, ..SuiteSpec::default() }).unwrap();
        let policy = SyntheticPolicy::new(&suite, EngineConfig::default());
        let reward = OracleReward::new(&suite);
        let mut problems = suite.problems();
        problems.extend(other.problems());
        let r = run_suite(&problems, &Strategy::StepBestOfN { n: 2 }, &policy, &reward, 1).unwrap();
        assert_eq!(r.failures, 1);
        assert!(r.problems[2].error.is_some());
    }
}
