use std::collections::HashMap;

use super::RewardModel;
use crate::error::{Error, Result};
use crate::mdp::{ActionSegment, ProblemSource, TrajectoryState};
use crate::prmtrain::ScorerModel;
use crate::synthenv::{parse_branch, SyntheticTask, TaskSuite};

/// Scores an action by the exact success probability of the state it leads
/// to under the synthetic policy.
#[derive(Debug, Clone)]
pub struct OracleReward {
    tasks: HashMap<String, SyntheticTask>,
}

impl OracleReward {
    pub fn new(suite: &TaskSuite) -> Self {
        OracleReward { tasks: suite.tasks().iter().map(|t| (t.problem_id(), t.clone())).collect() }
    }
}

impl RewardModel for OracleReward {
    fn score(&self, state: &TrajectoryState, action: &ActionSegment) -> Result<f64> {
        let problem = state.problem();
        let task = match problem.source {
            ProblemSource::Synthetic => self.tasks.get(&problem.id),
            ProblemSource::Ingested => None,
        }
        .ok_or_else(|| Error::Unsupported(format!("no oracle for problem {}", problem.id)))?;
        let branch = parse_branch(&action.text)
            .ok_or_else(|| Error::Unsupported("action was not rendered by the synthetic environment".into()))?;
        Ok(task.position_of_state(state)?.child(branch)?.true_success_prob())
    }
}

/// Scores with a trained [`ScorerModel`].
#[derive(Debug, Clone)]
pub struct LearnedReward {
    model: ScorerModel,
}

impl LearnedReward {
    pub fn new(model: ScorerModel) -> Self {
        LearnedReward { model }
    }

    pub fn model(&self) -> &ScorerModel {
        &self.model
    }
}

impl RewardModel for LearnedReward {
    fn score(&self, state: &TrajectoryState, action: &ActionSegment) -> Result<f64> {
        self.model.predict_text(&state.response_text(), state.step_index(), action)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantReward(f64);

impl ConstantReward {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::usage(format!("constant reward {value} outside [0, 1]")));
        }
        Ok(ConstantReward(value))
    }
}

impl RewardModel for ConstantReward {
    fn score(&self, _state: &TrajectoryState, _action: &ActionSegment) -> Result<f64> {
        Ok(self.0)
    }
}
