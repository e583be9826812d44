use std::collections::HashMap;

use super::Policy;
use crate::error::{Error, Result};
use crate::mdp::{ActionSegment, EngineConfig, TrajectoryState};
use crate::synthenv::{SyntheticTask, TaskSuite};

/// The synthetic environment's built-in policy, served for every task of a
/// suite. Output depends only on the task, the state and the seed.
#[derive(Debug, Clone)]
pub struct SyntheticPolicy {
    engine: EngineConfig,
    tasks: HashMap<String, SyntheticTask>,
}

impl SyntheticPolicy {
    pub fn new(suite: &TaskSuite, engine: EngineConfig) -> Self {
        let tasks = suite.tasks().iter().map(|t| (t.problem_id(), t.clone())).collect();
        SyntheticPolicy { engine, tasks }
    }

    pub fn task(&self, problem_id: &str) -> Option<&SyntheticTask> {
        self.tasks.get(problem_id)
    }
}

impl Policy for SyntheticPolicy {
    fn engine(&self) -> &EngineConfig {
        &self.engine
    }

    fn generate(&self, state: &TrajectoryState, seeds: &[u64]) -> Result<Vec<ActionSegment>> {
        let id = &state.problem().id;
        let task = self
            .tasks
            .get(id)
            .ok_or_else(|| Error::Unsupported(format!("problem {id} is not in the synthetic suite")))?;
        let pos = task.position_of_state(state)?;
        seeds.iter().map(|&s| pos.render_segment(pos.sample_branch(s), &self.engine)).collect()
    }
}
