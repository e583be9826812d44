use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Policy;
use crate::error::{Error, Result};
use crate::mdp::{ActionSegment, EngineConfig, TrajectoryState};

/// Per problem, per step, the alternatives a replay policy may emit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayScript {
    pub steps: BTreeMap<String, Vec<Vec<ActionSegment>>>,
}

impl ReplayScript {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Replays scripted segments: at step `t` the candidate with seed `s` is
/// alternative `s mod len` of that step's list.
#[derive(Debug, Clone)]
pub struct ReplayPolicy {
    script: ReplayScript,
    engine: EngineConfig,
}

impl ReplayPolicy {
    pub fn new(script: ReplayScript, engine: EngineConfig) -> Self {
        ReplayPolicy { script, engine }
    }
}

impl Policy for ReplayPolicy {
    fn engine(&self) -> &EngineConfig {
        &self.engine
    }

    fn generate(&self, state: &TrajectoryState, seeds: &[u64]) -> Result<Vec<ActionSegment>> {
        let id = &state.problem().id;
        let t = state.step_index();
        let alternatives = self
            .script
            .steps
            .get(id)
            .and_then(|steps| steps.get(t))
            .filter(|alts| !alts.is_empty())
            .ok_or_else(|| Error::Backend { attempts: 1, message: format!("no script for {id} at step {t}") })?;
        Ok(seeds.iter().map(|&s| alternatives[(s % alternatives.len() as u64) as usize].clone()).collect())
    }
}
