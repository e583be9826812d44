//! Problems, action segments and trajectory states.
//!
//! A trajectory is the question plus an ordered list of generated segments.
//! Each segment is at most `segment_length` backend tokens; only a terminal
//! segment (one in which the backend reported end-of-sequence) may be shorter.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::answer::{answers_match, extract_final_answer};
use crate::error::{Error, Result};

/// Instruction sent as the system prompt to chat backends.
pub const DEFAULT_PROMPT_TEMPLATE: &str = "Please answer the question and provide the correct answer, e.g., 1, 2, 3, 4, at the end. Give step by step reasoning before you answer, and when you're ready to answer, please use the format \"Final answer: ...\"";

pub const DEFAULT_ANSWER_MARKER: &str = "Final answer:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemSource {
    Synthetic,
    Ingested,
}

impl ProblemSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ProblemSource::Synthetic => "synthetic",
            ProblemSource::Ingested => "ingested",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub prompt: String,
    /// Opaque attachment reference, forwarded to backends untouched.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media: Option<String>,
    pub gold_answer: String,
    pub source: ProblemSource,
}

impl Problem {
    pub fn new(
        id: impl Into<String>,
        prompt: impl Into<String>,
        gold_answer: impl Into<String>,
        source: ProblemSource,
    ) -> Result<Self> {
        let p = Problem { id: id.into(), prompt: prompt.into(), media: None, gold_answer: gold_answer.into(), source };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::invalid("problem id must be nonempty"));
        }
        if self.gold_answer.trim().is_empty() {
            return Err(Error::invalid(format!("problem {}: gold answer must be nonempty", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSegment {
    pub text: String,
    pub token_count: u32,
    /// End-of-sequence was emitted inside this segment.
    pub terminal: bool,
}

impl ActionSegment {
    pub fn new(text: impl Into<String>, token_count: u32, terminal: bool, segment_length: u32) -> Result<Self> {
        let seg = ActionSegment { text: text.into(), token_count, terminal };
        seg.check(segment_length)?;
        Ok(seg)
    }

    /// Checks `1 <= token_count <= L` and that short segments are terminal.
    pub fn check(&self, segment_length: u32) -> Result<()> {
        if self.token_count == 0 || self.token_count > segment_length {
            return Err(Error::invalid(format!(
                "segment token count {} outside 1..={segment_length}",
                self.token_count
            )));
        }
        if self.token_count < segment_length && !self.terminal {
            return Err(Error::invalid(format!(
                "segment of {} tokens is shorter than {segment_length} but not terminal",
                self.token_count
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub segment_length: u32,
    pub max_steps: usize,
    pub prompt_template: String,
    pub answer_marker: String,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            segment_length: 30,
            max_steps: 20,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            answer_marker: DEFAULT_ANSWER_MARKER.to_string(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segment_length == 0 {
            return Err(Error::usage("segment_length must be at least 1"));
        }
        if self.max_steps == 0 {
            return Err(Error::usage("max_steps must be at least 1"));
        }
        if self.answer_marker.is_empty() {
            return Err(Error::usage("answer_marker must be nonempty"));
        }
        Ok(())
    }
}

/// The state `s_t`: a problem and the first `t` generated segments.
///
/// States are values. [`TrajectoryState::append_action`] returns a new state
/// and leaves the receiver untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryState {
    problem: Arc<Problem>,
    segments: Vec<ActionSegment>,
    tokens_generated: u64,
}

impl TrajectoryState {
    pub fn new(problem: Arc<Problem>) -> Self {
        TrajectoryState { problem, segments: Vec::new(), tokens_generated: 0 }
    }

    pub fn problem(&self) -> &Arc<Problem> {
        &self.problem
    }

    pub fn segments(&self) -> &[ActionSegment] {
        &self.segments
    }

    /// `t`, the number of segments so far.
    pub fn step_index(&self) -> usize {
        self.segments.len()
    }

    pub fn tokens_generated(&self) -> u64 {
        self.tokens_generated
    }

    pub fn is_terminal(&self) -> bool {
        self.segments.last().is_some_and(|s| s.terminal)
    }

    /// Non-terminal and out of steps.
    pub fn is_capped(&self, cfg: &EngineConfig) -> bool {
        !self.is_terminal() && self.step_index() >= cfg.max_steps
    }

    /// Whether another segment may be appended.
    pub fn is_open(&self, cfg: &EngineConfig) -> bool {
        !self.is_terminal() && self.step_index() < cfg.max_steps
    }

    /// The partial answer: segment texts concatenated in order.
    pub fn response_text(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn append_action(&self, action: ActionSegment, cfg: &EngineConfig) -> Result<TrajectoryState> {
        if self.is_terminal() {
            return Err(Error::usage("cannot append to a terminal state"));
        }
        if self.step_index() >= cfg.max_steps {
            return Err(Error::usage(format!("state already has max_steps={} segments", cfg.max_steps)));
        }
        action.check(cfg.segment_length).map_err(|e| Error::usage(e.to_string()))?;
        let mut next = self.clone();
        next.tokens_generated += u64::from(action.token_count);
        next.segments.push(action);
        Ok(next)
    }

    /// Splits off the last segment, returning the prefix state and the segment.
    pub fn split_last(&self) -> Option<(TrajectoryState, &ActionSegment)> {
        let (last, rest) = self.segments.split_last()?;
        let prefix = TrajectoryState {
            problem: Arc::clone(&self.problem),
            segments: rest.to_vec(),
            tokens_generated: self.tokens_generated - u64::from(last.token_count),
        };
        Some((prefix, last))
    }

    pub fn final_answer(&self, cfg: &EngineConfig) -> Option<String> {
        extract_final_answer(&self.response_text(), &cfg.answer_marker)
    }

    /// A state is correct when it is terminal and its final answer matches gold.
    pub fn is_correct(&self, cfg: &EngineConfig) -> bool {
        self.is_terminal() && self.final_answer(cfg).is_some_and(|a| answers_match(&a, &self.problem.gold_answer))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem() -> Arc<Problem> {
        Arc::new(Problem::new("p1", "What is 2+2?", "4", ProblemSource::Ingested).unwrap())
    }

    fn seg(text: &str, tokens: u32, terminal: bool) -> ActionSegment {
        ActionSegment::new(text, tokens, terminal, 30).unwrap()
    }

    #[test]
    fn append_to_empty() {
        let cfg = EngineConfig::default();
        let s0 = TrajectoryState::new(problem());
        let s1 = s0.append_action(seg("a", 30, false), &cfg).unwrap();
        assert_eq!(s1.step_index(), 1);
        assert_eq!(s1.tokens_generated(), 30);
        assert_eq!(s0.step_index(), 0);
        assert_eq!(s0.tokens_generated(), 0);
    }

    #[test]
    fn append_terminal_after_three() {
        let cfg = EngineConfig::default();
        let mut s = TrajectoryState::new(problem());
        for _ in 0..3 {
            s = s.append_action(seg("x", 30, false), &cfg).unwrap();
        }
        assert_eq!(s.tokens_generated(), 90);
        let s4 = s.append_action(seg("Final answer: 4", 12, true), &cfg).unwrap();
        assert_eq!(s4.step_index(), 4);
        assert_eq!(s4.tokens_generated(), 102);
        assert!(s4.is_terminal());
        assert!(s4.is_correct(&cfg));
    }

    #[test]
    fn append_after_terminal_is_usage_error() {
        let cfg = EngineConfig::default();
        let s = TrajectoryState::new(problem()).append_action(seg("done", 5, true), &cfg).unwrap();
        assert!(matches!(s.append_action(seg("more", 30, false), &cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn append_past_cap_is_usage_error() {
        let cfg = EngineConfig { max_steps: 1, ..EngineConfig::default() };
        let s = TrajectoryState::new(problem()).append_action(seg("a", 30, false), &cfg).unwrap();
        assert!(s.is_capped(&cfg));
        assert!(matches!(s.append_action(seg("b", 30, false), &cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn segment_invariants() {
        assert!(ActionSegment::new("x", 0, true, 30).is_err());
        assert!(ActionSegment::new("x", 31, true, 30).is_err());
        assert!(ActionSegment::new("x", 12, false, 30).is_err());
        assert!(ActionSegment::new("x", 30, true, 30).is_ok());
    }

    #[test]
    fn split_last_inverts_append() {
        let cfg = EngineConfig::default();
        let s1 = TrajectoryState::new(problem()).append_action(seg("a", 30, false), &cfg).unwrap();
        let s2 = s1.append_action(seg("b", 7, true), &cfg).unwrap();
        let (prefix, last) = s2.split_last().unwrap();
        assert_eq!(prefix, s1);
        assert_eq!(last.text, "b");
    }

    #[test]
    fn problem_validation() {
        assert!(Problem::new("", "q", "1", ProblemSource::Synthetic).is_err());
        assert!(Problem::new("a", "q", " ", ProblemSource::Synthetic).is_err());
    }
}
