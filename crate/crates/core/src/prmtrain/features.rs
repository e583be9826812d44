//! Deterministic featurization of `(state, action)` pairs.

use serde::{Deserialize, Serialize};

use crate::seed::{hash_bytes, hash_seq};
use crate::synthenv::parse_branch;

/// Layout, in order: step one-hot (`max_steps` slots, later steps share the
/// last), action token fraction, hashed branch history (`branch_buckets`),
/// hashed character trigrams of the action and of the state text
/// (`ngram_buckets` each, L2-normalized).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub max_steps: usize,
    pub segment_length: u32,
    pub branch_buckets: usize,
    pub ngram_buckets: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec { max_steps: 20, segment_length: 30, branch_buckets: 32, ngram_buckets: 128 }
    }
}

const BRANCH_SALT: u64 = 0xB2A4;

impl FeatureSpec {
    pub fn dim(&self) -> usize {
        self.max_steps + 1 + self.branch_buckets + 2 * self.ngram_buckets
    }

    pub fn featurize(&self, state_text: &str, step_index: usize, action_text: &str, action_tokens: u32) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        if self.max_steps > 0 {
            x[step_index.min(self.max_steps - 1)] = 1.0;
        }
        let mut at = self.max_steps;
        x[at] = f64::from(action_tokens) / f64::from(self.segment_length.max(1));
        at += 1;
        self.branch_block(&mut x[at..at + self.branch_buckets], state_text, action_text);
        at += self.branch_buckets;
        trigram_block(&mut x[at..at + self.ngram_buckets], action_text);
        at += self.ngram_buckets;
        trigram_block(&mut x[at..at + self.ngram_buckets], state_text);
        x
    }

    /// One count per `(position, branch)` of the synthetic segments seen so
    /// far plus the action, scaled by `1/sqrt(count)`.
    fn branch_block(&self, out: &mut [f64], state_text: &str, action_text: &str) {
        if out.is_empty() {
            return;
        }
        let branches: Vec<usize> =
            state_text.split_inclusive('\n').chain(std::iter::once(action_text)).filter_map(parse_branch).collect();
        if branches.is_empty() {
            return;
        }
        let scale = 1.0 / (branches.len() as f64).sqrt();
        for (pos, b) in branches.into_iter().enumerate() {
            out[(hash_seq(BRANCH_SALT, &[pos, b]) % out.len() as u64) as usize] += scale;
        }
    }
}

fn trigram_block(out: &mut [f64], text: &str) {
    if out.is_empty() {
        return;
    }
    let bytes = text.as_bytes();
    for w in bytes.windows(3) {
        out[(hash_bytes(w) % out.len() as u64) as usize] += 1.0;
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.iter_mut().for_each(|v| *v /= norm);
    }
}
