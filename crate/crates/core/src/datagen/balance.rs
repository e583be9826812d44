use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RewardTriplet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalanceConfig {
    /// Largest allowed majority-to-minority ratio.
    pub max_ratio: usize,
    /// Rewards strictly above this are positives.
    pub threshold: f64,
    /// Triplets kept from a group that has only one class.
    pub cap: usize,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig { max_ratio: 3, threshold: 0.5, cap: 3 }
    }
}

impl BalanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_ratio == 0 || self.cap == 0 {
            return Err(Error::usage("max_ratio and cap must be at least 1"));
        }
        Ok(())
    }
}

/// Down-samples one state's candidates.
///
/// With both classes present the larger is cut to `max_ratio` times the
/// smaller; with one class only `cap` triplets remain. The chosen triplet is
/// always kept and counts toward its class. Survivors keep their input order.
pub fn balance_candidates(triplets: Vec<RewardTriplet>, cfg: &BalanceConfig, seed: u64) -> Vec<RewardTriplet> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..triplets.len()).partition(|&i| triplets[i].reward > cfg.threshold);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; triplets.len()];
    let mut retain = |class: &[usize], target: usize, rng: &mut ChaCha8Rng| {
        let chosen = class.iter().copied().find(|&i| triplets[i].chosen);
        let target = target.min(class.len());
        let others: Vec<usize> = class.iter().copied().filter(|&i| Some(i) != chosen).collect();
        let slots = target.saturating_sub(usize::from(chosen.is_some()));
        if let Some(c) = chosen {
            if target > 0 {
                keep[c] = true;
            }
        }
        for j in sample(rng, others.len(), slots.min(others.len())) {
            keep[others[j]] = true;
        }
    };
    match (pos.len(), neg.len()) {
        (0, 0) => {}
        (p, 0) => retain(&pos, cfg.cap.min(p), &mut rng),
        (0, q) => retain(&neg, cfg.cap.min(q), &mut rng),
        (p, q) => {
            let bound = cfg.max_ratio.saturating_mul(p.min(q));
            retain(&pos, p.min(bound), &mut rng);
            retain(&neg, q.min(bound), &mut rng);
        }
    }
    triplets.into_iter().zip(keep).filter_map(|(t, k)| k.then_some(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn group(rewards: &[f64], chosen: usize) -> Vec<RewardTriplet> {
        rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| RewardTriplet {
                problem_id: "p".into(),
                step_index: 0,
                state_text: String::new(),
                action_text: format!("a{i}"),
                action_tokens: 30,
                reward: r,
                n_rollouts: 8,
                chosen: i == chosen,
                source: "synthetic".into(),
            })
            .collect()
    }

    fn classes(ts: &[RewardTriplet]) -> (usize, usize) {
        let p = ts.iter().filter(|t| t.reward > 0.5).count();
        (p, ts.len() - p)
    }

    #[test]
    fn eight_to_two() {
        let mut r = vec![1.0; 8];
        r.extend([0.0, 0.0]);
        let out = balance_candidates(group(&r, 0), &BalanceConfig::default(), 1);
        assert_eq!(classes(&out), (6, 2));
    }

    #[test]
    fn single_class_capped() {
        let out = balance_candidates(group(&[1.0; 5], 4), &BalanceConfig::default(), 1);
        assert_eq!(classes(&out), (3, 0));
        assert!(out.iter().any(|t| t.chosen));
    }

    #[test]
    fn mild_imbalance_unchanged() {
        let g = group(&[1.0, 0.75, 0.0], 0);
        assert_eq!(balance_candidates(g.clone(), &BalanceConfig::default(), 1), g);
    }

    #[test]
    fn threshold_is_exclusive() {
        let out = balance_candidates(group(&[0.5, 0.5, 0.5, 0.5], 0), &BalanceConfig::default(), 1);
        assert_eq!(classes(&out), (0, 3));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn bounds_hold(
            rewards in prop::collection::vec(prop::sample::select(vec![0.0, 0.25, 0.5, 0.625, 1.0]), 1..16),
            chosen_raw in any::<usize>(),
            seed in any::<u64>(),
        ) {
            let chosen = chosen_raw % rewards.len();
            let out = balance_candidates(group(&rewards, chosen), &BalanceConfig::default(), seed);
            let (p, q) = classes(&out);
            if p > 0 && q > 0 {
                prop_assert!(p.max(q) <= 3 * p.min(q));
            } else {
                prop_assert!(out.len() <= 3);
            }
            prop_assert_eq!(out.iter().filter(|t| t.chosen).count(), 1);
            prop_assert!(!out.is_empty());
        }
    }
}
