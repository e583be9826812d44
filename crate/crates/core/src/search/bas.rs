use std::cmp::Ordering;
use std::sync::Arc;

use super::{stream_seed, BasSchedule, FinalRule, SearchResult};
use crate::backends::{fan_out, generate_checked, Policy, RewardModel};
use crate::error::{Error, Result};
use crate::mdp::{ActionSegment, Problem, TrajectoryState};
use crate::seed::derive_seed;

struct Beam {
    state: TrajectoryState,
    scores: Vec<f64>,
    /// Root copy, then the candidate index taken at each step.
    lineage: Vec<u32>,
    /// Seed stream this beam draws its candidates from.
    stream: u64,
}

struct Candidate {
    beam: usize,
    index: usize,
    seed: u64,
    segment: ActionSegment,
    score: f64,
}

/// Beam search whose width follows `schedule`.
///
/// The search starts from `b0` copies of the empty state, each on its own
/// seed stream. At step `t` every live beam proposes `expansion` candidates;
/// the best `beam_size_at(t + 1)` of all candidates survive, minus the slots
/// already held by finished trajectories. Finished trajectories stay in the
/// pool until the end. Candidate `e` of a beam draws seed
/// `derive_seed(stream, t, e)` and candidate 0 inherits its parent's stream,
/// so a trajectory's content depends only on its lineage.
///
/// Ties between equal scores go to the lexicographically smallest lineage,
/// both when pruning and when picking the answer.
pub fn beam_anneal_search(
    problem: &Arc<Problem>,
    policy: &dyn Policy,
    reward: &dyn RewardModel,
    schedule: &BasSchedule,
    final_rule: FinalRule,
    seed: u64,
) -> Result<SearchResult> {
    schedule.validate()?;
    let engine = policy.engine();
    let root = TrajectoryState::new(Arc::clone(problem));
    let mut live: Vec<Beam> = (0..schedule.b0)
        .map(|j| Beam {
            state: root.clone(),
            scores: Vec::new(),
            lineage: vec![j as u32],
            stream: stream_seed(seed, j),
        })
        .collect();
    let mut completed: Vec<Beam> = Vec::new();
    let mut capped: Vec<Beam> = Vec::new();
    let mut widths = Vec::new();
    let mut tokens = 0u64;
    let mut t = 0usize;

    while !live.is_empty() {
        widths.push(live.len() + completed.len());
        let generated = fan_out(live.len(), policy.concurrency_limit(), |j| {
            let seeds: Vec<u64> =
                (0..schedule.expansion).map(|e| derive_seed(live[j].stream, t as u64, e as u64)).collect();
            generate_checked(policy, &live[j].state, &seeds).map(|segs| (seeds, segs))
        });

        let mut cands = Vec::new();
        let mut first_err = None;
        for (j, res) in generated.into_iter().enumerate() {
            match res {
                Ok((seeds, segs)) => {
                    tokens += segs.iter().map(|s| u64::from(s.token_count)).sum::<u64>();
                    let scores = reward.score_batch(&live[j].state, &segs)?;
                    for (e, ((segment, score), seed)) in segs.into_iter().zip(scores).zip(seeds).enumerate() {
                        if !(0.0..=1.0).contains(&score) {
                            return Err(Error::Numeric { block: format!("reward score {score} at step {t}") });
                        }
                        cands.push(Candidate { beam: j, index: e, seed, segment, score });
                    }
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        if cands.is_empty() {
            let message = first_err.map_or_else(|| "no candidates".to_string(), |e| e.to_string());
            return Err(Error::Search { step: t, message });
        }

        cands.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| live[a.beam].lineage.cmp(&live[b.beam].lineage))
                .then(a.index.cmp(&b.index))
        });
        let keep = schedule.beam_size_at(t + 1).saturating_sub(completed.len());
        let mut next = Vec::with_capacity(keep);
        for c in cands.into_iter().take(keep) {
            let parent = &live[c.beam];
            let state = parent.state.append_action(c.segment, engine)?;
            let mut scores = parent.scores.clone();
            scores.push(c.score);
            let mut lineage = parent.lineage.clone();
            lineage.push(c.index as u32);
            let stream = if c.index == 0 { parent.stream } else { c.seed };
            let beam = Beam { state, scores, lineage, stream };
            if beam.state.is_terminal() {
                completed.push(beam);
            } else if beam.state.is_open(engine) {
                next.push(beam);
            } else {
                capped.push(beam);
            }
        }
        live = next;
        t += 1;
    }

    let pool = if completed.is_empty() { capped } else { completed };
    let best = pool
        .into_iter()
        .map(|b| (final_rule.aggregate(&b.scores), b))
        .min_by(|(sa, a), (sb, b)| match sb.total_cmp(sa) {
            Ordering::Equal => a.lineage.cmp(&b.lineage),
            o => o,
        })
        .map(|(_, b)| b)
        .ok_or_else(|| Error::Search { step: t, message: "no trajectory survived".into() })?;
    let mut out = SearchResult::from_trajectory(best.state, policy, tokens, best.scores);
    out.beam_widths = widths;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{OracleReward, SyntheticPolicy};
    use crate::mdp::EngineConfig;
    use crate::search::Rate;
    use crate::synthenv::{enumerate_trajectories, SuiteSpec, SyntheticTask, TaskSuite};
    use proptest::prelude::*;

    #[test]
    fn widths_follow_schedule() {
        let suite =
            TaskSuite::generate(&SuiteSpec { count: 4, depth_min: 12, depth_max: 12, ..SuiteSpec::default() }).unwrap();
        let policy = SyntheticPolicy::new(&suite, EngineConfig::default());
        let reward = OracleReward::new(&suite);
        let schedule = BasSchedule::default();
        for p in suite.problems() {
            let r = beam_anneal_search(&p, &policy, &reward, &schedule, FinalRule::LastStep, 4).unwrap();
            let want: Vec<usize> = (0..12).map(|t| schedule.beam_size_at(t)).collect();
            assert_eq!(r.beam_widths, want);
            assert!(r.tokens_generated >= r.trajectory.tokens_generated());
            assert!(r.scores.len() <= r.trajectory.step_index());
        }
    }

    #[test]
    fn final_rules_differ_only_in_selection() {
        assert_eq!(FinalRule::LastStep.aggregate(&[0.2, 0.9]), 0.9);
        assert_eq!(FinalRule::Mean.aggregate(&[0.2, 0.8]), 0.5);
        assert_eq!(FinalRule::Min.aggregate(&[0.2, 0.8]), 0.2);
    }

    fn small_task() -> impl Strategy<Value = SyntheticTask> {
        (1usize..=3, 2usize..=3, any::<u64>()).prop_flat_map(|(depth, branching, seed)| {
            (prop::collection::vec(0..branching, depth), prop::collection::vec(0.0f64..0.7, depth)).prop_map(
                move |(correct_path, slip_prob)| SyntheticTask {
                    depth,
                    branching,
                    correct_path,
                    slip_prob,
                    recovery_prob: 0.0,
                    seed,
                },
            )
        })
    }

    fn selected_value(task: &SyntheticTask, r: &SearchResult) -> f64 {
        task.position_of_state(&r.trajectory).unwrap().true_success_prob()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn wider_start_never_hurts(task in small_task(), seed in any::<u64>(), b0 in 1usize..6) {
            let suite = TaskSuite::new(vec![task.clone()]).unwrap();
            let policy = SyntheticPolicy::new(&suite, EngineConfig::default());
            let reward = OracleReward::new(&suite);
            let p = Arc::new(task.to_problem());
            let run = |b0: usize| {
                let s = BasSchedule::new(b0, Rate::integer(1), 1).unwrap();
                beam_anneal_search(&p, &policy, &reward, &s, FinalRule::LastStep, seed).unwrap()
            };
            prop_assert!(selected_value(&task, &run(b0 + 1)) >= selected_value(&task, &run(b0)));
        }

        #[test]
        fn full_width_reaches_best_enumerated(task in small_task(), seed in any::<u64>()) {
            let suite = TaskSuite::new(vec![task.clone()]).unwrap();
            let policy = SyntheticPolicy::new(&suite, EngineConfig::default());
            let reward = OracleReward::new(&suite);
            // Sampling can miss a branch, so the beam is widened well past the
            // number of distinct trajectories.
            let cover = 16 * task.branching.pow(task.depth as u32);
            let s = BasSchedule::fixed(cover).with_expansion(task.branching);
            let r = beam_anneal_search(&Arc::new(task.to_problem()), &policy, &reward, &s, FinalRule::LastStep, seed)
                .unwrap();
            let best = enumerate_trajectories(&task)
                .unwrap()
                .iter()
                .map(|e| if e.success { 1.0 } else { 0.0 })
                .fold(0.0, f64::max);
            prop_assert_eq!(selected_value(&task, &r), best);
        }
    }
}
