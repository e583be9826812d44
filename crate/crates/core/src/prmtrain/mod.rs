//! Training a step scorer on rollout-labelled groups.
//!
//! The objective is binary cross-entropy against the soft labels plus a
//! weighted pairwise term that asks the scorer to order candidates whose
//! labels differ by more than a margin. Training is plain mini-batch gradient
//! descent over whole state groups, single-threaded and seeded.

mod features;
mod loss;
mod model;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{group_triplets, Dataset, StateGroup};
use crate::error::{Error, Result};

pub use features::FeatureSpec;
pub use loss::{
    apply_label_mode, bce, neg_log_sigmoid, pair_set, rank_loss, sigmoid, total_loss, value_loss, LabelMode, LossParts,
    LOG_CLAMP,
};
pub use model::{FeaturizedGroup, LossSettings, ScorerModel, CHECKPOINT_FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub lambda: f64,
    pub delta: f64,
    pub epochs: usize,
    /// State groups per batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub label_mode: LabelMode,
    pub hard_threshold: f64,
    /// `false` trains on the value loss alone, as `lambda = 0` would.
    pub include_rank: bool,
    pub hidden_dims: Vec<usize>,
    pub features: FeatureSpec,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda: 0.1,
            delta: 0.3,
            epochs: 2,
            batch_size: 4,
            learning_rate: 0.5,
            label_mode: LabelMode::Soft,
            hard_threshold: 0.5,
            include_rank: true,
            hidden_dims: vec![16],
            features: FeatureSpec::default(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::usage("lambda must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::usage("delta must lie in [0, 1)"));
        }
        if !(self.hard_threshold > 0.0 && self.hard_threshold < 1.0) {
            return Err(Error::usage("hard_threshold must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::usage("learning_rate must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings { lambda: if self.include_rank { self.lambda } else { 0.0 }, delta: self.delta }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub value_loss: f64,
    pub rank_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ScorerModel,
    pub history: Vec<EpochLoss>,
}

/// Featurizes groups, applying the label mode to their targets.
pub fn featurize_groups(
    spec: &FeatureSpec,
    groups: &[StateGroup],
    mode: LabelMode,
    hard_threshold: f64,
) -> Vec<FeaturizedGroup> {
    groups
        .par_iter()
        .map(|g| FeaturizedGroup {
            inputs: g
                .actions
                .iter()
                .map(|(text, tokens)| spec.featurize(&g.state_text, g.step_index, text, *tokens))
                .collect(),
            targets: apply_label_mode(&g.targets, mode, hard_threshold),
        })
        .collect()
}

/// Trains a fresh scorer on `dataset`.
pub fn train(dataset: &Dataset, cfg: &TrainingConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let features = FeatureSpec { segment_length: dataset.segment_length, ..cfg.features.clone() };
    let groups = group_triplets(&dataset.triplets);
    if groups.is_empty() {
        return Err(Error::usage("dataset is empty"));
    }
    if cfg.include_rank && !groups.iter().any(|g| g.targets.len() > 1) {
        return Err(Error::usage("rank loss needs at least one group with several candidates"));
    }
    let data = featurize_groups(&features, &groups, cfg.label_mode, cfg.hard_threshold);
    let model = ScorerModel::new(features, cfg.hidden_dims.clone(), cfg.seed);
    train_groups(model, &data, cfg)
}

/// Continues training `model` on pre-featurized groups.
pub fn train_groups(mut model: ScorerModel, data: &[FeaturizedGroup], cfg: &TrainingConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let settings = cfg.loss_settings();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5_4FF1E);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<FeaturizedGroup> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (parts, grad) = model.loss_and_gradient(&batch, settings).map_err(|e| match e {
                Error::Numeric { .. } => Error::Divergence { epoch, batch: b },
                other => other,
            })?;
            if !parts.total.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            let w = chunk.len() as f64;
            sums.value += parts.value * w;
            sums.rank += parts.rank * w;
            sums.total += parts.total * w;
            for (p, g) in model.weights.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
            if model.weights.iter().any(|w| !w.is_finite()) {
                return Err(Error::Divergence { epoch, batch: b });
            }
        }
        let n = data.len() as f64;
        history.push(EpochLoss { epoch, value_loss: sums.value / n, rank_loss: sums.rank / n, total: sums.total / n });
    }
    Ok(TrainOutcome { model, history })
}

/// CSV with columns `epoch,value_loss,rank_loss,total`.
pub fn write_history_csv<W: Write>(history: &[EpochLoss], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for h in history {
        w.serialize(h).map_err(crate::search::csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_prediction: Option<f64>,
    pub mean_target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerMetrics {
    pub value_loss: f64,
    /// Share of margin pairs ordered correctly, ties counting half. `None`
    /// when the held-out data has no such pairs.
    pub pairwise_accuracy: Option<f64>,
    pub pairs: usize,
    pub calibration_bins: Vec<CalibrationBin>,
}

/// Held-out metrics of `predict` on groups with reference targets.
pub fn evaluate_predictions(
    groups: &[StateGroup],
    delta: f64,
    predict: impl Fn(&StateGroup) -> Result<Vec<f64>> + Sync,
) -> Result<ScorerMetrics> {
    if groups.is_empty() {
        return Err(Error::usage("held-out set is empty"));
    }
    let preds = groups.par_iter().map(&predict).collect::<Result<Vec<_>>>()?;
    let targets: Vec<Vec<f64>> = groups.iter().map(|g| g.targets.clone()).collect();
    let value = value_loss(&preds, &targets)?;
    let mut credit = 0.0;
    let mut pairs = 0usize;
    let mut bins = vec![(0usize, 0.0, 0.0); 10];
    for (p, t) in preds.iter().zip(&targets) {
        for (m, n) in pair_set(t, delta) {
            pairs += 1;
            credit += match p[m].partial_cmp(&p[n]) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Equal) => 0.5,
                _ => 0.0,
            };
        }
        for (&pi, &ti) in p.iter().zip(t) {
            let b = ((pi * 10.0) as usize).min(9);
            bins[b].0 += 1;
            bins[b].1 += pi;
            bins[b].2 += ti;
        }
    }
    let calibration_bins = bins
        .into_iter()
        .enumerate()
        .map(|(i, (count, sp, st))| CalibrationBin {
            lower: i as f64 / 10.0,
            upper: (i + 1) as f64 / 10.0,
            count,
            mean_prediction: (count > 0).then(|| sp / count as f64),
            mean_target: (count > 0).then(|| st / count as f64),
        })
        .collect();
    Ok(ScorerMetrics {
        value_loss: value,
        pairwise_accuracy: (pairs > 0).then(|| credit / pairs as f64),
        pairs,
        calibration_bins,
    })
}

pub fn evaluate_scorer(model: &ScorerModel, groups: &[StateGroup], delta: f64) -> Result<ScorerMetrics> {
    evaluate_predictions(groups, delta, |g| {
        g.actions
            .iter()
            .map(|(text, tokens)| model.predict(&model.features.featurize(&g.state_text, g.step_index, text, *tokens)))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::RewardTriplet;

    fn separable(n_groups: usize) -> Dataset {
        let mut triplets = Vec::new();
        for g in 0..n_groups {
            for (i, (cue, r)) in [("consistent", 1.0), ("doubtful", 0.0), ("doubtful", 0.0)].iter().enumerate() {
                triplets.push(RewardTriplet {
                    problem_id: format!("p{g}"),
                    step_index: g % 4,
                    state_text: String::new(),
                    action_text: format!("step {}: option {i}; check {cue}\n", g % 4),
                    action_tokens: 30,
                    reward: *r,
                    n_rollouts: 4,
                    chosen: i == 0,
                    source: "synthetic".into(),
                });
            }
        }
        Dataset { segment_length: 30, triplets }
    }

    #[test]
    fn learns_separable_data() {
        let data = separable(120);
        let out = train(&data, &TrainingConfig::default()).unwrap();
        assert_eq!(out.history.len(), 2);
        let held = group_triplets(&separable(20).triplets);
        let m = evaluate_scorer(&out.model, &held, 0.3).unwrap();
        assert_eq!(m.pairwise_accuracy, Some(1.0));
    }

    #[test]
    fn zero_rate_keeps_loss_constant() {
        let cfg = TrainingConfig { learning_rate: 0.0, epochs: 3, ..TrainingConfig::default() };
        let out = train(&separable(30), &cfg).unwrap();
        let first = out.history[0].total;
        for h in &out.history {
            assert!((h.total - first).abs() <= 1e-12 * first);
        }
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let cfg = TrainingConfig::default();
        let a = train(&separable(40), &cfg).unwrap();
        let b = train(&separable(40), &cfg).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainingConfig { delta: 1.0, ..TrainingConfig::default() }.validate().is_err());
        assert!(TrainingConfig { lambda: -0.1, ..TrainingConfig::default() }.validate().is_err());
        assert!(TrainingConfig { hard_threshold: 0.0, ..TrainingConfig::default() }.validate().is_err());
    }

    #[test]
    fn non_finite_features_diverge() {
        let cfg = TrainingConfig::default();
        let model = ScorerModel::new(cfg.features.clone(), cfg.hidden_dims.clone(), 1);
        let mut x = vec![0.0; cfg.features.dim()];
        x[0] = f64::NAN;
        let data = vec![FeaturizedGroup { inputs: vec![x.clone(), x], targets: vec![1.0, 0.0] }];
        let r = train_groups(model, &data, &cfg);
        assert!(matches!(r, Err(Error::Divergence { epoch: 0, batch: 0 })), "{:?}", r.map(|o| o.history));
    }

    #[test]
    fn evaluation_edges() {
        assert!(matches!(evaluate_predictions(&[], 0.3, |_| Ok(vec![])), Err(Error::Usage(_))));
        let groups = group_triplets(&separable(10).triplets);
        let m = evaluate_predictions(&groups, 0.3, |g| Ok(vec![0.5; g.targets.len()])).unwrap();
        assert_eq!(m.pairwise_accuracy, Some(0.5));
        assert_eq!(m.calibration_bins.len(), 10);
        let perfect = evaluate_predictions(&groups, 0.3, |g| Ok(g.targets.clone())).unwrap();
        assert_eq!(perfect.pairwise_accuracy, Some(1.0));
    }

    #[test]
    fn history_csv_header() {
        let mut out = Vec::new();
        write_history_csv(&[EpochLoss { epoch: 0, value_loss: 0.5, rank_loss: 0.6, total: 0.56 }], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "epoch,value_loss,rank_loss,total\n0,0.5,0.6,0.56\n");
    }
}
