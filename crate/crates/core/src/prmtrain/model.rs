//! A small tanh MLP with a logistic output and hand-written backprop.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::FeatureSpec;
use super::loss::{bce, neg_log_sigmoid, pair_set, sigmoid, LossParts, LOG_CLAMP};
use crate::error::{Error, Result};
use crate::mdp::{ActionSegment, EngineConfig};

pub const CHECKPOINT_FORMAT_VERSION: u64 = 1;

/// Weights are stored flat, layer by layer: the row-major `out x in` matrix
/// followed by the `out` biases. The last layer has one output.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerModel {
    pub features: FeatureSpec,
    pub hidden_dims: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Feature vectors and targets of one state's candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizedGroup {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub lambda: f64,
    pub delta: f64,
}

struct Cache {
    /// Input followed by each hidden layer's activations.
    activations: Vec<Vec<f64>>,
    prediction: f64,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u64,
    features: FeatureSpec,
    hidden_dims: Vec<usize>,
    weights: String,
}

impl ScorerModel {
    /// Glorot-uniform weights and zero biases.
    pub fn new(features: FeatureSpec, hidden_dims: Vec<usize>, seed: u64) -> Self {
        let mut model = ScorerModel { features, hidden_dims, weights: Vec::new() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = model.layer_dims();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                model.weights.push(rng.random_range(-a..a));
            }
            model.weights.extend(std::iter::repeat_n(0.0, fan_out));
        }
        model
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.features.dim()];
        dims.extend(&self.hidden_dims);
        dims.push(1);
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offsets of each layer's weight matrix and bias vector.
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut at = 0;
        self.layer_dims()
            .windows(2)
            .map(|w| {
                let o = (at, at + w[0] * w[1]);
                at += w[0] * w[1] + w[1];
                o
            })
            .collect()
    }

    fn forward_cache(&self, x: &[f64]) -> Result<Cache> {
        let dims = self.layer_dims();
        if x.len() != dims[0] {
            return Err(Error::usage(format!("feature vector has {} entries, model expects {}", x.len(), dims[0])));
        }
        let offsets = self.offsets();
        let last = offsets.len() - 1;
        let mut activations = vec![x.to_vec()];
        let mut logit = 0.0;
        for (l, &(w_at, b_at)) in offsets.iter().enumerate() {
            let (n_in, n_out) = (dims[l], dims[l + 1]);
            let input = &activations[l];
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &self.weights[w_at + o * n_in..w_at + (o + 1) * n_in];
                    row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>() + self.weights[b_at + o]
                })
                .collect();
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric { block: format!("layer {l} pre-activations") });
            }
            if l == last {
                logit = z[0];
            } else {
                activations.push(z.into_iter().map(f64::tanh).collect());
            }
        }
        Ok(Cache { activations, prediction: sigmoid(logit) })
    }

    /// Predicted reward in `(0, 1)`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward_cache(x)?.prediction)
    }

    pub fn predict_text(&self, state_text: &str, step_index: usize, action: &ActionSegment) -> Result<f64> {
        let x = self.features.featurize(state_text, step_index, &action.text, action.token_count);
        self.predict(&x)
    }

    /// Adds `dz * d(logit)/d(weights)` into `grad`.
    fn backward(&self, cache: &Cache, dz: f64, grad: &mut [f64]) {
        let dims = self.layer_dims();
        let offsets = self.offsets();
        let mut delta = vec![dz];
        for l in (0..offsets.len()).rev() {
            let (w_at, b_at) = offsets[l];
            let n_in = dims[l];
            let input = &cache.activations[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[w_at + o * n_in..w_at + (o + 1) * n_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
                grad[b_at + o] += d;
            }
            if l > 0 {
                delta = (0..n_in)
                    .map(|i| {
                        let back: f64 =
                            delta.iter().enumerate().map(|(o, d)| d * self.weights[w_at + o * n_in + i]).sum();
                        back * (1.0 - input[i] * input[i])
                    })
                    .collect();
            }
        }
    }

    /// Value, rank and total loss of a batch of groups with the gradient of
    /// the total with respect to every weight.
    pub fn loss_and_gradient(
        &self,
        groups: &[FeaturizedGroup],
        settings: LossSettings,
    ) -> Result<(LossParts, Vec<f64>)> {
        if groups.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        let g_count = groups.len() as f64;
        let mut grad = vec![0.0; self.weights.len()];
        let mut value = 0.0;
        let mut rank = 0.0;
        for group in groups {
            if group.inputs.len() != group.targets.len() || group.inputs.is_empty() {
                return Err(Error::usage("group inputs and targets must be nonempty and the same length"));
            }
            let caches = group.inputs.iter().map(|x| self.forward_cache(x)).collect::<Result<Vec<_>>>()?;
            let p: Vec<f64> = caches.iter().map(|c| c.prediction).collect();
            let m = p.len() as f64;
            let mut dz = vec![0.0; p.len()];
            for (i, (&pi, &r)) in p.iter().zip(&group.targets).enumerate() {
                value += bce(r, pi) / (m * g_count);
                if pi > LOG_CLAMP && pi < 1.0 - LOG_CLAMP {
                    dz[i] += (pi - r) / (m * g_count);
                }
            }
            let pairs = pair_set(&group.targets, settings.delta);
            if !pairs.is_empty() && settings.lambda != 0.0 {
                let scale = 1.0 / (pairs.len() as f64 * g_count);
                let mut dp = vec![0.0; p.len()];
                for &(a, b) in &pairs {
                    rank += neg_log_sigmoid(p[a] - p[b]) * scale;
                    let s = sigmoid(p[b] - p[a]);
                    dp[a] -= s * scale;
                    dp[b] += s * scale;
                }
                for i in 0..p.len() {
                    dz[i] += settings.lambda * dp[i] * p[i] * (1.0 - p[i]);
                }
            } else if !pairs.is_empty() {
                rank += pairs.iter().map(|&(a, b)| neg_log_sigmoid(p[a] - p[b])).sum::<f64>()
                    / (pairs.len() as f64 * g_count);
            }
            for (cache, d) in caches.iter().zip(dz) {
                self.backward(cache, d, &mut grad);
            }
        }
        for (l, (w_at, b_at)) in self.offsets().into_iter().enumerate() {
            let end = b_at + self.layer_dims()[l + 1];
            if grad[w_at..b_at].iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric { block: format!("layer {l} weights") });
            }
            if grad[b_at..end].iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric { block: format!("layer {l} biases") });
            }
        }
        let total = value + settings.lambda * rank;
        Ok((LossParts { value, rank, total }, grad))
    }

    pub fn check_engine(&self, engine: &EngineConfig) -> Result<()> {
        if self.features.segment_length != engine.segment_length {
            return Err(Error::usage(format!(
                "scorer was trained with segment_length {}, engine uses {}",
                self.features.segment_length, engine.segment_length
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let bytes: Vec<u8> = self.weights.iter().flat_map(|w| w.to_le_bytes()).collect();
        let ck = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            features: self.features.clone(),
            hidden_dims: self.hidden_dims.clone(),
            weights: B64.encode(bytes),
        };
        Ok(serde_json::to_string_pretty(&ck)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Version { found: ck.format_version, expected: CHECKPOINT_FORMAT_VERSION });
        }
        let bytes = B64.decode(ck.weights).map_err(|e| Error::invalid(format!("checkpoint weights: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::invalid("checkpoint weights are not a whole number of f64 values"));
        }
        let weights = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let model = ScorerModel { features: ck.features, hidden_dims: ck.hidden_dims, weights };
        if model.weights.len() != model.num_params() {
            return Err(Error::invalid(format!(
                "checkpoint has {} weights, architecture needs {}",
                model.weights.len(),
                model.num_params()
            )));
        }
        if let Some(i) = model.weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::invalid(format!("checkpoint weight {i} is not finite")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ScorerModel {
        let spec = FeatureSpec { max_steps: 3, segment_length: 30, branch_buckets: 2, ngram_buckets: 4 };
        ScorerModel::new(spec, vec![5, 3], 7)
    }

    fn batch(model: &ScorerModel, seed: u64) -> Vec<FeaturizedGroup> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = model.features.dim();
        (0..3)
            .map(|g| FeaturizedGroup {
                inputs: (0..g + 2).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
                targets: (0..g + 2).map(|_| rng.random_range(0.0..1.0)).collect(),
            })
            .collect()
    }

    #[test]
    fn prediction_in_open_interval() {
        let m = tiny();
        for g in batch(&m, 1) {
            for x in &g.inputs {
                let p = m.predict(x).unwrap();
                assert!(p > 0.0 && p < 1.0);
            }
        }
    }

    #[test]
    fn parameter_count() {
        let m = tiny();
        let d = m.features.dim();
        assert_eq!(m.weights.len(), d * 5 + 5 + 5 * 3 + 3 + 3 + 1);
        assert_eq!(m.num_params(), m.weights.len());
    }

    /// Central differences in plain f64 at a loose tolerance; the strict
    /// check lives in the acceptance suite.
    #[test]
    fn gradient_matches_differences_roughly() {
        let m = tiny();
        let b = batch(&m, 3);
        let s = LossSettings { lambda: 1.0, delta: 0.1 };
        let (_, grad) = m.loss_and_gradient(&b, s).unwrap();
        let h = 1e-6;
        for (i, &g) in grad.iter().enumerate() {
            let mut up = m.clone();
            up.weights[i] += h;
            let mut dn = m.clone();
            dn.weights[i] -= h;
            let num = (up.loss_and_gradient(&b, s).unwrap().0.total - dn.loss_and_gradient(&b, s).unwrap().0.total)
                / (2.0 * h);
            assert!((num - g).abs() <= 1e-6 * g.abs().max(1e-3), "coord {i}: {num} vs {g}");
        }
    }

    #[test]
    fn zero_lambda_is_value_only() {
        let m = tiny();
        let b = batch(&m, 5);
        let (l0, g0) = m.loss_and_gradient(&b, LossSettings { lambda: 0.0, delta: 0.3 }).unwrap();
        let (l1, g1) = m.loss_and_gradient(&b, LossSettings { lambda: 0.1, delta: 0.3 }).unwrap();
        assert_eq!(l0.total, l0.value);
        assert_eq!(l0.value, l1.value);
        assert_eq!(l0.rank, l1.rank);
        assert_ne!(g0, g1);
    }

    #[test]
    fn stationary_at_matching_targets() {
        let m = tiny();
        let mut b = batch(&m, 9);
        for g in &mut b {
            g.targets = g.inputs.iter().map(|x| m.predict(x).unwrap()).collect();
        }
        let (_, grad) = m.loss_and_gradient(&b, LossSettings { lambda: 0.1, delta: 0.99 }).unwrap();
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny();
        let back = ScorerModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let bad = m.to_json().unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        assert!(matches!(ScorerModel::from_json(&bad), Err(Error::Version { .. })));
        let mut nan = m.clone();
        nan.weights[0] = f64::NAN;
        assert!(matches!(ScorerModel::from_json(&nan.to_json().unwrap()), Err(Error::Validation { .. })));
    }

    #[test]
    fn wrong_feature_width() {
        assert!(matches!(tiny().predict(&[0.0; 2]), Err(Error::Usage(_))));
    }
}
