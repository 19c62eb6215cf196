//! Loss, optimizer, weighted sampling and the training loop.

mod dataset;
mod gradcheck;
mod optimizer;

use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::class_weights;
use crate::predictor::layers::log_softmax;
use crate::predictor::{argmax_low, Mode, Parameters, PredictorConfig, PredictorModel, Real};

pub use dataset::{crop_motion, ClipDataset, ManifestDataset, MemoryClip, MemoryDataset};
pub use gradcheck::{gradient_check, perturb_parameters, TensorGradCheck, GRADCHECK_FLOOR};
pub use optimizer::{adamw_step, OptimizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Share of scenes held out for validation.
    pub validation_fraction: f64,
    /// Stop once the (weighted) validation accuracy reaches this value.
    pub target_val_accuracy: Option<f64>,
    /// Serial, bit-reproducible execution.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            dropout: 0.3,
            batch_size: 4,
            epochs: 30,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            validation_fraction: 0.1,
            target_val_accuracy: None,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("Adam betas must be in [0, 1) and epsilon positive".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction must be in [0, 1), got {}", self.validation_fraction));
        }
        Ok(())
    }
}

/// Stable `-log softmax(logits)[label]` and its gradient `softmax - onehot`.
pub fn cross_entropy<F: Real>(logits: &[F], label: usize) -> (F, Vec<F>) {
    assert!(label < logits.len(), "label {label} out of range");
    let log_probs = log_softmax(logits);
    let mut grad: Vec<F> = log_probs.iter().map(|&l| l.exp()).collect();
    grad[label] -= F::one();
    (-log_probs[label], grad)
}

/// `n` draws with replacement, item `i` chosen with probability
/// proportional to `weights[labels[i]]`.
pub fn weighted_sample(labels: &[usize], weights: &[f64], n: usize, seed: u64) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::Empty("label list"));
    }
    let item_weights = labels
        .iter()
        .map(|&l| {
            weights.get(l).copied().ok_or(Error::InvalidLevel {
                index: l,
                levels: weights.len(),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let dist = WeightedIndex::new(&item_weights).map_err(|e| match e {
        rand::distr::weighted::Error::InsufficientNonZero => Error::ZeroWeights,
        other => Error::Config(format!("sampling weights: {other}")),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| dist.sample(&mut rng)).collect())
}

/// SplitMix64-style mixing used to derive independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SPLIT: u64 = 1;
const STREAM_SAMPLER: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

/// Train/validation indices, split by scene.
pub fn split_by_scene(data: &dyn ClipDataset, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let scenes: BTreeSet<&str> = (0..data.len()).map(|i| data.scene(i)).collect();
    let mut scenes: Vec<&str> = scenes.into_iter().collect();
    scenes.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SPLIT, 0)));
    let held = if scenes.len() < 2 || fraction <= 0.0 {
        0
    } else {
        ((scenes.len() as f64 * fraction).ceil() as usize).clamp(1, scenes.len() - 1)
    };
    let val_scenes: BTreeSet<&str> = scenes[..held].iter().copied().collect();
    (0..data.len()).partition(|&i| !val_scenes.contains(data.scene(i)))
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// `train`, `val` (class-weighted, matching the weighted sampler's
    /// expectation) or `val_unweighted`.
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

/// `epoch,split,loss,accuracy` with an optional leading comment line.
pub fn metrics_csv(metrics: &[EpochMetrics], preamble: Option<&str>) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for m in metrics {
        writer.serialize(m)?;
    }
    let body = String::from_utf8(writer.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv is utf-8");
    let body = if metrics.is_empty() {
        "epoch,split,loss,accuracy\n".to_string()
    } else {
        body
    };
    Ok(format!("{}{}", preamble.unwrap_or(""), body))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best model by validation accuracy (final model when there is no validation split).
    pub model: PredictorModel<f32>,
    pub best_epoch: usize,
    pub final_model: PredictorModel<f32>,
    pub optimizer: OptimizerState<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Per-clip inference result.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipPrediction {
    pub index: usize,
    pub log_probs: Vec<f32>,
    pub predicted: usize,
}

fn map_indices<T: Send>(indices: &[usize], parallel: bool, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    if parallel {
        indices.par_iter().map(|&i| f(i)).collect()
    } else {
        indices.iter().map(|&i| f(i)).collect()
    }
}

/// Inference-mode log-probabilities for the given clips, in input order.
pub fn predict_clips(
    model: &PredictorModel<f32>,
    data: &dyn ClipDataset,
    indices: &[usize],
    deterministic: bool,
) -> Result<Vec<ClipPrediction>> {
    map_indices(indices, !deterministic, |i| {
        let (m, s) = data.load(i, model.config.crop)?;
        let out = model.forward(&m, &s, Mode::Inference)?;
        Ok(ClipPrediction {
            index: i,
            log_probs: log_softmax(&out.logits),
            predicted: argmax_low(&out.logits),
        })
    })
}

fn labels_of(data: &dyn ClipDataset, indices: &[usize], classes: usize) -> Result<Vec<usize>> {
    indices
        .iter()
        .map(|&i| {
            let l = data.label(i).ok_or_else(|| Error::Unlabeled(data.clip_id(i).to_string()))?;
            if l >= classes {
                return Err(Error::InvalidLevel { index: l, levels: classes });
            }
            Ok(l)
        })
        .collect()
}

/// Validation metrics: (class-weighted loss, weighted accuracy, plain loss, plain accuracy).
fn validation_metrics(
    model: &PredictorModel<f32>,
    data: &dyn ClipDataset,
    indices: &[usize],
    labels: &[usize],
    deterministic: bool,
) -> Result<(f64, f64, f64, f64)> {
    let preds = predict_clips(model, data, indices, deterministic)?;
    let weights = class_weights(labels, model.config.classes)?;
    let (mut wl, mut wa, mut wsum, mut l, mut a) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, &label) in preds.iter().zip(labels) {
        let loss = -(p.log_probs[label] as f64);
        let hit = f64::from(u8::from(p.predicted == label));
        let w = weights[label];
        wl += w * loss;
        wa += w * hit;
        wsum += w;
        l += loss;
        a += hit;
    }
    let n = labels.len() as f64;
    Ok((wl / wsum, wa / wsum, l / n, a / n))
}

/// Trains from a fresh initialization; `on_epoch` sees each epoch's rows.
pub fn train(
    data: &dyn ClipDataset,
    model_config: &PredictorConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&[EpochMetrics]),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let model_config = PredictorConfig {
        dropout: cfg.dropout,
        ..model_config.clone()
    };
    let classes = model_config.classes;
    let all: Vec<usize> = (0..data.len()).collect();
    labels_of(data, &all, classes)?;

    let (train_idx, val_idx) = split_by_scene(data, cfg.validation_fraction, cfg.seed);
    let train_labels = labels_of(data, &train_idx, classes)?;
    let val_labels = labels_of(data, &val_idx, classes)?;
    let weights = class_weights(&train_labels, classes)?;

    let mut model = PredictorModel::<f32>::init(&model_config, cfg.seed)?;
    let mut optimizer = OptimizerState::new(&model.params);
    let mut metrics = Vec::new();
    let mut best: Option<(f64, f64, usize, PredictorModel<f32>)> = None;
    let parallel = !cfg.deterministic;

    for epoch in 1..=cfg.epochs {
        let order = weighted_sample(
            &train_labels,
            &weights,
            train_idx.len(),
            derive_seed(cfg.seed, STREAM_SAMPLER, epoch as u64),
        )?;
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f32;
            let slots: Vec<usize> = (0..batch.len()).collect();
            let model_ref = &model;
            let results = map_indices(&slots, parallel, |slot| {
                let pos = batch[slot];
                let (m, s) = data.load(train_idx[pos], model_config.crop)?;
                let dropout_seed = derive_seed(
                    cfg.seed,
                    STREAM_DROPOUT,
                    ((epoch as u64) << 40) | ((step as u64) << 8) | slot as u64,
                );
                let (out, cache) = model_ref.forward_cached(&m, &s, Mode::Training { dropout_seed })?;
                let label = train_labels[pos];
                let (loss, mut dlogits) = cross_entropy(&out.logits, label);
                dlogits.iter_mut().for_each(|d| *d *= scale);
                let mut grads = model_ref.params.zeros_like();
                model_ref.backward(&cache, &dlogits, &mut grads);
                Ok((loss as f64, argmax_low(&out.logits) == label, grads))
            })?;
            let mut total: Option<Parameters<f32>> = None;
            for (loss, hit, grads) in results {
                loss_sum += loss;
                hits += usize::from(hit);
                match &mut total {
                    None => total = Some(grads),
                    Some(t) => t.add_scaled(&grads, 1.0),
                }
            }
            let grads = total.expect("non-empty batch");
            adamw_step(&mut model.params, &grads, &mut optimizer, cfg);
        }
        let n = order.len() as f64;
        let mut rows = vec![EpochMetrics {
            epoch,
            split: "train".into(),
            loss: loss_sum / n,
            accuracy: hits as f64 / n,
        }];
        let mut reached_target = false;
        if !val_idx.is_empty() {
            let (wl, wa, l, a) = validation_metrics(&model, data, &val_idx, &val_labels, cfg.deterministic)?;
            rows.push(EpochMetrics { epoch, split: "val".into(), loss: wl, accuracy: wa });
            rows.push(EpochMetrics { epoch, split: "val_unweighted".into(), loss: l, accuracy: a });
            let better = match &best {
                None => true,
                Some((acc, loss, _, _)) => wa > *acc || (wa == *acc && wl < *loss),
            };
            if better {
                best = Some((wa, wl, epoch, model.clone()));
            }
            reached_target = cfg.target_val_accuracy.is_some_and(|t| wa >= t);
        }
        on_epoch(&rows);
        metrics.extend(rows);
        if reached_target {
            break;
        }
    }

    let last_epoch = metrics.last().map_or(0, |m| m.epoch);
    let (best_epoch, best_model) = match best {
        Some((_, _, epoch, m)) => (epoch, m),
        None => (last_epoch, model.clone()),
    };
    Ok(TrainOutcome {
        model: best_model,
        best_epoch,
        final_model: model,
        optimizer,
        metrics,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{MotionTensor, SpatialDescriptors};

    #[test]
    fn cross_entropy_examples() {
        let (loss, grad) = cross_entropy(&[0.0f64; 5], 2);
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        assert!((grad[2] + 0.8).abs() < 1e-12);
        let (loss, grad) = cross_entropy(&[10.0f64, 0.0, 0.0, 0.0, 0.0], 0);
        // -log(e^10 / (e^10 + 4))
        let want = (1.0 + 4.0 * (-10.0f64).exp()).ln();
        assert!((loss - want).abs() < 1e-15);
        assert!((loss - 1.815_832e-4).abs() < 1e-10);
        // softmax[0] - 1 = -4e^-10 / (1 + 4e^-10)
        assert!((grad[0] + 1.815_667e-4).abs() < 1e-10);
        assert!(grad.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let (loss, grad) = cross_entropy(&[1000.0f64, -1000.0, 0.0], 1);
        assert!((loss - 2000.0).abs() < 1e-9);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn sampler_frequencies_follow_weights() {
        let labels: Vec<usize> = (0..1000).map(|i| i % 5).collect();
        let draws = weighted_sample(&labels, &[1.0; 5], 100_000, 3).unwrap();
        let mut counts = [0usize; 5];
        for d in &draws {
            counts[labels[*d]] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e5 - 0.2).abs() < 0.02);
        }
        let only = weighted_sample(&labels, &[0.0, 0.0, 2.0, 0.0, 0.0], 1000, 3).unwrap();
        assert!(only.iter().all(|&i| labels[i] == 2));
        assert_eq!(draws, weighted_sample(&labels, &[1.0; 5], 100_000, 3).unwrap());
        assert!(matches!(weighted_sample(&labels, &[0.0; 5], 10, 3), Err(Error::ZeroWeights)));
    }

    #[test]
    fn scene_split_never_shares_scenes() {
        let data = toy_dataset(40, 4);
        let (train, val) = split_by_scene(&data, 0.1, 5);
        assert_eq!(train.len() + val.len(), data.len());
        assert!(!val.is_empty());
        let val_scenes: BTreeSet<&str> = val.iter().map(|&i| data.scene(i)).collect();
        assert!(train.iter().all(|&i| !val_scenes.contains(data.scene(i))));
    }

    /// Clips whose label is encoded in the sign pattern of a constant motion field.
    fn toy_dataset(n: usize, clips_per_scene: usize) -> MemoryDataset {
        let c = PredictorConfig::tiny();
        let clips = (0..n)
            .map(|i| {
                let label = i % 2;
                let v = if label == 0 { 0.5 } else { -0.5 };
                let mut motion = MotionTensor::zeros(c.frames, c.crop, c.crop);
                motion.data_mut().iter_mut().enumerate().for_each(|(j, x)| *x = v + (j % 7) as f32 * 0.01);
                MemoryClip {
                    clip_id: format!("c{i}"),
                    scene: format!("s{}", i / clips_per_scene),
                    label: Some(label),
                    motion,
                    descriptors: SpatialDescriptors::new(c.frames, 384, vec![0.1; c.descriptor_len()]).unwrap(),
                }
            })
            .collect();
        MemoryDataset { clips }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let data = toy_dataset(12, 2);
        let c = PredictorConfig::tiny();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            weight_decay: 0.0,
            epochs: 2,
            ..TrainConfig::default()
        };
        let out = train(&data, &c, &cfg, |_| {}).unwrap();
        let init = PredictorModel::<f32>::init(&c, cfg.seed).unwrap();
        assert_eq!(out.final_model.params, init.params);
        assert_eq!(out.optimizer.step, 6);
    }

    #[test]
    fn deterministic_training_is_bit_identical() {
        let data = toy_dataset(16, 2);
        let c = PredictorConfig::tiny();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 2,
            deterministic: true,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train(&data, &c, &cfg, |_| {}).unwrap();
        let b = train(&data, &c, &cfg, |_| {}).unwrap();
        assert_eq!(a.final_model, b.final_model);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.metrics.iter().filter(|m| m.split == "val").count(), 2);
    }

    #[test]
    fn loss_descends_on_a_fixed_batch() {
        let data = toy_dataset(4, 1);
        let c = PredictorConfig::tiny();
        let mut model = PredictorModel::<f64>::init(&c, 2).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let mut state = OptimizerState::new(&model.params);
        let batch_loss = |model: &PredictorModel<f64>| -> (f64, Parameters<f64>) {
            let mut grads = model.params.zeros_like();
            let mut total = 0.0;
            for i in 0..4 {
                let (m, s) = data.load(i, c.crop).unwrap();
                let (out, cache) = model.forward_cached(&m, &s, Mode::Inference).unwrap();
                let (loss, mut d) = cross_entropy(&out.logits, data.label(i).unwrap());
                d.iter_mut().for_each(|v| *v /= 4.0);
                model.backward(&cache, &d, &mut grads);
                total += loss / 4.0;
            }
            (total, grads)
        };
        let mut losses = Vec::new();
        for _ in 0..6 {
            let (loss, grads) = batch_loss(&model);
            losses.push(loss);
            adamw_step(&mut model.params, &grads, &mut state, &cfg);
        }
        let violations = losses.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(violations <= 1, "losses {losses:?}");
    }

    #[test]
    fn metrics_csv_header() {
        let csv = metrics_csv(
            &[EpochMetrics { epoch: 1, split: "train".into(), loss: 0.5, accuracy: 0.75 }],
            Some("# provenance: {}\n"),
        )
        .unwrap();
        assert_eq!(csv, "# provenance: {}\nepoch,split,loss,accuracy\n1,train,0.5,0.75\n");
    }

    #[test]
    fn unlabeled_clip_is_rejected() {
        let mut data = toy_dataset(4, 1);
        data.clips[2].label = None;
        let err = train(&data, &PredictorConfig::tiny(), &TrainConfig::default(), |_| {}).unwrap_err();
        assert!(matches!(err, Error::Unlabeled(id) if id == "c2"));
        assert!(matches!(
            train(&MemoryDataset::default(), &PredictorConfig::tiny(), &TrainConfig::default(), |_| {}),
            Err(Error::Empty(_))
        ));
    }
}
