//! Binary classifier separating oversegmentations from natural gaps.
//!
//! A small fully connected network (hidden sizes 128/64/32, rectifier
//! activations, logistic output, 0.3 dropout during training) trained
//! with adaptive-moment stochastic gradient descent on binary
//! cross-entropy. Training is deterministic per seed; inference is a pure
//! forward pass with dropout disabled.

use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    build_feature_vector, screen_candidates, CandidatePair, FeatureConfig, FeatureVector,
    ScreenConfig, ShapeNormalizers,
};
use crate::volume::{build_cell_index, CellIndex, CellRecord, LabelVolume};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("training set contains a single class")]
    SingleClass,
    #[error("need at least 2 examples, got {0}")]
    TooFewExamples(usize),
    #[error("non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("feature length {actual} does not match model input {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("no eligible cells for synthesis (min height {0})")]
    NoEligibleCells(usize),
    #[error("corrupt model file: {0}")]
    CorruptFile(String),
    #[error("model format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("inconsistent weight shapes in model file")]
    ShapeMismatch,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub volume_id: String,
    pub label_a: u32,
    pub label_b: u32,
    pub synthesized: bool,
}

#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub features: FeatureVector,
    /// true = oversegmented, false = natural gap
    pub label: bool,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct Hyperparams {
    pub hidden_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub validation_fraction: f64,
    pub patience: usize,
    pub dropout: f64,
    /// inverse-frequency loss weighting for class imbalance
    pub class_weighting: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![128, 64, 32],
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 100,
            validation_fraction: 0.1,
            patience: 10,
            dropout: 0.3,
            class_weighting: false,
        }
    }
}

/// Per-feature standardization statistics fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// features that had zero variance; their std is stored as 1
    pub zero_variance: Vec<bool>,
}

impl FeatureScaler {
    pub fn fit(rows: &[&[f64]]) -> Self {
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in rows {
            for (m, v) in mean.iter_mut().zip(row.iter()) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for row in rows {
            for ((s, v), m) in var.iter_mut().zip(row.iter()).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let mut std = Vec::with_capacity(dim);
        let mut zero = Vec::with_capacity(dim);
        for s in var {
            let sd = (s / n).sqrt();
            if sd > 0.0 {
                std.push(sd);
                zero.push(false);
            } else {
                std.push(1.0);
                zero.push(true);
            }
        }
        Self {
            mean,
            std,
            zero_variance: zero,
        }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }
}

/// Trained model: weights, scaler, shape-index normalizers, threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layer_sizes: Vec<usize>,
    /// row-major (out x in) per layer
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub scaler: FeatureScaler,
    pub normalizers: ShapeNormalizers,
    pub threshold: f64,
    pub variant: crate::features::FeatureVariant,
    pub dropout: f64,
    pub seed: u64,
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl MlpModel {
    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    fn new_random(layer_sizes: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            // He-style uniform init for rectifier layers
            let bound = (6.0 / n_in as f64).sqrt();
            weights.push(
                (0..n_in * n_out)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect(),
            );
            biases.push(vec![0.0; n_out]);
        }
        let dim = layer_sizes[0];
        Self {
            layer_sizes,
            weights,
            biases,
            scaler: FeatureScaler {
                mean: vec![0.0; dim],
                std: vec![1.0; dim],
                zero_variance: vec![false; dim],
            },
            normalizers: ShapeNormalizers::default(),
            threshold: 0.5,
            variant: crate::features::FeatureVariant::Default,
            dropout: 0.3,
            seed: 0,
        }
    }

    /// Forward pass on an already-standardized input. Returns logit plus
    /// per-layer pre-activations and activations for backprop.
    fn forward(
        &self,
        x: &[f64],
        dropout_masks: Option<&[Vec<f64>]>,
    ) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n_layers = self.weights.len();
        let mut activations: Vec<Vec<f64>> = vec![x.to_vec()];
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let n_in = self.layer_sizes[l];
            let n_out = self.layer_sizes[l + 1];
            let input = &activations[l];
            let mut z = self.biases[l].clone();
            for o in 0..n_out {
                let row = &self.weights[l][o * n_in..(o + 1) * n_in];
                z[o] += row.iter().zip(input.iter()).map(|(w, a)| w * a).sum::<f64>();
            }
            pre.push(z.clone());
            if l + 1 < n_layers {
                let mut a: Vec<f64> = z.into_iter().map(relu).collect();
                if let Some(masks) = dropout_masks {
                    for (v, m) in a.iter_mut().zip(&masks[l]) {
                        *v *= m;
                    }
                }
                activations.push(a);
            } else {
                activations.push(z);
            }
        }
        let logit = activations.last().unwrap()[0];
        (logit, pre, activations)
    }

    /// Probability of the oversegmented class, dropout disabled.
    pub fn probability(&self, features: &[f64]) -> Result<f64, ClassifierError> {
        if features.len() != self.input_size() {
            return Err(ClassifierError::LengthMismatch {
                expected: self.input_size(),
                actual: features.len(),
            });
        }
        let x = self.scaler.transform(features);
        let (logit, _, _) = self.forward(&x, None);
        Ok(sigmoid(logit))
    }
}

/// Forward pass + decision at the model's threshold.
pub fn predict(model: &MlpModel, features: &[f64]) -> Result<(f64, bool), ClassifierError> {
    let p = model.probability(features)?;
    Ok((p, p >= model.threshold))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub val_accuracy: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub seed: u64,
    pub variant: crate::features::FeatureVariant,
}

struct AdamState {
    m_w: Vec<Vec<f64>>,
    v_w: Vec<Vec<f64>>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    fn new(model: &MlpModel) -> Self {
        Self {
            m_w: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            v_w: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            m_b: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            v_b: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            t: 0,
        }
    }
}

/// Analytic gradient of the mean weighted BCE loss over a batch of
/// standardized rows. Exposed for the finite-difference check.
pub fn batch_gradient(
    model: &MlpModel,
    rows: &[(Vec<f64>, f64, f64)], // (standardized features, label, weight)
    dropout_masks: Option<&[Vec<Vec<f64>>]>,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, f64) {
    let n_layers = model.weights.len();
    let mut grad_w: Vec<Vec<f64>> = model.weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut grad_b: Vec<Vec<f64>> = model.biases.iter().map(|b| vec![0.0; b.len()]).collect();
    let mut loss = 0.0;
    let scale = 1.0 / rows.len() as f64;
    for (i, (x, y, wgt)) in rows.iter().enumerate() {
        let masks = dropout_masks.map(|m| &m[i][..]);
        let (logit, pre, acts) = model.forward(x, masks);
        // numerically stable BCE on logits
        loss += wgt * (logit.max(0.0) - logit * y + (1.0 + (-logit.abs()).exp()).ln());
        let mut delta = vec![wgt * (sigmoid(logit) - y)];
        for l in (0..n_layers).rev() {
            let n_in = model.layer_sizes[l];
            let n_out = model.layer_sizes[l + 1];
            for o in 0..n_out {
                grad_b[l][o] += scale * delta[o];
                for j in 0..n_in {
                    grad_w[l][o * n_in + j] += scale * delta[o] * acts[l][j];
                }
            }
            if l == 0 {
                break;
            }
            let mut next = vec![0.0; n_in];
            for j in 0..n_in {
                let mut s = 0.0;
                for o in 0..n_out {
                    s += model.weights[l][o * n_in + j] * delta[o];
                }
                // rectifier derivative at the previous layer's pre-activation
                if pre[l - 1][j] > 0.0 {
                    if let Some(m) = masks {
                        s *= m[l - 1][j];
                    }
                    next[j] = s;
                } else {
                    next[j] = 0.0;
                }
            }
            delta = next;
        }
    }
    (grad_w, grad_b, loss * scale)
}

fn mean_loss(model: &MlpModel, rows: &[(Vec<f64>, f64, f64)]) -> f64 {
    let mut loss = 0.0;
    for (x, y, wgt) in rows {
        let (logit, _, _) = model.forward(x, None);
        loss += wgt * (logit.max(0.0) - logit * y + (1.0 + (-logit.abs()).exp()).ln());
    }
    loss / rows.len() as f64
}

/// Train an MLP on labeled feature vectors. Deterministic per seed.
pub fn train(
    examples: &[TrainingExample],
    hp: &Hyperparams,
    seed: u64,
) -> Result<(MlpModel, TrainingReport), ClassifierError> {
    if examples.len() < 2 {
        return Err(ClassifierError::TooFewExamples(examples.len()));
    }
    let n_pos = examples.iter().filter(|e| e.label).count();
    let n_neg = examples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ClassifierError::SingleClass);
    }
    let variant = examples[0].features.variant;
    let dim = examples[0].features.values.len();

    // per-class shape-index normalization fitted on the full corpus and
    // persisted with the model
    let normalizers = ShapeNormalizers::fit(
        &examples
            .iter()
            .map(|e| (e.features.shape_class, e.features.raw_r2))
            .collect::<Vec<_>>(),
    );
    let slot = variant.shape_index_slot();
    let rewrite_shape_slot = dim == variant.vector_len();
    let rows: Vec<(Vec<f64>, f64)> = examples
        .iter()
        .map(|e| {
            let mut v = e.features.values.clone();
            if rewrite_shape_slot {
                v[slot] = normalizers.apply(e.features.shape_class, e.features.raw_r2);
            }
            (v, if e.label { 1.0 } else { 0.0 })
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((rows.len() as f64 * hp.validation_fraction).round() as usize)
        .min(rows.len().saturating_sub(2));
    let (val_idx, train_idx) = order.split_at(n_val);

    // class weights from the training split
    let tp = train_idx.iter().filter(|&&i| rows[i].1 > 0.5).count();
    let tn = train_idx.len() - tp;
    let (w_pos, w_neg) = if hp.class_weighting && tp > 0 && tn > 0 {
        let total = train_idx.len() as f64;
        (total / (2.0 * tp as f64), total / (2.0 * tn as f64))
    } else {
        (1.0, 1.0)
    };

    // scaler fitted on the training split only
    let train_rows_raw: Vec<&[f64]> = train_idx.iter().map(|&i| rows[i].0.as_slice()).collect();
    let scaler = FeatureScaler::fit(&train_rows_raw);

    let weight_of = |y: f64| if y > 0.5 { w_pos } else { w_neg };
    let train_set: Vec<(Vec<f64>, f64, f64)> = train_idx
        .iter()
        .map(|&i| (scaler.transform(&rows[i].0), rows[i].1, weight_of(rows[i].1)))
        .collect();
    let val_set: Vec<(Vec<f64>, f64, f64)> = val_idx
        .iter()
        .map(|&i| (scaler.transform(&rows[i].0), rows[i].1, weight_of(rows[i].1)))
        .collect();

    let mut layer_sizes = vec![dim];
    layer_sizes.extend_from_slice(&hp.hidden_sizes);
    layer_sizes.push(1);
    let mut model = MlpModel::new_random(layer_sizes, &mut rng);
    model.scaler = scaler;
    model.normalizers = normalizers;
    model.variant = variant;
    model.dropout = hp.dropout;
    model.seed = seed;

    let mut adam = AdamState::new(&model);
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut best: Option<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>, usize)> = None;
    let mut patience_left = hp.patience;
    let mut epochs = Vec::new();
    let mut batch_order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..hp.max_epochs {
        batch_order.shuffle(&mut rng);
        for chunk in batch_order.chunks(hp.batch_size.max(1)) {
            let batch: Vec<(Vec<f64>, f64, f64)> =
                chunk.iter().map(|&i| train_set[i].clone()).collect();
            // inverted dropout masks per example per hidden layer
            let masks: Option<Vec<Vec<Vec<f64>>>> = if hp.dropout > 0.0 {
                Some(
                    (0..batch.len())
                        .map(|_| {
                            model.layer_sizes[1..model.layer_sizes.len() - 1]
                                .iter()
                                .map(|&n| {
                                    (0..n)
                                        .map(|_| {
                                            if rng.gen::<f64>() < hp.dropout {
                                                0.0
                                            } else {
                                                1.0 / (1.0 - hp.dropout)
                                            }
                                        })
                                        .collect()
                                })
                                .collect()
                        })
                        .collect(),
                )
            } else {
                None
            };
            let (grad_w, grad_b, batch_loss) = batch_gradient(&model, &batch, masks.as_deref());
            if !batch_loss.is_finite() {
                return Err(ClassifierError::NonFiniteLoss(epoch));
            }
            adam.t += 1;
            let bc1 = 1.0 - beta1.powi(adam.t as i32);
            let bc2 = 1.0 - beta2.powi(adam.t as i32);
            for l in 0..model.weights.len() {
                for (i, g) in grad_w[l].iter().enumerate() {
                    adam.m_w[l][i] = beta1 * adam.m_w[l][i] + (1.0 - beta1) * g;
                    adam.v_w[l][i] = beta2 * adam.v_w[l][i] + (1.0 - beta2) * g * g;
                    model.weights[l][i] -= hp.learning_rate * (adam.m_w[l][i] / bc1)
                        / ((adam.v_w[l][i] / bc2).sqrt() + eps);
                }
                for (i, g) in grad_b[l].iter().enumerate() {
                    adam.m_b[l][i] = beta1 * adam.m_b[l][i] + (1.0 - beta1) * g;
                    adam.v_b[l][i] = beta2 * adam.v_b[l][i] + (1.0 - beta2) * g * g;
                    model.biases[l][i] -= hp.learning_rate * (adam.m_b[l][i] / bc1)
                        / ((adam.v_b[l][i] / bc2).sqrt() + eps);
                }
            }
        }
        let train_loss = mean_loss(&model, &train_set);
        let monitor_set: &[(Vec<f64>, f64, f64)] = if val_set.is_empty() {
            &train_set
        } else {
            &val_set
        };
        let val_loss = mean_loss(&model, monitor_set);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(ClassifierError::NonFiniteLoss(epoch));
        }
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        let improved = best.as_ref().map(|(b, _, _, _)| val_loss < *b).unwrap_or(true);
        if improved {
            best = Some((val_loss, model.weights.clone(), model.biases.clone(), epoch));
            patience_left = hp.patience;
        } else {
            if patience_left == 0 {
                break;
            }
            patience_left -= 1;
        }
    }
    let (_, best_w, best_b, best_epoch) = best.expect("at least one epoch ran");
    model.weights = best_w;
    model.biases = best_b;

    let eval_set: &[(Vec<f64>, f64, f64)] = if val_set.is_empty() {
        &train_set
    } else {
        &val_set
    };
    let correct = eval_set
        .iter()
        .filter(|(x, y, _)| {
            let (logit, _, _) = model.forward(x, None);
            (sigmoid(logit) >= model.threshold) == (*y > 0.5)
        })
        .count();
    let report = TrainingReport {
        epochs,
        best_epoch,
        val_accuracy: correct as f64 / eval_set.len() as f64,
        n_train: train_set.len(),
        n_val: val_set.len(),
        n_positive: n_pos,
        n_negative: n_neg,
        seed,
        variant,
    };
    Ok((model, report))
}

#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    pub true_cases_per_volume: usize,
    pub min_cell_height: usize,
    pub feature: FeatureConfig,
    pub screen: ScreenConfig,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            true_cases_per_volume: 20,
            min_cell_height: 4,
            feature: FeatureConfig::default(),
            screen: ScreenConfig::default(),
        }
    }
}

/// Split one cell record into an (upper, lower) fragment pair with the
/// given interior layer deleted, without touching the volume.
fn split_record(rec: &CellRecord, layer: usize, fresh: u32) -> (CellRecord, CellRecord) {
    let mut upper_masks = std::collections::BTreeMap::new();
    let mut lower_masks = std::collections::BTreeMap::new();
    for (&z, m) in &rec.masks {
        if z < layer {
            upper_masks.insert(z, m.clone());
        } else if z > layer {
            let mut m2 = m.clone();
            m2.label = fresh;
            lower_masks.insert(z, m2);
        }
    }
    let upper = CellRecord {
        label: rec.label,
        top_layer: *upper_masks.keys().next().unwrap(),
        bottom_layer: *upper_masks.keys().next_back().unwrap(),
        voxel_count: upper_masks.values().map(|m| m.len()).sum(),
        masks: upper_masks,
    };
    let lower = CellRecord {
        label: fresh,
        top_layer: *lower_masks.keys().next().unwrap(),
        bottom_layer: *lower_masks.keys().next_back().unwrap(),
        voxel_count: lower_masks.values().map(|m| m.len()).sum(),
        masks: lower_masks,
    };
    (upper, lower)
}

/// Build a labeled training set from ground-truth volumes: true cases by
/// deleting an interior layer of a randomly picked cell, false cases from
/// screening the untouched volume (every hit is a natural gap by
/// construction).
pub fn synthesize_training_set(
    gt_volumes: &[(String, &LabelVolume)],
    cfg: &SynthesisConfig,
    seed: u64,
) -> Result<Vec<TrainingExample>, ClassifierError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // phase 1: sequential RNG draws so the example list per seed is stable
    // regardless of thread count
    struct Job {
        volume_id: String,
        pair: CandidatePair,
        index: std::sync::Arc<CellIndex>,
        label: bool,
    }
    let mut jobs = Vec::new();
    for (volume_id, volume) in gt_volumes {
        let index = std::sync::Arc::new(build_cell_index(volume));
        let eligible: Vec<u32> = index
            .cells
            .values()
            .filter(|r| {
                let extent = r.bottom_layer - r.top_layer + 1;
                extent >= cfg.min_cell_height && r.masks.len() == extent
            })
            .map(|r| r.label)
            .collect();
        if eligible.is_empty() && cfg.true_cases_per_volume > 0 {
            return Err(ClassifierError::NoEligibleCells(cfg.min_cell_height));
        }
        let fresh = index.labels().max().unwrap_or(0) + 1;
        for _ in 0..cfg.true_cases_per_volume {
            let label = eligible[rng.gen_range(0..eligible.len())];
            let rec = index.get(label).unwrap();
            let layer = rng.gen_range(rec.top_layer + 1..rec.bottom_layer);
            let (upper, lower) = split_record(rec, layer, fresh);
            let mut tmp = CellIndex::default();
            tmp.cells.insert(upper.label, upper);
            tmp.cells.insert(lower.label, lower);
            let pair = CandidatePair {
                label_a: label,
                label_b: fresh,
                gap_layers: vec![layer],
            };
            jobs.push(Job {
                volume_id: volume_id.clone(),
                pair,
                index: std::sync::Arc::new(tmp),
                label: true,
            });
        }
        for pair in screen_candidates(&index, &cfg.screen) {
            jobs.push(Job {
                volume_id: volume_id.clone(),
                pair,
                index: std::sync::Arc::clone(&index),
                label: false,
            });
        }
    }
    // phase 2: feature extraction fans out, order preserved
    jobs.par_iter()
        .map(|job| {
            let features = build_feature_vector(&job.pair, &job.index, &cfg.feature)?;
            Ok(TrainingExample {
                features,
                label: job.label,
                provenance: Provenance {
                    volume_id: job.volume_id.clone(),
                    label_a: job.pair.label_a,
                    label_b: job.pair.label_b,
                    synthesized: job.label,
                },
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    variant: crate::features::FeatureVariant,
    layer_sizes: Vec<usize>,
    weights: Vec<String>,
    biases: Vec<String>,
    scaler_mean: String,
    scaler_std: String,
    zero_variance: Vec<bool>,
    normalizers: ShapeNormalizers,
    threshold: f64,
    dropout: f64,
    seed: u64,
}

fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_f64s(s: &str) -> Result<Vec<f64>, ClassifierError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| ClassifierError::CorruptFile(e.to_string()))?;
    if bytes.len() % 8 != 0 {
        return Err(ClassifierError::CorruptFile(
            "weight buffer length not a multiple of 8".into(),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save_model(model: &MlpModel, path: &std::path::Path) -> Result<(), ClassifierError> {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        variant: model.variant,
        layer_sizes: model.layer_sizes.clone(),
        weights: model.weights.iter().map(|w| encode_f64s(w)).collect(),
        biases: model.biases.iter().map(|b| encode_f64s(b)).collect(),
        scaler_mean: encode_f64s(&model.scaler.mean),
        scaler_std: encode_f64s(&model.scaler.std),
        zero_variance: model.scaler.zero_variance.clone(),
        normalizers: model.normalizers,
        threshold: model.threshold,
        dropout: model.dropout,
        seed: model.seed,
    };
    std::fs::write(path, serde_json::to_string_pretty(&file).expect("model serializes"))?;
    Ok(())
}

pub fn load_model(path: &std::path::Path) -> Result<MlpModel, ClassifierError> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile =
        serde_json::from_str(&text).map_err(|e| ClassifierError::CorruptFile(e.to_string()))?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(ClassifierError::VersionMismatch {
            found: file.format_version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    if file.layer_sizes.len() < 2 || file.weights.len() != file.layer_sizes.len() - 1 {
        return Err(ClassifierError::ShapeMismatch);
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (l, (ws, bs)) in file.weights.iter().zip(&file.biases).enumerate() {
        let w = decode_f64s(ws)?;
        let b = decode_f64s(bs)?;
        if w.len() != file.layer_sizes[l] * file.layer_sizes[l + 1]
            || b.len() != file.layer_sizes[l + 1]
        {
            return Err(ClassifierError::ShapeMismatch);
        }
        weights.push(w);
        biases.push(b);
    }
    let mean = decode_f64s(&file.scaler_mean)?;
    let std = decode_f64s(&file.scaler_std)?;
    if mean.len() != file.layer_sizes[0] || std.len() != file.layer_sizes[0] {
        return Err(ClassifierError::ShapeMismatch);
    }
    Ok(MlpModel {
        layer_sizes: file.layer_sizes,
        weights,
        biases,
        scaler: FeatureScaler {
            mean,
            std,
            zero_variance: file.zero_variance,
        },
        normalizers: file.normalizers,
        threshold: file.threshold,
        variant: file.variant,
        dropout: file.dropout,
        seed: file.seed,
    })
}
