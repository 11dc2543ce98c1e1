//! Per-window supervised training, teacher selection, and feature-space
//! distillation.
//!
//! Both training entry points share one loop ([`run_training`]): adaptive
//! moment updates under a per-epoch cosine schedule, early stopping on
//! validation loss with strict improvement, and a best-validation-loss
//! checkpoint returned at the end. Supervised training is the degenerate
//! case of the combined objective with α = 1, β = 0, so a distillation run
//! with β = 0 reproduces the supervised trajectory bit for bit.
//!
//! Distillation aligns the student's pooled features to a frozen teacher's
//! via mean squared difference. The teacher's features are precomputed once
//! in evaluation mode; the teacher is borrowed immutably, so student steps
//! structurally cannot change it.

pub mod adam;
pub mod data;
pub mod losses;
pub mod schedule;
pub mod transfer;

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analysis::compute_auc;
use crate::error::XwdError;
use crate::ingestion::{DatasetSplit, Partition};
use crate::model::{build_encoder, sigmoid, EncoderConfig, EncoderState, Provenance};
use crate::seed::{derive_seed, rng_for};
use crate::windowing::{WindowSet, WindowedStack};
use crate::Result;

pub use adam::Adam;
pub use data::{window_data, WindowData};
pub use losses::{bce_from_logit, bce_grad, distill_loss, kd_grad, kd_loss};
pub use schedule::{cosine_lr, EarlyStopping};
pub use transfer::{transfer_direct, transfer_finetune_heads};

/// Optimization hyperparameters shared by supervised and distilled runs.
/// Fields omitted from a serialized document fall back to [`Default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Initial learning rate of the cosine schedule.
    pub lr: f64,
    /// Maximum number of epochs.
    pub epochs: usize,
    pub batch_size: usize,
    /// Consecutive non-improving validation epochs tolerated before stopping.
    pub early_stop_patience: usize,
    /// Weight of the classification term in the combined objective.
    pub alpha: f64,
    /// Weight of the feature-alignment term.
    pub beta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            epochs: 40,
            batch_size: 4,
            early_stop_patience: 10,
            alpha: 0.5,
            beta: 0.5,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(XwdError::ConfigInvalid(msg));
        if !self.lr.is_finite() || self.lr < 0.0 {
            return fail(format!("learning rate must be finite and ≥ 0, got {}", self.lr));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if self.early_stop_patience == 0 {
            return fail("early-stop patience must be at least 1".into());
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return fail(format!(
                "loss weights must be nonnegative, got α={} β={}",
                self.alpha, self.beta
            ));
        }
        if (self.alpha + self.beta - 1.0).abs() > 1e-12 {
            return fail(format!(
                "loss weights must form a convex combination (α+β=1), got α={} β={}",
                self.alpha, self.beta
            ));
        }
        Ok(())
    }
}

/// One epoch of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    /// α·train_cls + β·train_kd, aggregated over all training samples.
    pub train_total: f64,
    pub train_cls: f64,
    pub train_kd: f64,
    pub val_loss: f64,
    pub val_auc: f64,
    pub wall_ms: u64,
}

/// Full log of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Effective loss weights of the run (1/0 for supervised training).
    pub alpha: f64,
    pub beta: f64,
    pub records: Vec<EpochRecord>,
    /// 1-based epoch whose checkpoint was returned.
    pub best_epoch: usize,
    /// 1-based last epoch that actually ran.
    pub stopped_epoch: usize,
}

impl TrainingLog {
    /// Line-delimited JSON, one epoch record per line.
    pub fn records_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Everything [`run_training`] needs beyond the config: the data, the
/// effective loss weights, and (for distillation) teacher feature matrices
/// aligned row-for-row with the corresponding [`WindowData`].
pub(crate) struct RunSpec<'a> {
    pub train: &'a WindowData,
    pub val: &'a WindowData,
    pub teacher_train: Option<&'a Array2<f64>>,
    pub teacher_val: Option<&'a Array2<f64>>,
    pub alpha: f64,
    pub beta: f64,
}

/// Shared optimization loop; returns the best-validation-loss checkpoint
/// (still trainable — callers stamp provenance and freeze).
pub(crate) fn run_training(
    mut state: EncoderState,
    spec: &RunSpec<'_>,
    cfg: &TrainConfig,
    shuffle_name: &str,
) -> Result<(EncoderState, TrainingLog)> {
    cfg.validate()?;
    if spec.train.is_empty() || spec.val.is_empty() {
        return Err(XwdError::EmptyInput("training requires nonempty train and val partitions"));
    }
    if spec.beta > 0.0 {
        let t = spec
            .teacher_train
            .zip(spec.teacher_val)
            .ok_or(XwdError::EmptyInput("feature alignment requires teacher features"))?;
        let d = state.config.feature_dim;
        if t.0.dim() != (spec.train.len(), d) || t.1.dim() != (spec.val.len(), d) {
            return Err(XwdError::DimensionMismatch(format!(
                "teacher features {:?}/{:?} do not match {} train / {} val samples of dim {}",
                t.0.dim(),
                t.1.dim(),
                spec.train.len(),
                spec.val.len(),
                d
            )));
        }
    }

    let n_train = spec.train.len();
    let d = state.config.feature_dim as f64;
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut shuffle_rng = rng_for(cfg.seed, "shuffle", shuffle_name);
    let mut opt = Adam::new();
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best_state: Option<EncoderState> = None;
    let mut records = Vec::new();
    let mut stopped_epoch = 0;

    for t in 0..cfg.epochs {
        let epoch = t + 1;
        let started = Instant::now();
        let lr = cosine_lr(cfg.lr, t, cfg.epochs);
        order.shuffle(&mut shuffle_rng);

        let mut sum_cls = 0.0;
        let mut sum_kd = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = spec.train.batch(chunk);
            let y = spec.train.targets(chunk);
            let b = chunk.len() as f64;

            state.zero_grads();
            let (feats, cache) = state.encoder.forward_train(&x, true);
            let logits = state.head.forward(&feats);

            let mut gz = vec![0.0; chunk.len()];
            for n in 0..chunk.len() {
                sum_cls += bce_from_logit(logits[n], y[n]);
                gz[n] = spec.alpha * bce_grad(logits[n], y[n]) / b;
            }
            let mut g_feats = state.head.backward(&feats, &gz);
            if spec.beta > 0.0 {
                let tf = spec.teacher_train.expect("teacher features checked above");
                for (n, &i) in chunk.iter().enumerate() {
                    for j in 0..feats.ncols() {
                        let diff = feats[(n, j)] - tf[(i, j)];
                        sum_kd += diff * diff / d;
                        g_feats[(n, j)] += spec.beta * 2.0 * diff / (d * b);
                    }
                }
            }
            state.encoder.backward(&cache, &g_feats);
            opt.step(&mut state, lr);
        }
        let train_cls = sum_cls / n_train as f64;
        let train_kd = sum_kd / n_train as f64;
        let train_total = spec.alpha * train_cls + spec.beta * train_kd;
        if !train_total.is_finite() {
            return Err(XwdError::Divergence { epoch });
        }

        let (val_loss, val_auc) = validate(&state, spec)?;
        if !val_loss.is_finite() {
            return Err(XwdError::Divergence { epoch });
        }

        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best_state = Some(state.clone());
        }
        records.push(EpochRecord {
            epoch,
            lr,
            train_total,
            train_cls,
            train_kd,
            val_loss,
            val_auc,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        stopped_epoch = epoch;
        if stop {
            break;
        }
    }

    let best_epoch = stopper.best_epoch();
    let best = best_state.expect("first epoch always improves on +inf");
    Ok((
        best,
        TrainingLog {
            alpha: spec.alpha,
            beta: spec.beta,
            records,
            best_epoch,
            stopped_epoch,
        },
    ))
}

/// Evaluation-mode validation loss (α·BCE + β·KD) and AUC.
fn validate(state: &EncoderState, spec: &RunSpec<'_>) -> Result<(f64, f64)> {
    let n = spec.val.len();
    let d = state.config.feature_dim as f64;
    let idx: Vec<usize> = (0..n).collect();
    let mut sum_cls = 0.0;
    let mut sum_kd = 0.0;
    let mut probs = Vec::with_capacity(n);
    for chunk in idx.chunks(4) {
        let x = spec.val.batch(chunk);
        let y = spec.val.targets(chunk);
        let (feats, logits) = state.forward_eval_batch(&x)?;
        for n in 0..chunk.len() {
            sum_cls += bce_from_logit(logits[n], y[n]);
            probs.push(sigmoid(logits[n]));
        }
        if spec.beta > 0.0 {
            let tf = spec.teacher_val.expect("teacher features checked by caller");
            for (n, &i) in chunk.iter().enumerate() {
                for j in 0..feats.ncols() {
                    let diff = feats[(n, j)] - tf[(i, j)];
                    sum_kd += diff * diff / d;
                }
            }
        }
    }
    let val_loss = spec.alpha * sum_cls / n as f64 + spec.beta * sum_kd / n as f64;
    let val_auc = compute_auc(&probs, &spec.val.labels)?;
    Ok((val_loss, val_auc))
}

/// Evaluation-mode feature matrix of `state` over `data`, one row per
/// sample in data order.
pub fn feature_matrix(state: &EncoderState, data: &WindowData) -> Result<Array2<f64>> {
    let n = data.len();
    let d = state.config.feature_dim;
    let idx: Vec<usize> = (0..n).collect();
    let mut out = Array2::zeros((n, d));
    for chunk in idx.chunks(4) {
        let x = data.batch(chunk);
        let (feats, _) = state.forward_eval_batch(&x)?;
        for (row, &i) in chunk.iter().enumerate() {
            for j in 0..d {
                out[(i, j)] = feats[(row, j)];
            }
        }
    }
    Ok(out)
}

/// Trains one window's encoder from scratch under plain binary
/// cross-entropy and returns the frozen best-validation-loss checkpoint
/// with its log.
pub fn train_supervised(
    window: &str,
    stacks: &[WindowedStack],
    split: &DatasetSplit,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(EncoderState, TrainingLog)> {
    cfg.validate()?;
    let train = window_data(stacks, split, Partition::Train, window)?;
    let val = window_data(stacks, split, Partition::Val, window)?;
    let state = build_encoder(enc_cfg, window, derive_seed(cfg.seed, "init", window))?;
    let spec = RunSpec {
        train: &train,
        val: &val,
        teacher_train: None,
        teacher_val: None,
        alpha: 1.0,
        beta: 0.0,
    };
    let (mut best, log) = run_training(state, &spec, cfg, window)?;
    best.provenance = Provenance::Supervised;
    best.freeze();
    Ok((best, log))
}

/// Trains a student window against a frozen teacher: the combined objective
/// adds β-weighted mean squared feature alignment between the student's
/// pooled features and the teacher's (precomputed on the teacher's own
/// window of the same patients).
pub fn train_distilled(
    student_window: &str,
    teacher: &EncoderState,
    stacks: &[WindowedStack],
    split: &DatasetSplit,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(EncoderState, TrainingLog)> {
    cfg.validate()?;
    if teacher.trainable {
        return Err(XwdError::TeacherNotFrozen(teacher.window_name.clone()));
    }
    if teacher.config.feature_dim != enc_cfg.feature_dim {
        return Err(XwdError::DimensionMismatch(format!(
            "teacher features have dim {}, student expects {}",
            teacher.config.feature_dim, enc_cfg.feature_dim
        )));
    }
    let train = window_data(stacks, split, Partition::Train, student_window)?;
    let val = window_data(stacks, split, Partition::Val, student_window)?;
    let teacher_train_data = window_data(stacks, split, Partition::Train, &teacher.window_name)?;
    let teacher_val_data = window_data(stacks, split, Partition::Val, &teacher.window_name)?;
    let teacher_train = feature_matrix(teacher, &teacher_train_data)?;
    let teacher_val = feature_matrix(teacher, &teacher_val_data)?;

    let state = build_encoder(
        enc_cfg,
        student_window,
        derive_seed(cfg.seed, "init", student_window),
    )?;
    let spec = RunSpec {
        train: &train,
        val: &val,
        teacher_train: Some(&teacher_train),
        teacher_val: Some(&teacher_val),
        alpha: cfg.alpha,
        beta: cfg.beta,
    };
    let (mut best, log) = run_training(state, &spec, cfg, student_window)?;
    best.provenance = Provenance::Distilled {
        teacher_window: teacher.window_name.clone(),
    };
    best.freeze();
    Ok((best, log))
}

/// The teacher choice and its evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSelection {
    pub teacher_window: String,
    /// Validation AUC of every candidate window.
    pub val_auc: BTreeMap<String, f64>,
    /// The remaining windows, in canonical order.
    pub student_windows: Vec<String>,
}

/// Picks the teacher as the window with the highest validation AUC; exact
/// ties go to the earliest window in the set's canonical order.
pub fn select_teacher(
    val_metrics: &BTreeMap<String, f64>,
    set: &WindowSet,
) -> Result<TeacherSelection> {
    if val_metrics.is_empty() {
        return Err(XwdError::EmptyInput("teacher selection metrics"));
    }
    if val_metrics.len() < 2 {
        return Err(XwdError::EmptyInput(
            "teacher selection needs at least two windows",
        ));
    }
    for (name, auc) in val_metrics {
        set.index_of(name)?;
        if !auc.is_finite() {
            return Err(XwdError::NonFiniteInput {
                context: "teacher selection metrics",
            });
        }
    }
    let names = set.names();
    for name in &names {
        if !val_metrics.contains_key(name) {
            return Err(XwdError::MissingWindowModel(name.clone()));
        }
    }

    let mut teacher: Option<(&str, f64)> = None;
    for name in &names {
        let auc = val_metrics[name];
        if teacher.is_none_or(|(_, best)| auc > best) {
            teacher = Some((name, auc));
        }
    }
    let (teacher_window, _) = teacher.expect("checked nonempty");
    Ok(TeacherSelection {
        teacher_window: teacher_window.to_string(),
        val_auc: val_metrics.clone(),
        student_windows: names
            .iter()
            .filter(|n| n.as_str() != teacher_window)
            .cloned()
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::batch_from_volumes;
    use crate::windowing::Window;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Builds a small synthetic cohort: two "windows" whose arrays are the
    /// same underlying pattern viewed with different offsets, labels encoded
    /// as a mean shift so the task is learnable.
    fn toy_stacks(n: usize, shape: (usize, usize, usize), seed: u64) -> Vec<WindowedStack> {
        let mut rng = crate::seed::rng_from(seed);
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let shift = if label == 1 { 0.6 } else { -0.6 };
                let base: Array3<f32> = Array3::from_shape_fn(shape, |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * 0.5 + shift) as f32
                });
                let mut arrays = std::collections::BTreeMap::new();
                arrays.insert("lung".to_string(), base.clone());
                arrays.insert("mediastinal".to_string(), base.mapv(|v| 0.8 * v + 0.1));
                WindowedStack {
                    patient_id: format!("p{i:03}"),
                    label,
                    arrays,
                }
            })
            .collect()
    }

    fn toy_split(n_train: usize, n_val: usize) -> DatasetSplit {
        DatasetSplit {
            train: (0..n_train).map(|i| format!("p{i:03}")).collect(),
            val: (n_train..n_train + n_val).map(|i| format!("p{i:03}")).collect(),
            test: vec![],
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            epochs: 3,
            batch_size: 3,
            early_stop_patience: 10,
            alpha: 0.5,
            beta: 0.5,
            seed: 7,
        }
    }

    #[test]
    fn config_validation_rejects_bad_weights() {
        let mut cfg = TrainConfig::default();
        cfg.alpha = 0.7;
        assert!(matches!(cfg.validate(), Err(XwdError::ConfigInvalid(_))));
        cfg.alpha = -0.1;
        cfg.beta = 1.1;
        assert!(matches!(cfg.validate(), Err(XwdError::ConfigInvalid(_))));
        cfg = TrainConfig::default();
        cfg.epochs = 0;
        assert!(matches!(cfg.validate(), Err(XwdError::ConfigInvalid(_))));
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn supervised_training_learns_a_separable_one_voxel_task() {
        // Scalar inputs with a margin around zero; a closed-form logistic
        // fit on the same scalars reaches near-zero loss, so the network
        // should too.
        let mut rng = crate::seed::rng_from(99);
        let n = 24;
        let stacks: Vec<WindowedStack> = (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let v: f32 = if label == 1 {
                    1.0 + rng.random_range(-0.2..0.2)
                } else {
                    -1.0 + rng.random_range(-0.2..0.2)
                };
                let mut arrays = std::collections::BTreeMap::new();
                arrays.insert("lung".to_string(), Array3::from_elem((1, 1, 1), v));
                WindowedStack {
                    patient_id: format!("p{i:03}"),
                    label,
                    arrays,
                }
            })
            .collect();
        let split = toy_split(16, 8);
        let enc_cfg = EncoderConfig {
            feature_dim: 4,
            stage_channels: vec![4],
            blocks_per_stage: vec![1],
            input_shape: (1, 1, 1),
            se_reduction: 4,
        };
        let cfg = TrainConfig {
            lr: 0.05,
            epochs: 40,
            batch_size: 4,
            early_stop_patience: 40,
            alpha: 1.0,
            beta: 0.0,
            seed: 5,
        };
        let (state, log) = train_supervised("lung", &stacks, &split, &enc_cfg, &cfg).unwrap();
        let best_bce = log
            .records
            .iter()
            .map(|r| r.train_cls)
            .fold(f64::INFINITY, f64::min);
        assert!(best_bce < 0.05, "train BCE only reached {best_bce}");

        // Closed-form comparison: a logistic fit on the raw scalars is
        // near-separable, so its loss bounds what the network can reach.
        let xs: Vec<Vec<f64>> = split
            .train
            .iter()
            .map(|id| {
                let s = stacks.iter().find(|s| &s.patient_id == id).unwrap();
                vec![s.arrays["lung"][(0, 0, 0)] as f64]
            })
            .collect();
        let ys: Vec<u8> = split
            .train
            .iter()
            .map(|id| stacks.iter().find(|s| &s.patient_id == id).unwrap().label)
            .collect();
        let fit = crate::ensemble::fit_logistic(&xs, &ys, 1e-6, 200).unwrap();
        let mut logistic_bce = 0.0;
        for (x, &y) in xs.iter().zip(&ys) {
            let z = fit.bias + fit.weights[0] * x[0];
            logistic_bce += bce_from_logit(z, y as f64);
        }
        logistic_bce /= ys.len() as f64;
        assert!(logistic_bce < 0.05, "logistic reference reached {logistic_bce}");

        // The returned checkpoint is frozen and supervised.
        assert!(!state.trainable);
        assert_eq!(state.provenance, Provenance::Supervised);
        assert_eq!(log.stopped_epoch, log.records.len());
    }

    #[test]
    fn early_stopping_halts_on_a_signal_free_task() {
        // Labels carry no signal (zero mean shift), so validation loss stops
        // improving quickly and the patience rule must fire.
        let mut rng = crate::seed::rng_from(3);
        let stacks: Vec<WindowedStack> = (0..12)
            .map(|i| {
                let base: Array3<f32> = Array3::from_shape_fn((2, 6, 6), |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z as f32 * 0.5
                });
                let mut arrays = std::collections::BTreeMap::new();
                arrays.insert("lung".to_string(), base);
                WindowedStack {
                    patient_id: format!("p{i:03}"),
                    label: (i % 2) as u8,
                    arrays,
                }
            })
            .collect();
        let split = toy_split(8, 4);
        let enc_cfg = EncoderConfig::grad_check();
        let cfg = TrainConfig {
            lr: 0.01,
            epochs: 40,
            batch_size: 3,
            early_stop_patience: 3,
            alpha: 1.0,
            beta: 0.0,
            seed: 11,
        };
        let (_, log) = train_supervised("lung", &stacks, &split, &enc_cfg, &cfg).unwrap();
        assert!(
            log.stopped_epoch < cfg.epochs,
            "expected an early stop, ran all {} epochs",
            log.stopped_epoch
        );
        assert_eq!(log.records.len(), log.stopped_epoch);
        // When the patience rule fires, the best epoch sits exactly
        // `patience` epochs before the stop (the counter resets on every
        // improvement), and no epoch beats the best by more than the
        // strict-improvement tolerance.
        assert_eq!(log.best_epoch, log.stopped_epoch - cfg.early_stop_patience);
        let best_loss = log.records[log.best_epoch - 1].val_loss;
        for r in &log.records {
            assert!(best_loss <= r.val_loss + 1e-6, "epoch {} beat the best", r.epoch);
        }
    }

    #[test]
    fn returned_checkpoint_has_the_best_validation_loss() {
        let stacks = toy_stacks(14, (2, 6, 6), 13);
        let split = toy_split(10, 4);
        let enc_cfg = EncoderConfig::grad_check();
        let cfg = TrainConfig {
            lr: 0.02,
            epochs: 6,
            batch_size: 3,
            early_stop_patience: 10,
            alpha: 1.0,
            beta: 0.0,
            seed: 2,
        };
        let (state, log) = train_supervised("lung", &stacks, &split, &enc_cfg, &cfg).unwrap();
        let best = log.records.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        let best_rec = log.records.iter().find(|r| r.val_loss == best).unwrap();
        assert_eq!(best_rec.epoch, log.best_epoch);

        // Recompute the returned state's validation loss; it must equal the
        // best epoch's log entry (the checkpoint restored is that epoch's).
        let val = window_data(&stacks, &split, Partition::Val, "lung").unwrap();
        let idx: Vec<usize> = (0..val.len()).collect();
        let x = val.batch(&idx);
        let (_, logits) = state.forward_eval_batch(&x).unwrap();
        let mut loss = 0.0;
        for (n, z) in logits.iter().enumerate() {
            loss += bce_from_logit(*z, val.labels[n] as f64);
        }
        loss /= val.len() as f64;
        assert!(
            (loss - best).abs() < 1e-9,
            "recomputed {loss} vs logged best {best}"
        );
    }

    #[test]
    fn training_is_deterministic_across_runs() {
        let stacks = toy_stacks(12, (2, 6, 6), 17);
        let split = toy_split(8, 4);
        let enc_cfg = EncoderConfig::grad_check();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            ..small_cfg()
        };
        let cfg = TrainConfig { alpha: 1.0, beta: 0.0, ..cfg };
        let (a, log_a) = train_supervised("lung", &stacks, &split, &enc_cfg, &cfg).unwrap();
        let (b, log_b) = train_supervised("lung", &stacks, &split, &enc_cfg, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(strip_wall(&log_a), strip_wall(&log_b));
    }

    #[test]
    fn distillation_with_zero_beta_reproduces_the_supervised_trajectory() {
        let stacks = toy_stacks(12, (2, 6, 6), 29);
        let split = toy_split(8, 4);
        let enc_cfg = EncoderConfig::grad_check();
        let sup_cfg = TrainConfig {
            lr: 1e-3,
            epochs: 3,
            batch_size: 3,
            early_stop_patience: 10,
            alpha: 1.0,
            beta: 0.0,
            seed: 7,
        };
        let (sup, sup_log) = train_supervised("lung", &stacks, &split, &enc_cfg, &sup_cfg).unwrap();
        let (teacher, _) =
            train_supervised("mediastinal", &stacks, &split, &enc_cfg, &sup_cfg).unwrap();
        let (dis, dis_log) =
            train_distilled("lung", &teacher, &stacks, &split, &enc_cfg, &sup_cfg).unwrap();

        // Bit-identical parameters and logs (wall time aside); only the
        // provenance stamp differs.
        let mut sup_params = Vec::new();
        sup.visit_params(&mut |name, p| sup_params.push((name, p.val.clone())));
        let mut dis_params = Vec::new();
        dis.visit_params(&mut |name, p| dis_params.push((name, p.val.clone())));
        assert_eq!(sup_params, dis_params);
        assert_eq!(strip_wall(&sup_log), strip_wall(&dis_log));
        assert_eq!(
            dis.provenance,
            Provenance::Distilled {
                teacher_window: "mediastinal".to_string()
            }
        );
    }

    #[test]
    fn distillation_requires_a_frozen_teacher_and_leaves_it_untouched() {
        let stacks = toy_stacks(12, (2, 6, 6), 31);
        let split = toy_split(8, 4);
        let enc_cfg = EncoderConfig::grad_check();
        let cfg = small_cfg();

        let mut teacher = build_encoder(&enc_cfg, "mediastinal", 1).unwrap();
        let err =
            train_distilled("lung", &teacher, &stacks, &split, &enc_cfg, &cfg).unwrap_err();
        assert!(matches!(err, XwdError::TeacherNotFrozen(_)));

        teacher.freeze();
        let before = crate::model::checkpoint::checkpoint_bytes(&teacher).unwrap();
        let (student, log) =
            train_distilled("lung", &teacher, &stacks, &split, &enc_cfg, &cfg).unwrap();
        let after = crate::model::checkpoint::checkpoint_bytes(&teacher).unwrap();
        assert_eq!(before, after, "teacher bytes changed during distillation");
        assert!(!student.trainable);
        assert!(log.records.iter().all(|r| r.train_kd >= 0.0));
    }

    #[test]
    fn loss_decomposition_holds_at_every_logged_epoch() {
        let stacks = toy_stacks(12, (2, 6, 6), 37);
        let split = toy_split(8, 4);
        let enc_cfg = EncoderConfig::grad_check();
        let cfg = small_cfg();
        let (teacher, _) = train_supervised(
            "mediastinal",
            &stacks,
            &split,
            &enc_cfg,
            &TrainConfig { alpha: 1.0, beta: 0.0, ..small_cfg() },
        )
        .unwrap();
        let (_, log) = train_distilled("lung", &teacher, &stacks, &split, &enc_cfg, &cfg).unwrap();
        for r in &log.records {
            let resid = r.train_total - log.alpha * r.train_cls - log.beta * r.train_kd;
            assert!(resid.abs() < 1e-7, "epoch {}: residual {resid}", r.epoch);
            assert!(r.train_kd > 0.0, "distinct windows should have nonzero alignment loss");
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_divergence() {
        let stacks = toy_stacks(8, (2, 6, 6), 41);
        let split = toy_split(6, 2);
        let enc_cfg = EncoderConfig::grad_check();
        let train = window_data(&stacks, &split, Partition::Train, "lung").unwrap();
        let val = window_data(&stacks, &split, Partition::Val, "lung").unwrap();
        let mut state = build_encoder(&enc_cfg, "lung", 1).unwrap();
        state.head.w.val[0] = f64::INFINITY;
        let spec = RunSpec {
            train: &train,
            val: &val,
            teacher_train: None,
            teacher_val: None,
            alpha: 1.0,
            beta: 0.0,
        };
        let err = run_training(state, &spec, &small_cfg(), "lung").unwrap_err();
        assert!(matches!(err, XwdError::Divergence { epoch: 1 }));
    }

    #[test]
    fn gradient_of_combined_loss_matches_central_differences() {
        // Analytic gradient of α·BCE + β·KD on a ≤ 10k-parameter encoder
        // versus central finite differences over every parameter.
        let enc_cfg = EncoderConfig::grad_check();
        let mut state = build_encoder(&enc_cfg, "lung", 12).unwrap();
        assert!(state.n_params() <= 10_000);

        let mut rng = crate::seed::rng_from(6);
        let vols: Vec<Array3<f32>> = (0..2)
            .map(|_| {
                Array3::from_shape_fn((2, 6, 6), |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z as f32
                })
            })
            .collect();
        let x = batch_from_volumes(&vols);
        let y = [1.0, 0.0];
        let d = enc_cfg.feature_dim;
        let teacher: Array2<f64> = Array2::from_shape_fn((2, d), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.5 * z
        });
        let (alpha, beta) = (0.5, 0.5);

        // Analytic pass, mirroring the training loop's gradient assembly.
        state.zero_grads();
        let (feats, cache) = state.encoder.forward_train(&x, false);
        let logits = state.head.forward(&feats);
        let b = y.len() as f64;
        let gz: Vec<f64> = logits
            .iter()
            .zip(&y)
            .map(|(z, y)| alpha * bce_grad(*z, *y) / b)
            .collect();
        let mut g_feats = state.head.backward(&feats, &gz);
        for n in 0..2 {
            for j in 0..d {
                g_feats[(n, j)] += beta * 2.0 * (feats[(n, j)] - teacher[(n, j)]) / (d as f64 * b);
            }
        }
        state.encoder.backward(&cache, &g_feats);

        let mut names: Vec<(String, usize)> = Vec::new();
        state.visit_params(&mut |name, p| names.push((name, p.len())));
        let mut analytic = Vec::new();
        state.visit_params(&mut |_, p| analytic.extend_from_slice(&p.grad));

        let loss_of = |state: &mut EncoderState| -> f64 {
            let (feats, _) = state.encoder.forward_train(&x, false);
            let logits = state.head.forward(&feats);
            let mut cls = 0.0;
            let mut kd = 0.0;
            for n in 0..2 {
                cls += bce_from_logit(logits[n], y[n]);
                for j in 0..d {
                    let diff = feats[(n, j)] - teacher[(n, j)];
                    kd += diff * diff / d as f64;
                }
            }
            alpha * cls / b + beta * kd / b
        };

        let mut fd = Vec::with_capacity(analytic.len());
        for (name, len) in &names {
            for i in 0..*len {
                let orig = get_param(&state, name, i);
                let eps = 1e-5 * orig.abs().max(1.0);
                set_param(&mut state, name, i, orig + eps);
                let plus = loss_of(&mut state);
                set_param(&mut state, name, i, orig - eps);
                let minus = loss_of(&mut state);
                set_param(&mut state, name, i, orig);
                fd.push((plus - minus) / (2.0 * eps));
            }
        }

        let dot_diff: f64 = analytic
            .iter()
            .zip(&fd)
            .map(|(a, f)| (a - f) * (a - f))
            .sum::<f64>()
            .sqrt();
        let norm = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(fd.iter().map(|f| f * f).sum::<f64>().sqrt());
        assert!(norm > 0.0, "gradient vanished entirely");
        let rel = dot_diff / norm;
        assert!(rel < 1e-3, "relative gradient error {rel}");
    }

    #[test]
    fn teacher_tables_pin_the_published_selections() {
        let diffuse = WindowSet::diffuse();
        let metrics: BTreeMap<String, f64> = [
            ("lung", 0.7835),
            ("mediastinal", 0.8960),
            ("zero", 0.7467),
            ("hrct", 0.7739),
            ("bone", 0.8111),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let sel = select_teacher(&metrics, &diffuse).unwrap();
        assert_eq!(sel.teacher_window, "mediastinal");
        assert_eq!(
            sel.student_windows,
            vec!["lung", "hrct", "zero", "bone"]
        );

        let focal = WindowSet::focal();
        let metrics: BTreeMap<String, f64> = [
            ("pe", 0.8819),
            ("zero", 0.8310),
            ("mediastinal", 0.8173),
            ("hrct", 0.7953),
            ("lung", 0.7952),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let sel = select_teacher(&metrics, &focal).unwrap();
        assert_eq!(sel.teacher_window, "pe");
    }

    #[test]
    fn ties_resolve_to_the_earliest_canonical_window() {
        let set = WindowSet::diffuse();
        let names = set.names();
        let mut metrics: BTreeMap<String, f64> = names
            .iter()
            .map(|n| (n.clone(), 0.5))
            .collect();
        metrics.insert(names[0].clone(), 0.9);
        metrics.insert(names[1].clone(), 0.9);
        let sel = select_teacher(&metrics, &set).unwrap();
        assert_eq!(sel.teacher_window, names[0]);
    }

    #[test]
    fn selection_rejects_empty_short_or_non_finite_metrics() {
        let set = WindowSet::diffuse();
        let empty = BTreeMap::new();
        assert!(matches!(
            select_teacher(&empty, &set),
            Err(XwdError::EmptyInput(_))
        ));

        let single: BTreeMap<String, f64> = [("lung".to_string(), 0.9)].into_iter().collect();
        assert!(matches!(
            select_teacher(&single, &set),
            Err(XwdError::EmptyInput(_))
        ));

        let mut metrics: BTreeMap<String, f64> =
            set.names().into_iter().map(|n| (n, 0.5)).collect();
        metrics.insert("lung".to_string(), f64::NAN);
        assert!(matches!(
            select_teacher(&metrics, &set),
            Err(XwdError::NonFiniteInput { .. })
        ));

        let two = WindowSet::new(vec![
            Window::new("a", 100.0, 0.0).unwrap(),
            Window::new("b", 100.0, 50.0).unwrap(),
        ])
        .unwrap();
        let mut metrics: BTreeMap<String, f64> = BTreeMap::new();
        metrics.insert("a".to_string(), 0.6);
        metrics.insert("c".to_string(), 0.7);
        assert!(matches!(
            select_teacher(&metrics, &two),
            Err(XwdError::UnknownWindow(_))
        ));
        let mut metrics: BTreeMap<String, f64> = BTreeMap::new();
        metrics.insert("a".to_string(), 0.6);
        metrics.insert("b".to_string(), f64::INFINITY);
        assert!(matches!(
            select_teacher(&metrics, &two),
            Err(XwdError::NonFiniteInput { .. })
        ));
    }

    proptest! {
        #[test]
        fn selection_is_invariant_under_increasing_transforms(
            raw in proptest::collection::vec(0u32..=64, 5),
        ) {
            let set = WindowSet::diffuse();
            let names = set.names();
            // Dyadic grid values keep the affine transform exact, so ties
            // are preserved bit-for-bit.
            let metrics: BTreeMap<String, f64> = names
                .iter()
                .zip(&raw)
                .map(|(n, &r)| (n.clone(), r as f64 / 64.0))
                .collect();
            let transformed: BTreeMap<String, f64> = metrics
                .iter()
                .map(|(k, v)| (k.clone(), 0.5 * v + 0.25))
                .collect();
            let a = select_teacher(&metrics, &set)?;
            let b = select_teacher(&transformed, &set)?;
            prop_assert_eq!(a.teacher_window, b.teacher_window);
        }
    }

    fn strip_wall(log: &TrainingLog) -> TrainingLog {
        let mut log = log.clone();
        for r in &mut log.records {
            r.wall_ms = 0;
        }
        log
    }

    fn get_param(state: &EncoderState, name: &str, i: usize) -> f64 {
        let mut out = None;
        state.visit_params(&mut |n, p| {
            if n == name {
                out = Some(p.val[i]);
            }
        });
        out.expect("parameter exists")
    }

    fn set_param(state: &mut EncoderState, name: &str, i: usize, v: f64) {
        state.visit_params_mut(&mut |n, p| {
            if n == name {
                p.val[i] = v;
            }
        });
    }
}
