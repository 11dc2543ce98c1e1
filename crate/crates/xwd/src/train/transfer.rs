//! Cross-task transfer protocols for a frozen pipeline.
//!
//! `transfer_direct` is pure inference: the pipeline is applied to a target
//! cohort exactly as trained. `transfer_finetune_heads` additionally refits
//! each window's classification head — and nothing else — on the target's
//! training split: the frozen encoder features are extracted once and a
//! regularized logistic regression replaces the head's weights and bias,
//! which is the converged optimum of head-only BCE training. Encoders and
//! the meta-learner are carried over untouched.
//!
//! Target stacks must be preprocessed identically to the source pipeline's
//! training data (same window set, normalization from the stored per-window
//! statistics); a stack lacking one of the pipeline's windows is a
//! `WindowSetMismatch`.

use crate::analysis::{evaluate, MetricsReport};
use crate::ensemble::{fit_logistic, Pipeline, DEFAULT_L2, MAX_NEWTON_ITERS};
use crate::error::XwdError;
use crate::windowing::WindowedStack;
use crate::Result;

use super::TrainConfig;

/// Applies a frozen pipeline to a target cohort without any parameter
/// update and evaluates the predictions.
pub fn transfer_direct(
    pipeline: &Pipeline,
    target: &[WindowedStack],
    n_bootstrap: usize,
    seed: u64,
) -> Result<MetricsReport> {
    if target.is_empty() {
        return Err(XwdError::EmptyInput("transfer target is empty"));
    }
    let mut probs = Vec::with_capacity(target.len());
    let mut labels = Vec::with_capacity(target.len());
    for stack in target {
        probs.push(pipeline.predict(stack)?);
        labels.push(stack.label);
    }
    evaluate(&probs, &labels, n_bootstrap, seed)
}

/// Refits every window's classification head on the target's train split
/// (frozen features, logistic regression) and evaluates the adapted
/// pipeline on the target's validation split.
///
/// Encoder parameters and the meta-learner are byte-identical before and
/// after; only head weights and biases change.
pub fn transfer_finetune_heads(
    pipeline: &Pipeline,
    target_train: &[WindowedStack],
    target_val: &[WindowedStack],
    cfg: &TrainConfig,
    n_bootstrap: usize,
) -> Result<(Pipeline, MetricsReport)> {
    cfg.validate()?;
    if target_train.is_empty() || target_val.is_empty() {
        return Err(XwdError::EmptyInput("transfer requires nonempty train and val targets"));
    }

    let mut adapted = pipeline.clone();
    let labels: Vec<u8> = target_train.iter().map(|s| s.label).collect();
    for name in &pipeline.meta.window_order {
        let model = adapted
            .models
            .get_mut(name)
            .ok_or_else(|| XwdError::MissingWindowModel(name.clone()))?;
        let mut feats = Vec::with_capacity(target_train.len());
        for stack in target_train {
            if !stack.arrays.contains_key(name) {
                return Err(XwdError::WindowSetMismatch(format!(
                    "target stack for patient '{}' lacks window '{name}'",
                    stack.patient_id
                )));
            }
            feats.push(model.forward_features(stack.get(name)?)?);
        }
        let fit = fit_logistic(&feats, &labels, DEFAULT_L2, MAX_NEWTON_ITERS)?;
        model.head.w.val = fit.weights;
        model.head.b.val[0] = fit.bias;
    }

    let report = transfer_direct(&adapted, target_val, n_bootstrap, cfg.seed)?;
    Ok((adapted, report))
}
