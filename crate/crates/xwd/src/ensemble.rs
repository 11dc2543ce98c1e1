//! Two-level stacking of per-window classifiers.
//!
//! Frozen base models emit one probability per window; a logistic
//! meta-learner maps that K-vector to the final probability. The
//! meta-learner is fitted exclusively on validation-set probabilities —
//! enforced structurally by accepting only a validation partition handle —
//! with an L2 penalty on the weights (never the bias) so the optimum is
//! unique even when the validation probabilities are perfectly separable.
//!
//! Fitting is damped Newton on the penalized log-loss: the normal system is
//! solved by Gaussian elimination with partial pivoting, steps are halved
//! until the objective decreases, and iteration ends at gradient norm
//! < 1e-8 or an iteration cap, returning the best iterate seen.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::XwdError;
use crate::ingestion::{Partition, PartitionView};
use crate::model::{sigmoid, EncoderState, Provenance};
use crate::train::losses::bce_from_logit;
use crate::windowing::{WindowSet, WindowedStack};
use crate::Result;

/// Default L2 strength of the meta-learner fit.
pub const DEFAULT_L2: f64 = 1.0;

/// Newton iteration cap for [`fit_logistic`].
pub const MAX_NEWTON_ITERS: usize = 100;

const GRAD_TOL: f64 = 1e-8;

/// Weights and bias of a plain logistic regression fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Fits `σ(⟨w,x⟩ + b)` to 0/1 labels by minimizing
/// `Σ BCE + (l2/2)·‖w‖²` (bias unpenalized) with damped Newton steps.
///
/// Deterministic given inputs. Single-class label vectors are permitted —
/// the penalty keeps the optimum finite; callers that need both classes
/// (the meta-learner) check separately.
pub fn fit_logistic(
    xs: &[Vec<f64>],
    ys: &[u8],
    l2: f64,
    max_iter: usize,
) -> Result<LogisticFit> {
    if xs.is_empty() {
        return Err(XwdError::EmptyInput("logistic fit needs at least one sample"));
    }
    if xs.len() != ys.len() {
        return Err(XwdError::LengthMismatch {
            context: "logistic fit",
            a: xs.len(),
            b: ys.len(),
        });
    }
    let d = xs[0].len();
    if d == 0 {
        return Err(XwdError::EmptyInput("logistic fit needs at least one feature"));
    }
    for row in xs {
        if row.len() != d {
            return Err(XwdError::DimensionMismatch(format!(
                "logistic fit rows must share one dimension, got {} and {}",
                d,
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(XwdError::NonFiniteInput { context: "logistic fit features" });
        }
    }
    if !(l2.is_finite() && l2 >= 0.0) {
        return Err(XwdError::ConfigInvalid(format!(
            "l2 strength must be finite and nonnegative, got {l2}"
        )));
    }

    // θ = [w₀..w_{d−1}, b].
    let objective = |theta: &[f64]| -> f64 {
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let z = theta[d] + x.iter().zip(theta).map(|(xi, wi)| xi * wi).sum::<f64>();
            loss += bce_from_logit(z, y as f64);
        }
        loss + 0.5 * l2 * theta[..d].iter().map(|w| w * w).sum::<f64>()
    };

    let mut theta = vec![0.0; d + 1];
    let mut best = (objective(&theta), theta.clone());

    for _ in 0..max_iter {
        // Gradient and Hessian of the penalized loss.
        let mut grad = vec![0.0; d + 1];
        let mut hess = vec![vec![0.0; d + 1]; d + 1];
        for (x, &y) in xs.iter().zip(ys) {
            let z = theta[d] + x.iter().zip(&theta).map(|(xi, wi)| xi * wi).sum::<f64>();
            let p = sigmoid(z);
            let r = p - y as f64;
            let s = p * (1.0 - p);
            for i in 0..d {
                grad[i] += r * x[i];
                for j in 0..d {
                    hess[i][j] += s * x[i] * x[j];
                }
                hess[i][d] += s * x[i];
                hess[d][i] += s * x[i];
            }
            grad[d] += r;
            hess[d][d] += s;
        }
        for i in 0..d {
            grad[i] += l2 * theta[i];
            hess[i][i] += l2;
        }

        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let cur = objective(&theta);
        if cur < best.0 {
            best = (cur, theta.clone());
        }
        if gnorm < GRAD_TOL {
            return Ok(split_theta(best.1, d));
        }

        let delta = solve_linear(hess, grad)?;
        // Halve the step until the objective decreases.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = theta
                .iter()
                .zip(&delta)
                .map(|(t, dl)| t - step * dl)
                .collect();
            if objective(&cand) < cur {
                theta = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break; // numerical floor: no descent direction left
        }
    }

    let final_obj = objective(&theta);
    if final_obj < best.0 {
        best = (final_obj, theta);
    }
    Ok(split_theta(best.1, d))
}

fn split_theta(mut theta: Vec<f64>, d: usize) -> LogisticFit {
    let bias = theta[d];
    theta.truncate(d);
    LogisticFit { weights: theta, bias }
}

/// Gaussian elimination with partial pivoting.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        if a[piv][col].abs() < 1e-300 {
            return Err(XwdError::MetaFitFailed(
                "singular normal system in logistic fit".into(),
            ));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for j in i + 1..n {
            s -= a[i][j] * x[j];
        }
        x[i] = s / a[i][i];
    }
    Ok(x)
}

/// The fitted stacking head: one weight per window plus a bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaLearner {
    /// Canonical window order of the probability vectors this learner reads.
    pub window_order: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2_strength: f64,
}

/// σ(⟨weights, p⟩ + bias) for one probability vector.
pub fn predict_ensemble(meta: &MetaLearner, p: &[f64]) -> Result<f64> {
    if p.len() != meta.weights.len() {
        return Err(XwdError::DimensionMismatch(format!(
            "ensemble expects {} probabilities, got {}",
            meta.weights.len(),
            p.len()
        )));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(XwdError::NonFiniteInput { context: "ensemble probabilities" });
    }
    let z = meta.bias + meta.weights.iter().zip(p).map(|(w, p)| w * p).sum::<f64>();
    Ok(sigmoid(z))
}

/// Forward-propagates every frozen base model over `items`: row i holds
/// patient i's probabilities in the window set's canonical order.
pub fn collect_probabilities(
    models: &BTreeMap<String, EncoderState>,
    set: &WindowSet,
    items: &[&WindowedStack],
) -> Result<Array2<f64>> {
    if items.is_empty() {
        return Err(XwdError::EmptyInput("probability collection needs at least one patient"));
    }
    let names = set.names();
    let mut out = Array2::zeros((items.len(), names.len()));
    for (k, name) in names.iter().enumerate() {
        let model = models
            .get(name)
            .ok_or_else(|| XwdError::MissingWindowModel(name.clone()))?;
        for (i, stack) in items.iter().enumerate() {
            out[(i, k)] = model.predict_probability(stack.get(name)?)?;
        }
    }
    Ok(out)
}

/// Fits the meta-learner on validation probabilities.
///
/// The partition handle must be the validation partition — any other kind
/// is a leakage error, so fitting on train or test data is structurally
/// impossible.
pub fn fit_meta(
    probs: &Array2<f64>,
    val: &PartitionView<'_, WindowedStack>,
    set: &WindowSet,
    l2_strength: f64,
) -> Result<MetaLearner> {
    if val.kind != Partition::Val {
        return Err(XwdError::LeakageGuard(format!(
            "meta-learner must fit on the validation partition, got {}",
            val.kind
        )));
    }
    let (n, k) = probs.dim();
    if n != val.items.len() {
        return Err(XwdError::LengthMismatch {
            context: "meta-learner fit",
            a: n,
            b: val.items.len(),
        });
    }
    if k != set.len() {
        return Err(XwdError::DimensionMismatch(format!(
            "probability matrix has {k} columns for a {}-window set",
            set.len()
        )));
    }
    let labels: Vec<u8> = val.items.iter().map(|s| s.label).collect();
    if labels.iter().all(|&y| y == 0) || labels.iter().all(|&y| y == 1) {
        return Err(XwdError::DegenerateLabels { context: "meta-learner fit" });
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| probs.row(i).to_vec()).collect();
    let fit = fit_logistic(&rows, &labels, l2_strength, MAX_NEWTON_ITERS)?;
    Ok(MetaLearner {
        window_order: set.names(),
        weights: fit.weights,
        bias: fit.bias,
        l2_strength,
    })
}

/// A frozen end-to-end classifier: one base model per window plus the
/// fitted meta-learner.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub models: BTreeMap<String, EncoderState>,
    pub meta: MetaLearner,
}

impl Pipeline {
    pub fn windows(&self) -> &[String] {
        &self.meta.window_order
    }

    /// Per-window probabilities of one preprocessed stack, canonical order.
    pub fn probability_vector(&self, stack: &WindowedStack) -> Result<Vec<f64>> {
        let mut p = Vec::with_capacity(self.meta.window_order.len());
        for name in &self.meta.window_order {
            if !stack.arrays.contains_key(name) {
                return Err(XwdError::WindowSetMismatch(format!(
                    "stack for patient '{}' lacks window '{name}'",
                    stack.patient_id
                )));
            }
            let model = self
                .models
                .get(name)
                .ok_or_else(|| XwdError::MissingWindowModel(name.clone()))?;
            p.push(model.predict_probability(stack.get(name)?)?);
        }
        Ok(p)
    }

    /// Final ensemble probability of one preprocessed stack.
    pub fn predict(&self, stack: &WindowedStack) -> Result<f64> {
        predict_ensemble(&self.meta, &self.probability_vector(stack)?)
    }
}

/// Assembles and fits the two pipelines compared throughout: one stacking
/// the K supervised models, one stacking the teacher plus its K−1 distilled
/// students. Both share the window set, validation data, and meta-learner
/// protocol; only base-model provenance differs.
pub fn build_pipelines(
    teacher: &EncoderState,
    supervised: &[EncoderState],
    distilled: &[EncoderState],
    set: &WindowSet,
    val: &PartitionView<'_, WindowedStack>,
    l2_strength: f64,
) -> Result<(Pipeline, Pipeline)> {
    let names = set.names();

    let mut sup_models = BTreeMap::new();
    for model in supervised {
        require_frozen(model)?;
        if model.provenance != Provenance::Supervised {
            return Err(XwdError::ProvenanceMismatch(format!(
                "supervised pipeline got a {} model for window '{}'",
                provenance_name(&model.provenance),
                model.window_name
            )));
        }
        sup_models.insert(model.window_name.clone(), model.clone());
    }

    require_frozen(teacher)?;
    if teacher.provenance != Provenance::Supervised {
        return Err(XwdError::ProvenanceMismatch(format!(
            "teacher for window '{}' must be a supervised model, got {}",
            teacher.window_name,
            provenance_name(&teacher.provenance)
        )));
    }
    set.index_of(&teacher.window_name)?;
    let mut dis_models = BTreeMap::new();
    dis_models.insert(teacher.window_name.clone(), teacher.clone());
    for model in distilled {
        require_frozen(model)?;
        match &model.provenance {
            Provenance::Distilled { teacher_window } if *teacher_window == teacher.window_name => {}
            other => {
                return Err(XwdError::ProvenanceMismatch(format!(
                    "distilled pipeline got a {} model for window '{}' (teacher is '{}')",
                    provenance_name(other),
                    model.window_name,
                    teacher.window_name
                )));
            }
        }
        dis_models.insert(model.window_name.clone(), model.clone());
    }

    for name in &names {
        if !sup_models.contains_key(name) {
            return Err(XwdError::MissingWindowModel(format!("{name} (supervised)")));
        }
        if !dis_models.contains_key(name) {
            return Err(XwdError::MissingWindowModel(format!("{name} (distilled)")));
        }
    }

    let sup_probs = collect_probabilities(&sup_models, set, &val.items)?;
    let sup_meta = fit_meta(&sup_probs, val, set, l2_strength)?;
    let dis_probs = collect_probabilities(&dis_models, set, &val.items)?;
    let dis_meta = fit_meta(&dis_probs, val, set, l2_strength)?;

    Ok((
        Pipeline { models: sup_models, meta: sup_meta },
        Pipeline { models: dis_models, meta: dis_meta },
    ))
}

fn require_frozen(model: &EncoderState) -> Result<()> {
    if model.trainable {
        return Err(XwdError::ProvenanceMismatch(format!(
            "model for window '{}' is still trainable; pipelines take frozen models only",
            model.window_name
        )));
    }
    Ok(())
}

fn provenance_name(p: &Provenance) -> &'static str {
    match p {
        Provenance::Initialized => "freshly initialized",
        Provenance::Supervised => "supervised",
        Provenance::Distilled { .. } => "distilled",
    }
}
