//! Evaluation: ranking and thresholded metrics, bootstrap confidence
//! intervals, paired significance tests, per-sample agreement counts, and
//! gradient-based attention maps.
//!
//! Everything here is a pure function of its inputs; bootstrap resampling
//! derives one child seed per resample so results are independent of
//! evaluation order.

pub mod gradcam;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::seed::{derive_seed, rng_from};
use crate::{Result, XwdError};
use rand::Rng;

pub use gradcam::{grad_cam, AttentionMap};

/// Binary decision rule shared by accuracy, F1, and the agreement analysis.
pub fn predict_at_half(probability: f64) -> bool {
    probability >= 0.5
}

/// Area under the ROC curve via the rank-sum (Mann–Whitney) statistic with
/// half credit for ties: (concordant + 0.5·tied) / (n₊ · n₋).
pub fn compute_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(XwdError::LengthMismatch {
            context: "auc",
            a: scores.len(),
            b: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(XwdError::DegenerateLabels { context: "auc" });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(XwdError::NonFiniteInput { context: "auc" });
    }

    // Average ranks (1-based) with ties sharing their group's mean rank.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share the mean (i + j + 2) / 2.
        let mean_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += mean_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Metrics that can be bootstrapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Auc,
    Accuracy,
    F1,
    Recall,
    Precision,
}

/// Thresholded confusion counts at p = 0.5.
fn confusion(scores: &[f64], labels: &[u8]) -> (usize, usize, usize, usize) {
    let (mut tp, mut fp, mut tn, mut fal_n) = (0, 0, 0, 0);
    for (&s, &y) in scores.iter().zip(labels) {
        match (predict_at_half(s), y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fal_n += 1,
        }
    }
    (tp, fp, tn, fal_n)
}

/// Ratio with the 0/0 → 0 convention used for threshold metrics.
fn safe_ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Point value of one metric on a full score/label set.
pub fn metric_value(metric: Metric, scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (tp, fp, tn, fal_n) = confusion(scores, labels);
    Ok(match metric {
        Metric::Auc => compute_auc(scores, labels)?,
        Metric::Accuracy => (tp + tn) as f64 / scores.len() as f64,
        Metric::Recall => safe_ratio(tp as f64, (tp + fal_n) as f64),
        Metric::Precision => safe_ratio(tp as f64, (tp + fp) as f64),
        Metric::F1 => safe_ratio(2.0 * tp as f64, (2 * tp + fp + fal_n) as f64),
    })
}

/// Percentile with linear interpolation over a sorted sample.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Patient-level bootstrap (2.5th, 97.5th) percentile interval of a metric.
///
/// Each resample draws N patients with replacement from its own derived
/// seed. A resample with a single class is redrawn for AUC (the statistic is
/// undefined there) and evaluated as-is for threshold metrics.
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[u8],
    metric: Metric,
    n_bootstrap: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(XwdError::LengthMismatch {
            context: "bootstrap",
            a: scores.len(),
            b: labels.len(),
        });
    }
    let n = scores.len();
    if n < 2 {
        return Err(XwdError::EmptyInput("bootstrap needs at least two samples"));
    }
    if metric == Metric::Auc {
        // Fail fast when the full set cannot support the statistic at all.
        compute_auc(scores, labels)?;
    }

    let mut values = Vec::with_capacity(n_bootstrap);
    let mut rs = Vec::with_capacity(n);
    let mut rl = Vec::with_capacity(n);
    for i in 0..n_bootstrap {
        let mut rng = rng_from(derive_seed(seed, "bootstrap", &format!("resample:{i:05}")));
        // Redraw until the resample supports the metric (AUC only).
        let value = loop {
            rs.clear();
            rl.clear();
            for _ in 0..n {
                let k = rng.random_range(0..n);
                rs.push(scores[k]);
                rl.push(labels[k]);
            }
            match metric_value(metric, &rs, &rl) {
                Ok(v) => break v,
                Err(XwdError::DegenerateLabels { .. }) if metric == Metric::Auc => continue,
                Err(e) => return Err(e),
            }
        };
        values.push(value);
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((percentile(&values, 2.5), percentile(&values, 97.5)))
}

/// Paired t-test over per-sample score differences.
///
/// Zero-variance differences are decided directly: all-zero differences are
/// maximally insignificant (statistic 0, p = 1), identical nonzero
/// differences maximally significant (infinite-like statistic, p → 0).
pub fn paired_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(XwdError::LengthMismatch {
            context: "paired test",
            a: a.len(),
            b: b.len(),
        });
    }
    if a.is_empty() {
        return Err(XwdError::EmptyInput("paired test"));
    }
    let n = a.len();
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
        / if n > 1 { (n - 1) as f64 } else { 1.0 };

    if var == 0.0 {
        return Ok(if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(mean), 0.0)
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("degrees of freedom are positive here");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok((t, p.clamp(0.0, 1.0)))
}

/// Per-sample agreement between a supervised and a distilled predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VennCounts {
    /// Wrong under supervised, right under distilled.
    pub corrected: usize,
    /// Right under both.
    pub joint_correct: usize,
    /// Right under supervised, wrong under distilled.
    pub new_errors: usize,
    /// Wrong under both.
    pub both_wrong: usize,
}

/// Splits a test set into the four agreement regions of two correctness masks.
pub fn venn_agreement(sup_mask: &[bool], dist_mask: &[bool]) -> Result<VennCounts> {
    if sup_mask.len() != dist_mask.len() {
        return Err(XwdError::LengthMismatch {
            context: "venn agreement",
            a: sup_mask.len(),
            b: dist_mask.len(),
        });
    }
    let mut c = VennCounts {
        corrected: 0,
        joint_correct: 0,
        new_errors: 0,
        both_wrong: 0,
    };
    for (&s, &d) in sup_mask.iter().zip(dist_mask) {
        match (s, d) {
            (false, true) => c.corrected += 1,
            (true, true) => c.joint_correct += 1,
            (true, false) => c.new_errors += 1,
            (false, false) => c.both_wrong += 1,
        }
    }
    Ok(c)
}

/// One metric's point value with its bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricInterval {
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Full evaluation of one predictor on one labeled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: MetricInterval,
    pub f1: MetricInterval,
    pub recall: MetricInterval,
    pub precision: MetricInterval,
    pub auc: MetricInterval,
    pub n_bootstrap: usize,
    pub seed: u64,
    /// Whether each sample is classified correctly at threshold 0.5.
    pub per_sample_correct: Vec<bool>,
}

impl MetricsReport {
    /// Convenience accessor: (value, low, high) per metric.
    pub fn get(&self, metric: Metric) -> MetricInterval {
        match metric {
            Metric::Accuracy => self.accuracy,
            Metric::F1 => self.f1,
            Metric::Recall => self.recall,
            Metric::Precision => self.precision,
            Metric::Auc => self.auc,
        }
    }
}

/// Evaluates probabilities against labels: all five metrics with bootstrap
/// intervals, plus the per-sample correctness mask.
pub fn evaluate(
    probabilities: &[f64],
    labels: &[u8],
    n_bootstrap: usize,
    seed: u64,
) -> Result<MetricsReport> {
    if probabilities.len() != labels.len() {
        return Err(XwdError::LengthMismatch {
            context: "evaluate",
            a: probabilities.len(),
            b: labels.len(),
        });
    }
    let one = |metric: Metric| -> Result<MetricInterval> {
        let value = metric_value(metric, probabilities, labels)?;
        let (lo, hi) = bootstrap_ci(probabilities, labels, metric, n_bootstrap, seed)?;
        // Percentile intervals are widened, if needed, to include the point
        // estimate, keeping the (low ≤ value ≤ high) invariant.
        Ok(MetricInterval {
            value,
            ci_low: lo.min(value),
            ci_high: hi.max(value),
        })
    };
    let per_sample_correct = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| predict_at_half(p) == (y == 1))
        .collect();
    Ok(MetricsReport {
        accuracy: one(Metric::Accuracy)?,
        f1: one(Metric::F1)?,
        recall: one(Metric::Recall)?,
        precision: one(Metric::Precision)?,
        auc: one(Metric::Auc)?,
        n_bootstrap,
        seed,
        per_sample_correct,
    })
}

/// Writes the per-sample CSV companion of a report:
/// `patient_id,label,probability,correct`.
pub fn write_per_sample_csv(
    path: &std::path::Path,
    ids: &[String],
    labels: &[u8],
    probabilities: &[f64],
) -> Result<()> {
    let mut out = String::from("patient_id,label,probability,correct\n");
    for ((id, &y), &p) in ids.iter().zip(labels).zip(probabilities) {
        let correct = predict_at_half(p) == (y == 1);
        out.push_str(&format!("{id},{y},{p:.9},{correct}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_pinned_examples() {
        assert_eq!(compute_auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(compute_auc(&[0.1, 0.2, 0.9, 0.8], &[1, 1, 0, 0]).unwrap(), 0.0);
        // 3 of 4 pos/neg pairs concordant.
        let auc = compute_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert_eq!(auc, 0.75);
        // All-tied scores earn exactly half credit.
        assert_eq!(compute_auc(&[0.5, 0.5, 0.5, 0.5], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(matches!(
            compute_auc(&[0.1, 0.2], &[1, 1]),
            Err(XwdError::DegenerateLabels { .. })
        ));
    }

    #[test]
    fn auc_matches_pairwise_counting_on_random_instances() {
        let mut rng = rng_from(99);
        for _ in 0..300 {
            let n = rng.random_range(2..30);
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..8) as f64) / 8.0)
                .collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            let pos = labels.iter().filter(|&&y| y == 1).count();
            if pos == 0 || pos == n {
                continue;
            }
            let mut credit = 0.0;
            for (i, &yi) in labels.iter().enumerate() {
                if yi != 1 {
                    continue;
                }
                for (j, &yj) in labels.iter().enumerate() {
                    if yj != 0 {
                        continue;
                    }
                    credit += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
            let brute = credit / (pos as f64 * (n - pos) as f64);
            let fast = compute_auc(&scores, &labels).unwrap();
            assert_eq!(fast, brute, "scores={scores:?} labels={labels:?}");
        }
    }

    proptest! {
        #[test]
        fn auc_is_invariant_under_increasing_transforms(
            raw in proptest::collection::vec((0u8..2, -10.0f64..10.0), 4..40)
        ) {
            let labels: Vec<u8> = raw.iter().map(|(y, _)| *y).collect();
            let scores: Vec<f64> = raw.iter().map(|(_, s)| *s).collect();
            let pos = labels.iter().filter(|&&y| y == 1).count();
            prop_assume!(pos > 0 && pos < labels.len());
            let base = compute_auc(&scores, &labels).unwrap();
            let squashed: Vec<f64> = scores.iter().map(|s| (s * 0.3).tanh()).collect();
            let shifted: Vec<f64> = scores.iter().map(|s| s * 2.0 + 5.0).collect();
            prop_assert!((compute_auc(&squashed, &labels).unwrap() - base).abs() < 1e-12);
            prop_assert!((compute_auc(&shifted, &labels).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn venn_counts_conserve(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 0..200)) {
            let sup: Vec<bool> = pairs.iter().map(|(s, _)| *s).collect();
            let dist: Vec<bool> = pairs.iter().map(|(_, d)| *d).collect();
            let c = venn_agreement(&sup, &dist).unwrap();
            let sup_correct = sup.iter().filter(|&&b| b).count();
            let dist_correct = dist.iter().filter(|&&b| b).count();
            prop_assert_eq!(c.corrected + c.joint_correct, dist_correct);
            prop_assert_eq!(c.joint_correct + c.new_errors, sup_correct);
            prop_assert_eq!(c.corrected + c.joint_correct + c.new_errors + c.both_wrong, pairs.len());
        }
    }

    #[test]
    fn venn_example() {
        // Supervised right on {a,b,c}; distilled right on {b,c,d,e}; N=6.
        let sup = [true, true, true, false, false, false];
        let dist = [false, true, true, true, true, false];
        let c = venn_agreement(&sup, &dist).unwrap();
        assert_eq!(
            c,
            VennCounts {
                corrected: 2,
                joint_correct: 2,
                new_errors: 1,
                both_wrong: 1
            }
        );
        let same = venn_agreement(&sup, &sup).unwrap();
        assert_eq!((same.corrected, same.new_errors), (0, 0));
    }

    #[test]
    fn bootstrap_on_all_correct_predictions_is_degenerate_at_one() {
        let scores = [0.9, 0.8, 0.2, 0.1, 0.95, 0.05];
        let labels = [1, 1, 0, 0, 1, 0];
        let (lo, hi) = bootstrap_ci(&scores, &labels, Metric::Accuracy, 200, 7).unwrap();
        assert_eq!((lo, hi), (1.0, 1.0));
    }

    #[test]
    fn bootstrap_is_deterministic_under_seed() {
        let scores = [0.9, 0.4, 0.6, 0.1, 0.7, 0.3, 0.55, 0.45];
        let labels = [1, 0, 1, 0, 1, 0, 0, 1];
        let a = bootstrap_ci(&scores, &labels, Metric::Auc, 300, 5).unwrap();
        let b = bootstrap_ci(&scores, &labels, Metric::Auc, 300, 5).unwrap();
        let c = bootstrap_ci(&scores, &labels, Metric::Auc, 300, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.0 <= a.1);
    }

    #[test]
    fn bootstrap_matches_exhaustive_enumeration_on_tiny_set() {
        // N=4: all 4^4 = 256 resamples enumerable. The bootstrap's sampled
        // percentile must sit within one enumerated resample value of the
        // exhaustive percentile bounds.
        let scores = [0.9, 0.6, 0.4, 0.1];
        let labels = [1, 1, 0, 0];
        let mut exhaustive = Vec::new();
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    for d in 0..4 {
                        let idx = [a, b, c, d];
                        let rs: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                        let rl: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
                        exhaustive.push(metric_value(Metric::Accuracy, &rs, &rl).unwrap());
                    }
                }
            }
        }
        exhaustive.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let exact_lo = percentile(&exhaustive, 2.5);
        let exact_hi = percentile(&exhaustive, 97.5);

        let distinct: Vec<f64> = {
            let mut v = exhaustive.clone();
            v.dedup();
            v
        };
        let granularity = distinct
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0f64, f64::max);
        let (lo, hi) = bootstrap_ci(&scores, &labels, Metric::Accuracy, 2000, 11).unwrap();
        assert!((lo - exact_lo).abs() <= granularity, "lo {lo} vs {exact_lo}");
        assert!((hi - exact_hi).abs() <= granularity, "hi {hi} vs {exact_hi}");
    }

    #[test]
    fn bootstrap_interval_contains_point_estimate_for_accuracy() {
        let mut rng = rng_from(31);
        let mut contained = 0;
        let trials = 100;
        for t in 0..trials {
            let n = 25;
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            let point = metric_value(Metric::Accuracy, &scores, &labels).unwrap();
            let (lo, hi) = bootstrap_ci(&scores, &labels, Metric::Accuracy, 300, t).unwrap();
            if lo <= point && point <= hi {
                contained += 1;
            }
        }
        assert!(contained >= 99 * trials / 100, "contained {contained}/{trials}");
    }

    #[test]
    fn paired_test_pinned_cases() {
        // Identical vectors: zero variance, zero mean.
        let (t, p) = paired_test(&[0.3, 0.5, 0.7], &[0.3, 0.5, 0.7]).unwrap();
        assert_eq!((t, p), (0.0, 1.0));
        // Constant nonzero differences: infinitely significant.
        let (t, p) = paired_test(&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(t.is_infinite() && t > 0.0);
        assert!(p < 1e-6);
        // Mean-zero alternating differences.
        let (t, p) = paired_test(&[1.0, -1.0, 1.0, -1.0], &[0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(t, 0.0);
        assert!((p - 1.0).abs() < 1e-12);
        // Length mismatch.
        assert!(matches!(
            paired_test(&[1.0], &[1.0, 2.0]),
            Err(XwdError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn paired_test_matches_t_distribution_on_a_hand_case() {
        // diffs = [1, 2, 3, 4]: mean 2.5, sd = sqrt(5/3), t = 2.5/(sd/2) ≈ 3.873.
        let (t, p) = paired_test(&[2.0, 3.0, 4.0, 5.0], &[1.0, 1.0, 1.0, 1.0]).unwrap();
        let sd = (5.0f64 / 3.0).sqrt();
        let expect_t = 2.5 / (sd / 2.0);
        assert!((t - expect_t).abs() < 1e-12);
        assert!(p > 0.0 && p < 0.05, "p = {p}");
    }

    #[test]
    fn evaluate_produces_coherent_report() {
        let probs = [0.9, 0.7, 0.6, 0.2, 0.4, 0.1];
        let labels = [1, 1, 0, 0, 1, 0];
        let r = evaluate(&probs, &labels, 200, 3).unwrap();
        // acc: predictions (1,1,1,0,0,0) vs (1,1,0,0,1,0) → 4/6.
        assert!((r.accuracy.value - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.per_sample_correct, [true, true, false, true, false, true]);
        for m in [Metric::Accuracy, Metric::F1, Metric::Recall, Metric::Precision, Metric::Auc] {
            let mi = r.get(m);
            assert!(mi.ci_low <= mi.value && mi.value <= mi.ci_high, "{m:?}");
            assert!((0.0..=1.0).contains(&mi.value));
        }
    }
}
