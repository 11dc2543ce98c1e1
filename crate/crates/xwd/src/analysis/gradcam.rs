//! Gradient-weighted class activation maps.
//!
//! For a chosen convolutional stage, each channel's weight is the spatial
//! mean of the logit's gradient with respect to that channel's activation;
//! the map is the rectified weighted sum of activations, trilinearly
//! upsampled to input shape and max-normalized (an all-nonpositive map stays
//! identically zero).

use ndarray::{Array2, Array3};

use crate::model::encoder::batch_from_volumes;
use crate::model::tensor::Tensor;
use crate::model::EncoderState;
use crate::{Result, XwdError};

/// A nonnegative attention volume aligned to the encoder input.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// Values in [0, 1], shape (T, H, W).
    pub heatmap: Array3<f32>,
    pub target_layer: String,
}

/// Computes the attention map of one volume's logit at a target stage
/// (`None` selects the final stage).
///
/// The state is cloned internally: the backward pass scribbles on gradient
/// buffers, and a visualization must not mutate the model it inspects.
pub fn grad_cam(
    state: &EncoderState,
    volume: &Array3<f32>,
    target_layer: Option<&str>,
) -> Result<AttentionMap> {
    let stage_names = state.config.stage_names();
    let layer_name = match target_layer {
        Some(name) => {
            if !stage_names.iter().any(|s| s == name) {
                return Err(XwdError::UnknownLayer(name.to_string()));
            }
            name.to_string()
        }
        None => stage_names.last().expect("config has stages").clone(),
    };
    let stage = stage_names
        .iter()
        .position(|s| s == &layer_name)
        .expect("validated above");

    let x = batch_from_volumes(std::slice::from_ref(volume));
    state.check_input(&x)?;

    let mut scratch = state.clone();
    scratch.zero_grads();
    let (_feats, cache) = scratch.encoder.forward_eval(&x);

    // Gradient of the raw logit with respect to the features is the head
    // weight vector itself.
    let d = scratch.config.feature_dim;
    let mut g_feats = Array2::zeros((1, d));
    for j in 0..d {
        g_feats[(0, j)] = scratch.head.w.val[j];
    }
    let grads = scratch
        .encoder
        .backward_to_stage(&cache, &g_feats, stage);
    let activation = cache.stage_activation(&scratch.encoder, stage);

    let raw = weighted_activation_map(activation, &grads);
    let (t, h, w) = volume.dim();
    let upsampled = trilinear_upsample(&raw, (t, h, w));
    Ok(AttentionMap {
        heatmap: max_normalize(upsampled),
        target_layer: layer_name,
    })
}

/// ReLU(Σₖ wₖ·Aₖ) where wₖ is the spatial mean of channel k's gradient.
pub(crate) fn weighted_activation_map(activation: &Tensor, grads: &Tensor) -> Array3<f64> {
    let [_, c_n, t, h, w] = activation.shape;
    let per_c = activation.spatial();
    let weights: Vec<f64> = (0..c_n)
        .map(|c| {
            let base = grads.offset(0, c, 0, 0);
            grads.data[base..base + per_c].iter().sum::<f64>() / per_c as f64
        })
        .collect();
    let mut map = Array3::zeros((t, h, w));
    for (c, &wk) in weights.iter().enumerate() {
        let base = activation.offset(0, c, 0, 0);
        for (i, v) in map.iter_mut().enumerate() {
            *v += wk * activation.data[base + i];
        }
    }
    map.mapv_inplace(|v: f64| v.max(0.0));
    map
}

/// Corner-aligned trilinear interpolation onto a new (T, H, W) grid.
pub(crate) fn trilinear_upsample(src: &Array3<f64>, out: (usize, usize, usize)) -> Array3<f64> {
    let (ti, hi, wi) = src.dim();
    let (to, ho, wo) = out;
    if (ti, hi, wi) == out {
        return src.clone();
    }
    let scale = |n_in: usize, n_out: usize| -> f64 {
        if n_out <= 1 {
            0.0
        } else {
            (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };
    let (st, sh, sw) = (scale(ti, to), scale(hi, ho), scale(wi, wo));
    let split = |pos: f64, max: usize| -> (usize, usize, f64) {
        let lo = (pos.floor() as usize).min(max - 1);
        let hi = (lo + 1).min(max - 1);
        (lo, hi, pos - lo as f64)
    };
    Array3::from_shape_fn((to, ho, wo), |(t, h, w)| {
        let (t0, t1, ft) = split(t as f64 * st, ti);
        let (h0, h1, fh) = split(h as f64 * sh, hi);
        let (w0, w1, fw) = split(w as f64 * sw, wi);
        let lerp = |a: f64, b: f64, f: f64| a + (b - a) * f;
        let at = |t: usize, h: usize, w: usize| src[(t, h, w)];
        lerp(
            lerp(
                lerp(at(t0, h0, w0), at(t0, h0, w1), fw),
                lerp(at(t0, h1, w0), at(t0, h1, w1), fw),
                fh,
            ),
            lerp(
                lerp(at(t1, h0, w0), at(t1, h0, w1), fw),
                lerp(at(t1, h1, w0), at(t1, h1, w1), fw),
                fh,
            ),
            ft,
        )
    })
}

/// Scales a nonnegative map so its maximum is 1; a zero map stays zero.
pub(crate) fn max_normalize(map: Array3<f64>) -> Array3<f32> {
    let max = map.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        map.mapv(|v| (v / max) as f32)
    } else {
        map.mapv(|_| 0.0f32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::encoder::{build_encoder, EncoderConfig};
    use crate::seed::rng_from;
    use rand::Rng;

    fn random_volume(shape: (usize, usize, usize), seed: u64) -> Array3<f32> {
        let mut rng = rng_from(seed);
        Array3::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn one_stage_state() -> crate::model::EncoderState {
        let cfg = EncoderConfig {
            feature_dim: 4,
            stage_channels: vec![4],
            blocks_per_stage: vec![1],
            input_shape: (2, 6, 6),
            se_reduction: 4,
        };
        build_encoder(&cfg, "lung", 17).unwrap()
    }

    #[test]
    fn unknown_layer_is_rejected_and_default_is_final_stage() {
        let state = one_stage_state();
        let vol = random_volume((2, 6, 6), 3);
        assert!(matches!(
            grad_cam(&state, &vol, Some("stage9")),
            Err(XwdError::UnknownLayer(_))
        ));
        let map = grad_cam(&state, &vol, None).unwrap();
        assert_eq!(map.target_layer, "stage1");
        assert_eq!(map.heatmap.dim(), (2, 6, 6));
        assert!(map.heatmap.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn all_negative_weighted_sum_gives_zero_map() {
        let mut state = one_stage_state();
        // Negative head weights make every channel weight negative while
        // activations stay nonnegative (post-ReLU), so the ReLU of the
        // weighted sum annihilates everything.
        for v in state.head.w.val.iter_mut() {
            *v = -(v.abs() + 0.1);
        }
        let vol = random_volume((2, 6, 6), 5);
        let map = grad_cam(&state, &vol, None).unwrap();
        assert!(map.heatmap.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_single_channel_activation_normalizes_to_one() {
        // weight w > 0, constant activation c > 0 → constant map = 1.
        let mut act = Tensor::zeros([1, 1, 2, 2, 2]);
        act.data.fill(3.0);
        let mut g = Tensor::zeros([1, 1, 2, 2, 2]);
        g.data.fill(0.25);
        let raw = weighted_activation_map(&act, &g);
        let norm = max_normalize(trilinear_upsample(&raw, (4, 4, 4)));
        assert_eq!(norm.dim(), (4, 4, 4));
        assert!(norm.iter().all(|&v| (v - 1.0).abs() < 1e-7));
    }

    #[test]
    fn upsampling_is_corner_aligned_and_monotone_range_preserving() {
        let src = Array3::from_shape_fn((2, 2, 2), |(t, h, w)| (4 * t + 2 * h + w) as f64);
        let up = trilinear_upsample(&src, (3, 3, 3));
        // Corners map exactly.
        assert_eq!(up[(0, 0, 0)], src[(0, 0, 0)]);
        assert_eq!(up[(2, 2, 2)], src[(1, 1, 1)]);
        assert_eq!(up[(0, 0, 2)], src[(0, 0, 1)]);
        // Midpoint is the global average.
        assert!((up[(1, 1, 1)] - 3.5).abs() < 1e-12);
        // Interpolation never overshoots.
        let (lo, hi) = (0.0, 7.0);
        assert!(up.iter().all(|&v| (lo..=hi).contains(&v)));
    }

    #[test]
    fn map_matches_finite_difference_oracle_on_one_stage_encoder() {
        // Oracle: ∂z/∂A by central differences through the network tail
        // (here GAP + head), then the same weighting/rectification formula.
        // Positive head weights guarantee a non-degenerate map to compare.
        let mut state = one_stage_state();
        for v in state.head.w.val.iter_mut() {
            *v = v.abs() + 0.05;
        }
        let vol = random_volume((2, 6, 6), 11);
        let x = batch_from_volumes(std::slice::from_ref(&vol));
        let (_, cache) = state.encoder.forward_eval(&x);
        let act = cache.stage_activation(&state.encoder, 0).clone();

        let tail_logit = |a: &Tensor| -> f64 {
            let feats = state.encoder.forward_eval_from_stage(a, 0);
            state.head.forward(&feats)[0]
        };
        let mut fd = Tensor::zeros(act.shape);
        let eps = 1e-5;
        for i in 0..act.numel() {
            let mut plus = act.clone();
            plus.data[i] += eps;
            let mut minus = act.clone();
            minus.data[i] -= eps;
            fd.data[i] = (tail_logit(&plus) - tail_logit(&minus)) / (2.0 * eps);
        }
        let oracle = max_normalize(trilinear_upsample(
            &weighted_activation_map(&act, &fd),
            (2, 6, 6),
        ));

        let map = grad_cam(&state, &vol, Some("stage1")).unwrap();
        let dot: f64 = map
            .heatmap
            .iter()
            .zip(oracle.iter())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let na: f64 = map.heatmap.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = oracle.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!(na > 0.0 && nb > 0.0, "degenerate maps");
        let cosine = dot / (na * nb);
        assert!(cosine > 0.99, "cosine = {cosine}");
    }

    #[test]
    fn two_stage_target_matches_finite_differences_through_the_tail() {
        let cfg = EncoderConfig {
            feature_dim: 8,
            stage_channels: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            input_shape: (2, 6, 6),
            se_reduction: 4,
        };
        let state = build_encoder(&cfg, "lung", 23).unwrap();
        let vol = random_volume((2, 6, 6), 29);
        let x = batch_from_volumes(std::slice::from_ref(&vol));
        let (_, cache) = state.encoder.forward_eval(&x);
        let act = cache.stage_activation(&state.encoder, 0).clone();

        let tail_logit = |a: &Tensor| -> f64 {
            let feats = state.encoder.forward_eval_from_stage(a, 0);
            state.head.forward(&feats)[0]
        };
        let mut fd = Tensor::zeros(act.shape);
        let eps = 1e-5;
        for i in 0..act.numel() {
            let mut plus = act.clone();
            plus.data[i] += eps;
            let mut minus = act.clone();
            minus.data[i] -= eps;
            fd.data[i] = (tail_logit(&plus) - tail_logit(&minus)) / (2.0 * eps);
        }
        let oracle = max_normalize(trilinear_upsample(
            &weighted_activation_map(&act, &fd),
            (2, 6, 6),
        ));
        let map = grad_cam(&state, &vol, Some("stage1")).unwrap();
        let dot: f64 = map
            .heatmap
            .iter()
            .zip(oracle.iter())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let na: f64 = map.heatmap.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = oracle.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!(na > 0.0 && nb > 0.0, "degenerate maps");
        let cosine = dot / (na * nb);
        assert!(cosine > 0.99, "cosine = {cosine}");
    }

    #[test]
    fn grad_cam_leaves_the_inspected_state_untouched() {
        let state = one_stage_state();
        let before = state.clone();
        let vol = random_volume((2, 6, 6), 41);
        let _ = grad_cam(&state, &vol, None).unwrap();
        assert_eq!(state, before);
    }
}
