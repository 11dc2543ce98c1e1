//! Per-slice bilinear resizing in the HU domain.
//!
//! Each axial slice is resampled independently with corner-aligned bilinear
//! interpolation: output pixel (r, c) reads input coordinate
//! `(r·(H_in−1)/(H_out−1), c·(W_in−1)/(W_out−1))`, so the four corner pixels
//! map exactly onto each other and an identity resize is bitwise exact.

use ndarray::Array3;

use crate::error::XwdError;
use crate::ingestion::HUVolume;
use crate::Result;

/// Resize every slice of `volume` to `out_hw`.
pub fn resize_slices(volume: &HUVolume, out_hw: (usize, usize)) -> Result<HUVolume> {
    let (t, h_in, w_in) = volume.shape();
    let (h_out, w_out) = out_hw;
    if h_out == 0 || w_out == 0 {
        return Err(XwdError::ShapeMismatch {
            context: "resize_slices",
            expected: "positive output dimensions".into(),
            actual: format!("{h_out}x{w_out}"),
        });
    }
    if (h_in, w_in) == (h_out, w_out) {
        return Ok(volume.clone());
    }

    // Corner-aligned source coordinate per output index; a singleton output
    // axis samples coordinate 0.
    let scale = |n_in: usize, n_out: usize| -> f64 {
        if n_out > 1 {
            (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
        } else {
            0.0
        }
    };
    let sr = scale(h_in, h_out);
    let sc = scale(w_in, w_out);

    let mut voxels = Array3::zeros((t, h_out, w_out));
    for k in 0..t {
        let slice = volume.voxels.index_axis(ndarray::Axis(0), k);
        for r in 0..h_out {
            let y = r as f64 * sr;
            let y0 = (y.floor() as usize).min(h_in - 1);
            let y1 = (y0 + 1).min(h_in - 1);
            let fy = y - y0 as f64;
            for c in 0..w_out {
                let x = c as f64 * sc;
                let x0 = (x.floor() as usize).min(w_in - 1);
                let x1 = (x0 + 1).min(w_in - 1);
                let fx = x - x0 as f64;
                let v00 = slice[[y0, x0]] as f64;
                let v01 = slice[[y0, x1]] as f64;
                let v10 = slice[[y1, x0]] as f64;
                let v11 = slice[[y1, x1]] as f64;
                let top = v00 + (v01 - v00) * fx;
                let bottom = v10 + (v11 - v10) * fx;
                voxels[[k, r, c]] = (top + (bottom - top) * fy) as f32;
            }
        }
    }
    Ok(HUVolume {
        patient_id: volume.patient_id.clone(),
        label: volume.label,
        voxels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;

    fn volume_from_slice(slice: Array2<f32>) -> HUVolume {
        let (h, w) = slice.dim();
        let mut voxels = Array3::zeros((1, h, w));
        voxels.index_axis_mut(ndarray::Axis(0), 0).assign(&slice);
        HUVolume {
            patient_id: "p".into(),
            label: 0,
            voxels,
        }
    }

    /// Independent bilinear evaluation used as a test oracle: explicit
    /// four-corner weights instead of nested 1D lerps.
    fn bilinear_oracle(slice: &Array2<f32>, y: f64, x: f64) -> f64 {
        let (h, w) = slice.dim();
        let y0 = (y.floor() as usize).min(h - 1);
        let x0 = (x.floor() as usize).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        slice[[y0, x0]] as f64 * (1.0 - fy) * (1.0 - fx)
            + slice[[y0, x1]] as f64 * (1.0 - fy) * fx
            + slice[[y1, x0]] as f64 * fy * (1.0 - fx)
            + slice[[y1, x1]] as f64 * fy * fx
    }

    #[test]
    fn constant_slice_stays_constant() {
        let vol = volume_from_slice(Array2::from_elem((3, 3), -412.5));
        let out = resize_slices(&vol, (7, 5)).unwrap();
        assert!(out.voxels.iter().all(|&v| v == -412.5));
    }

    #[test]
    fn two_by_two_upsampled_midpoint_is_half() {
        let slice = ndarray::arr2(&[[0.0f32, 1.0], [0.0, 1.0]]);
        let out = resize_slices(&volume_from_slice(slice), (2, 3)).unwrap();
        assert_eq!(out.voxels[[0, 0, 0]], 0.0);
        assert_eq!(out.voxels[[0, 0, 1]], 0.5);
        assert_eq!(out.voxels[[0, 0, 2]], 1.0);
        assert_eq!(out.voxels[[0, 1, 1]], 0.5);
    }

    #[test]
    fn identity_resize_is_bitwise_equal() {
        let slice = ndarray::arr2(&[[1.5f32, -2.25], [3.125, 0.0]]);
        let vol = volume_from_slice(slice);
        let out = resize_slices(&vol, (2, 2)).unwrap();
        assert_eq!(vol.voxels, out.voxels);
    }

    #[test]
    fn zero_output_dimension_is_rejected() {
        let vol = volume_from_slice(Array2::zeros((2, 2)));
        assert!(resize_slices(&vol, (0, 3)).is_err());
    }

    proptest! {
        #[test]
        fn matches_oracle_and_preserves_range(
            h_in in 1usize..6, w_in in 1usize..6,
            h_out in 1usize..9, w_out in 1usize..9,
            seed in 0u64..1000,
        ) {
            use rand::Rng;
            let mut rng = crate::seed::rng_from(seed);
            let slice = Array2::from_shape_fn((h_in, w_in), |_| {
                rng.random_range(-1000.0f32..1000.0)
            });
            let vol = volume_from_slice(slice.clone());
            let out = resize_slices(&vol, (h_out, w_out)).unwrap();

            let scale = |n_in: usize, n_out: usize| if n_out > 1 {
                (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
            } else { 0.0 };
            let (sr, sc) = (scale(h_in, h_out), scale(w_in, w_out));
            let lo = slice.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = slice.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            for r in 0..h_out {
                for c in 0..w_out {
                    let got = out.voxels[[0, r, c]] as f64;
                    let want = bilinear_oracle(&slice, r as f64 * sr, c as f64 * sc);
                    prop_assert!((got - want).abs() < 1e-4);
                    prop_assert!(got >= lo as f64 - 1e-4 && got <= hi as f64 + 1e-4);
                }
            }
        }
    }
}
