//! Intensity window transforms and per-window normalization statistics.
//!
//! A window `(W, L)` clamps Hounsfield values to `[L - W/2, L + W/2]` and
//! rescales that band linearly onto `[0, 1]`. Values at or below the lower
//! bound map to exactly 0.0, values at or above the upper bound to exactly
//! 1.0. After windowing, volumes are z-scored with statistics fitted on the
//! training partition only ([`NormStats`]), with a small epsilon guarding the
//! division when a window saturates to a constant.

use std::collections::BTreeMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::XwdError;
use crate::ingestion::{HUVolume, Partition, PartitionView};
use crate::Result;

/// Epsilon added to the standard deviation in z-scoring.
pub const NORM_EPSILON: f64 = 1e-8;

/// One clamp-and-rescale intensity window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub name: String,
    pub width_hu: f64,
    pub level_hu: f64,
}

impl Window {
    /// Build a window, rejecting non-positive widths and non-finite parameters.
    pub fn new(name: impl Into<String>, width_hu: f64, level_hu: f64) -> Result<Self> {
        let name = name.into();
        if !width_hu.is_finite() || !level_hu.is_finite() {
            return Err(XwdError::NonFiniteInput {
                context: "window parameters",
            });
        }
        if width_hu <= 0.0 {
            return Err(XwdError::WindowDegenerate {
                name,
                width: width_hu,
            });
        }
        Ok(Window {
            name,
            width_hu,
            level_hu,
        })
    }

    /// Lower clamp bound `L - W/2`.
    pub fn lower(&self) -> f64 {
        self.level_hu - self.width_hu / 2.0
    }

    /// Upper clamp bound `L + W/2`.
    pub fn upper(&self) -> f64 {
        self.level_hu + self.width_hu / 2.0
    }

    /// Transform a single HU value onto `[0, 1]`.
    ///
    /// Dividing by `upper - lower` (instead of the width directly) keeps the
    /// boundaries exact: the lower bound maps to 0.0 and the upper to 1.0
    /// with no rounding residue. For the clinical presets the two
    /// denominators are bit-identical.
    pub fn apply_scalar(&self, hu: f64) -> f64 {
        let lo = self.lower();
        let hi = self.upper();
        let clamped = hu.clamp(lo, hi);
        (clamped - lo) / (hi - lo)
    }

    /// Window a whole volume, rejecting non-finite voxels.
    pub fn apply(&self, volume: &Array3<f32>) -> Result<Array3<f32>> {
        let mut out = Array3::zeros(volume.raw_dim());
        for (dst, &src) in out.iter_mut().zip(volume.iter()) {
            if !src.is_finite() {
                return Err(XwdError::NonFiniteInput {
                    context: "volume voxel",
                });
            }
            *dst = self.apply_scalar(src as f64) as f32;
        }
        Ok(out)
    }
}

/// An ordered set of windows; the order is canonical and defines the layout
/// of probability vectors, checkpoints, and reports downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSet {
    windows: Vec<Window>,
}

impl WindowSet {
    /// Window set for diffuse parenchymal disease:
    /// lung, mediastinal, hrct, zero, bone.
    pub fn diffuse() -> Self {
        WindowSet {
            windows: vec![
                Window::new("lung", 1500.0, -600.0).expect("preset is valid"),
                Window::new("mediastinal", 350.0, 20.0).expect("preset is valid"),
                Window::new("hrct", 2000.0, -600.0).expect("preset is valid"),
                Window::new("zero", 1500.0, 0.0).expect("preset is valid"),
                Window::new("bone", 1000.0, 250.0).expect("preset is valid"),
            ],
        }
    }

    /// Window set for focal vascular findings:
    /// lung, mediastinal, hrct, zero, pe.
    pub fn focal() -> Self {
        WindowSet {
            windows: vec![
                Window::new("lung", 1500.0, -600.0).expect("preset is valid"),
                Window::new("mediastinal", 350.0, 20.0).expect("preset is valid"),
                Window::new("hrct", 2000.0, -600.0).expect("preset is valid"),
                Window::new("zero", 1500.0, 0.0).expect("preset is valid"),
                Window::new("pe", 700.0, 100.0).expect("preset is valid"),
            ],
        }
    }

    /// Build a custom set; names must be unique and the set non-empty.
    pub fn new(windows: Vec<Window>) -> Result<Self> {
        if windows.is_empty() {
            return Err(XwdError::EmptyInput("window set"));
        }
        for (i, w) in windows.iter().enumerate() {
            if windows[..i].iter().any(|prev| prev.name == w.name) {
                return Err(XwdError::ConfigInvalid(format!(
                    "duplicate window name '{}'",
                    w.name
                )));
            }
        }
        Ok(WindowSet { windows })
    }

    /// Window by name, or [`XwdError::UnknownWindow`].
    pub fn get(&self, name: &str) -> Result<&Window> {
        self.windows
            .iter()
            .find(|w| w.name == name)
            .ok_or_else(|| XwdError::UnknownWindow(name.to_string()))
    }

    /// Canonical position of a window within the set.
    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.windows
            .iter()
            .position(|w| w.name == name)
            .ok_or_else(|| XwdError::UnknownWindow(name.to_string()))
    }

    /// Names in canonical order.
    pub fn names(&self) -> Vec<String> {
        self.windows.iter().map(|w| w.name.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Window> {
        self.windows.iter()
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Z-score statistics for one window, fitted on the training partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// Mean of all training voxels after windowing.
    pub mean: f64,
    /// Population (biased) standard deviation of the same voxels.
    pub std: f64,
    /// Guard added to `std` before dividing.
    pub epsilon: f64,
}

impl NormStats {
    /// Fit mean and population standard deviation over every voxel of the
    /// given volumes. Fails on an empty iterator or empty volumes.
    pub fn fit<'a>(volumes: impl IntoIterator<Item = &'a Array3<f32>>) -> Result<Self> {
        let mut count: u64 = 0;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for vol in volumes {
            for &v in vol.iter() {
                let v = v as f64;
                if !v.is_finite() {
                    return Err(XwdError::NonFiniteInput {
                        context: "normalization fit",
                    });
                }
                count += 1;
                sum += v;
                sum_sq += v * v;
            }
        }
        if count == 0 {
            return Err(XwdError::EmptyInput("normalization fit"));
        }
        let n = count as f64;
        let mean = sum / n;
        let var = (sum_sq / n - mean * mean).max(0.0);
        Ok(NormStats {
            mean,
            std: var.sqrt(),
            epsilon: NORM_EPSILON,
        })
    }

    /// Z-score a single windowed value.
    pub fn apply_scalar(&self, v: f64) -> f64 {
        (v - self.mean) / (self.std + self.epsilon)
    }

    /// Z-score a whole windowed volume.
    pub fn apply(&self, volume: &Array3<f32>) -> Array3<f32> {
        volume.mapv(|v| self.apply_scalar(v as f64) as f32)
    }
}

/// One patient's multi-window stack: the same sampled volume under every
/// window of the active set, keyed by window name.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedStack {
    pub patient_id: String,
    pub label: u8,
    pub arrays: BTreeMap<String, Array3<f32>>,
}

impl WindowedStack {
    /// The shared (T, H, W) extent of all windows in the stack.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.arrays
            .values()
            .next()
            .map(|a| a.dim())
            .unwrap_or((0, 0, 0))
    }

    /// One window's array, by name.
    pub fn get(&self, window: &str) -> Result<&Array3<f32>> {
        self.arrays
            .get(window)
            .ok_or_else(|| XwdError::UnknownWindow(window.to_string()))
    }
}

/// Applies every window of a set to one HU volume, producing the patient's
/// pre-normalization stack (all values in [0, 1]).
pub fn window_volume(volume: &HUVolume, set: &WindowSet) -> Result<WindowedStack> {
    let mut arrays = BTreeMap::new();
    for w in set.iter() {
        arrays.insert(w.name.clone(), w.apply(&volume.voxels)?);
    }
    Ok(WindowedStack {
        patient_id: volume.patient_id.clone(),
        label: volume.label,
        arrays,
    })
}

/// Fits one window's z-score statistics over every voxel of the training
/// partition. Any other partition is rejected: statistics fitted on
/// validation or test voxels would leak those sets into preprocessing.
pub fn fit_norm_stats(
    train: &PartitionView<'_, WindowedStack>,
    window: &str,
) -> Result<NormStats> {
    if train.kind != Partition::Train {
        return Err(XwdError::NormStatsLeakage(train.kind.to_string()));
    }
    let mut volumes = Vec::with_capacity(train.items.len());
    for stack in &train.items {
        volumes.push(stack.get(window)?);
    }
    NormStats::fit(volumes)
}

/// Fits statistics for every window of the set, keyed by window name.
pub fn fit_all_norm_stats(
    train: &PartitionView<'_, WindowedStack>,
    set: &WindowSet,
) -> Result<BTreeMap<String, NormStats>> {
    let mut out = BTreeMap::new();
    for w in set.iter() {
        out.insert(w.name.clone(), fit_norm_stats(train, &w.name)?);
    }
    Ok(out)
}

/// Z-scores every window of a stack with its fitted statistics. Applied
/// identically to all partitions.
pub fn normalize_stack(
    stack: &WindowedStack,
    stats: &BTreeMap<String, NormStats>,
) -> Result<WindowedStack> {
    let mut arrays = BTreeMap::new();
    for (name, array) in &stack.arrays {
        let s = stats
            .get(name)
            .ok_or_else(|| XwdError::UnknownWindow(name.clone()))?;
        arrays.insert(name.clone(), s.apply(array));
    }
    Ok(WindowedStack {
        patient_id: stack.patient_id.clone(),
        label: stack.label,
        arrays,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;
    use proptest::prelude::*;

    #[test]
    fn mediastinal_maps_100_hu_to_255_over_350() {
        let w = Window::new("mediastinal", 350.0, 20.0).unwrap();
        let out = w.apply_scalar(100.0);
        assert!((out - 255.0 / 350.0).abs() < 1e-12, "got {out}");
        // And through the volume path, in f32.
        let vol = arr3(&[[[100.0f32]]]);
        let windowed = w.apply(&vol).unwrap();
        assert!((windowed[[0, 0, 0]] as f64 - 255.0 / 350.0).abs() < 1e-7);
    }

    #[test]
    fn boundaries_are_exact_for_all_presets() {
        for set in [WindowSet::diffuse(), WindowSet::focal()] {
            for w in set.iter() {
                assert_eq!(w.apply_scalar(w.lower()), 0.0, "{}", w.name);
                assert_eq!(w.apply_scalar(w.upper()), 1.0, "{}", w.name);
                assert_eq!(w.apply_scalar(w.lower() - 500.0), 0.0, "{}", w.name);
                assert_eq!(w.apply_scalar(w.upper() + 500.0), 1.0, "{}", w.name);
            }
        }
    }

    #[test]
    fn preset_sets_have_canonical_order_and_values() {
        let d = WindowSet::diffuse();
        assert_eq!(d.names(), ["lung", "mediastinal", "hrct", "zero", "bone"]);
        let f = WindowSet::focal();
        assert_eq!(f.names(), ["lung", "mediastinal", "hrct", "zero", "pe"]);
        let lung = d.get("lung").unwrap();
        assert_eq!((lung.width_hu, lung.level_hu), (1500.0, -600.0));
        let med = d.get("mediastinal").unwrap();
        assert_eq!((med.width_hu, med.level_hu), (350.0, 20.0));
        let hrct = d.get("hrct").unwrap();
        assert_eq!((hrct.width_hu, hrct.level_hu), (2000.0, -600.0));
        let zero = d.get("zero").unwrap();
        assert_eq!((zero.width_hu, zero.level_hu), (1500.0, 0.0));
        let bone = d.get("bone").unwrap();
        assert_eq!((bone.width_hu, bone.level_hu), (1000.0, 250.0));
        let pe = f.get("pe").unwrap();
        assert_eq!((pe.width_hu, pe.level_hu), (700.0, 100.0));
        assert_eq!(d.index_of("hrct").unwrap(), 2);
    }

    #[test]
    fn invalid_windows_are_rejected() {
        assert!(matches!(
            Window::new("bad", 0.0, 0.0),
            Err(XwdError::WindowDegenerate { .. })
        ));
        assert!(matches!(
            Window::new("bad", -10.0, 0.0),
            Err(XwdError::WindowDegenerate { .. })
        ));
        assert!(matches!(
            Window::new("bad", f64::NAN, 0.0),
            Err(XwdError::NonFiniteInput { .. })
        ));
        let set = WindowSet::diffuse();
        assert!(matches!(
            set.get("soft_tissue"),
            Err(XwdError::UnknownWindow(_))
        ));
    }

    #[test]
    fn nan_voxels_are_rejected() {
        let w = Window::new("lung", 1500.0, -600.0).unwrap();
        let vol = arr3(&[[[0.0f32, f32::NAN]]]);
        assert!(matches!(
            w.apply(&vol),
            Err(XwdError::NonFiniteInput { .. })
        ));
    }

    #[test]
    fn duplicate_window_names_are_rejected() {
        let ws = vec![
            Window::new("a", 100.0, 0.0).unwrap(),
            Window::new("a", 200.0, 0.0).unwrap(),
        ];
        assert!(WindowSet::new(ws).is_err());
    }

    #[test]
    fn norm_stats_match_hand_computation() {
        // Voxels {0, 1}: mean 0.5, population std 0.5.
        let vol = arr3(&[[[0.0f32, 1.0]]]);
        let stats = NormStats::fit([&vol]).unwrap();
        assert!((stats.mean - 0.5).abs() < 1e-12);
        assert!((stats.std - 0.5).abs() < 1e-12);
        let z = stats.apply(&vol);
        assert!((z[[0, 0, 0]] + 1.0).abs() < 1e-5);
        assert!((z[[0, 0, 1]] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn constant_volume_normalizes_to_zero_without_nan() {
        let vol = Array3::from_elem((2, 3, 3), 0.25f32);
        let stats = NormStats::fit([&vol]).unwrap();
        assert_eq!(stats.std, 0.0);
        let z = stats.apply(&vol);
        assert!(z.iter().all(|v| v.is_finite()));
        assert!(z.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn norm_stats_require_voxels() {
        let vols: Vec<&Array3<f32>> = vec![];
        assert!(matches!(
            NormStats::fit(vols),
            Err(XwdError::EmptyInput(_))
        ));
    }

    proptest! {
        #[test]
        fn output_is_always_in_unit_interval(
            width in 1e-3f64..5000.0,
            level in -2000.0f64..2000.0,
            hu in -5000.0f64..5000.0,
        ) {
            let w = Window::new("w", width, level).unwrap();
            let out = w.apply_scalar(hu);
            prop_assert!((0.0..=1.0).contains(&out));
        }

        #[test]
        fn transform_is_monotone(
            width in 1e-3f64..5000.0,
            level in -2000.0f64..2000.0,
            a in -5000.0f64..5000.0,
            b in -5000.0f64..5000.0,
        ) {
            let w = Window::new("w", width, level).unwrap();
            let (lo_v, hi_v) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(w.apply_scalar(lo_v) <= w.apply_scalar(hi_v));
        }

        #[test]
        fn interior_matches_closed_form(
            width in 1.0f64..5000.0,
            level in -2000.0f64..2000.0,
            t in 0.0f64..1.0,
        ) {
            let w = Window::new("w", width, level).unwrap();
            let hu = w.lower() + t * width;
            let expected = ((hu.clamp(w.lower(), w.upper())) - w.lower()) / width;
            prop_assert!((w.apply_scalar(hu) - expected).abs() < 1e-9);
        }
    }
}
