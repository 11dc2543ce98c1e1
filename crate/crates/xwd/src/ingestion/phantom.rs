//! Synthetic HU phantoms with a density-band-confined class signal.
//!
//! A phantom cohort makes the cross-window mechanism testable: the class
//! difference is a *textured* signal whose HU values sit strictly inside a
//! configurable density band, hosted by the last background component's
//! region. A narrow window covering the band sees the texture at full
//! contrast; a wide overview window whose clamp range cuts through the band
//! flattens most of it away. Negative volumes carry the identical
//! background mix — including the host region's tissue — just without the
//! texture, so class information lives in texture structure, not in
//! marginal brightness.
//!
//! Layout: component 0 fills the volume; every further component is an
//! ellipsoid sized to its volume fraction and painted in order (overlaps
//! resolve to the later component, so realized fractions are approximate).
//! Each component's voxels are `mean + patient_shift + voxel_noise`, where
//! the patient-level shift carries a quarter of the component's variance and
//! the voxel noise the rest: marginal dispersion matches the configured
//! stddev exactly, while per-patient brightness varies — a class-neutral
//! nuisance that only windows covering that component's density range can
//! see.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::XwdError;
use crate::ingestion::HUVolume;
use crate::seed::rng_for;
use crate::Result;

/// Calibrated HU scale limits used to validate band placement.
pub const HU_MIN: f64 = -1024.0;
pub const HU_MAX: f64 = 3071.0;

/// Fraction of the band width kept clear between the texture range and each
/// band edge, so "strictly inside" holds with real margin.
const BAND_MARGIN_FRACTION: f64 = 0.025;

/// One background tissue population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueComponent {
    pub mean_hu: f64,
    pub stddev_hu: f64,
    pub volume_fraction: f64,
}

/// Full description of a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub n_patients: usize,
    /// Fraction of positive patients, in (0, 1).
    pub class_balance: f64,
    /// HU interval that must contain every signal-texture voxel, strictly.
    pub signal_band: (f64, f64),
    /// Peak texture excursion around its center, in HU.
    pub signal_texture_amplitude: f64,
    /// Base fill first, then ellipsoidal regions; the last component hosts
    /// the signal texture in positive volumes.
    pub background_tissue_mix: Vec<TissueComponent>,
    /// Raw volume shape (T, H, W) before trimming/sampling.
    pub volume_shape: (usize, usize, usize),
    pub rng_seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(XwdError::InvalidPhantomSpec(msg));
        if self.n_patients < 2 {
            return fail("need at least 2 patients".into());
        }
        if !(self.class_balance > 0.0 && self.class_balance < 1.0) {
            return fail(format!(
                "class_balance must be in (0,1), got {}",
                self.class_balance
            ));
        }
        let n_pos = (self.n_patients as f64 * self.class_balance).round() as usize;
        if n_pos == 0 || n_pos == self.n_patients {
            return fail("class balance leaves one class empty".into());
        }
        let (low, high) = self.signal_band;
        if !(low.is_finite() && high.is_finite()) || low >= high {
            return fail(format!("signal_band ({low}, {high}) is not an interval"));
        }
        if low < HU_MIN || high > HU_MAX {
            return fail(format!(
                "signal_band ({low}, {high}) exceeds the HU scale [{HU_MIN}, {HU_MAX}]"
            ));
        }
        let width = high - low;
        let margin = BAND_MARGIN_FRACTION * width;
        let amp = self.signal_texture_amplitude;
        if !(amp > 0.0) || 2.0 * amp > width - 2.0 * margin {
            return fail(format!(
                "texture amplitude {amp} does not fit strictly inside a band of width {width}"
            ));
        }
        if self.background_tissue_mix.len() < 2 {
            return fail("background mix needs a base component plus at least one region to host the signal".into());
        }
        let mut fraction_sum = 0.0;
        for (i, c) in self.background_tissue_mix.iter().enumerate() {
            if !(c.volume_fraction > 0.0) {
                return fail(format!("component {i} has non-positive volume fraction"));
            }
            if c.stddev_hu < 0.0 || !c.stddev_hu.is_finite() || !c.mean_hu.is_finite() {
                return fail(format!("component {i} has invalid mean/stddev"));
            }
            fraction_sum += c.volume_fraction;
        }
        if (fraction_sum - 1.0).abs() > 1e-6 {
            return fail(format!("volume fractions sum to {fraction_sum}, not 1"));
        }
        let (t, h, w) = self.volume_shape;
        if t < 3 || h < 8 || w < 8 {
            return fail(format!(
                "volume_shape ({t}, {h}, {w}) is too small to place regions"
            ));
        }
        Ok(())
    }

    /// Center of the texture range for a host tissue at `host_mean`:
    /// the host's density, pulled just far enough into the band that the
    /// full amplitude fits strictly inside it.
    fn texture_center(&self, host_mean: f64) -> f64 {
        let (low, high) = self.signal_band;
        let margin = BAND_MARGIN_FRACTION * (high - low);
        let amp = self.signal_texture_amplitude;
        host_mean.clamp(low + margin + amp, high - margin - amp)
    }
}

/// Fixed anchor offsets (fractions of H/W) cycled by region index, so
/// multiple regions land in distinct places before jitter.
const ANCHORS: [(f64, f64); 5] = [
    (0.50, 0.50),
    (0.32, 0.36),
    (0.62, 0.66),
    (0.38, 0.64),
    (0.66, 0.34),
];

struct Ellipsoid {
    center: (f64, f64, f64),
    semi: (f64, f64, f64),
}

impl Ellipsoid {
    fn contains(&self, t: usize, h: usize, w: usize) -> bool {
        let dt = (t as f64 - self.center.0) / self.semi.0;
        let dh = (h as f64 - self.center.1) / self.semi.1;
        let dw = (w as f64 - self.center.2) / self.semi.2;
        dt * dt + dh * dh + dw * dw <= 1.0
    }
}

/// Generate the cohort. Bitwise deterministic for a given spec.
pub fn generate_phantoms(spec: &PhantomSpec) -> Result<Vec<HUVolume>> {
    spec.validate()?;
    let (t_dim, h_dim, w_dim) = spec.volume_shape;
    let total_voxels = (t_dim * h_dim * w_dim) as f64;

    // Class assignment: exact positive count, order shuffled by seed.
    let n_pos = (spec.n_patients as f64 * spec.class_balance).round() as usize;
    let mut labels = vec![0u8; spec.n_patients];
    labels[..n_pos].fill(1);
    {
        use rand::seq::SliceRandom;
        let mut rng = rng_for(spec.rng_seed, "phantom", "labels");
        labels.shuffle(&mut rng);
    }

    let mix = &spec.background_tissue_mix;
    let host_index = mix.len() - 1;

    let mut volumes = Vec::with_capacity(spec.n_patients);
    for (patient, &label) in labels.iter().enumerate() {
        let mut rng = rng_for(
            spec.rng_seed,
            "phantom",
            &format!("patient:{patient:05}"),
        );

        // Patient-level brightness shift per component: N(0, stddev/2),
        // leaving sqrt(3)/2·stddev for voxel noise (total variance = stddev²).
        let shifts: Vec<f64> = mix
            .iter()
            .map(|c| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * c.stddev_hu / 2.0
            })
            .collect();

        // Region geometry: one jittered ellipsoid per non-base component,
        // sized so its volume matches the component's fraction.
        let regions: Vec<Ellipsoid> = mix[1..]
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let anchor = ANCHORS[j % ANCHORS.len()];
                let jitter_h: f64 = rng.random_range(-0.06..0.06);
                let jitter_w: f64 = rng.random_range(-0.06..0.06);
                let scale: f64 = rng.random_range(0.88..1.12);
                let semi_t = (0.38 * t_dim as f64).max(1.0);
                let target = c.volume_fraction * total_voxels;
                let r = (3.0 * target / (4.0 * std::f64::consts::PI * semi_t))
                    .sqrt()
                    * scale;
                Ellipsoid {
                    center: (
                        t_dim as f64 / 2.0,
                        anchor.0 * h_dim as f64 + jitter_h * h_dim as f64,
                        anchor.1 * w_dim as f64 + jitter_w * w_dim as f64,
                    ),
                    semi: (semi_t, r, r),
                }
            })
            .collect();

        // Texture parameters (drawn for every patient so the stream layout
        // is label-independent; only positives consume them visually).
        let wavelength: f64 = rng.random_range(3.5..7.0);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let k_t: f64 = rng.random_range(-0.3..0.3);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let k_mag = std::f64::consts::TAU / wavelength;
        let (k_h, k_w) = (k_mag * theta.cos(), k_mag * theta.sin());

        let amp = spec.signal_texture_amplitude;
        let center = spec.texture_center(mix[host_index].mean_hu + shifts[host_index]);
        let (band_low, band_high) = spec.signal_band;

        let mut voxels = Array3::zeros((t_dim, h_dim, w_dim));
        for t in 0..t_dim {
            for h in 0..h_dim {
                for w in 0..w_dim {
                    // Later regions paint over earlier ones; base fill last
                    // in precedence.
                    let mut component = 0usize;
                    for (j, region) in regions.iter().enumerate() {
                        if region.contains(t, h, w) {
                            component = j + 1;
                        }
                    }

                    let value = if label == 1 && component == host_index {
                        // Striped texture with per-voxel phase jitter: values
                        // stay in [center−amp, center+amp], strictly inside
                        // the band by construction.
                        let jitter: f64 = StandardNormal.sample(&mut rng);
                        let arg = k_t * k_mag * t as f64
                            + k_h * h as f64
                            + k_w * w as f64
                            + phase
                            + 0.35 * jitter;
                        let v = center + amp * arg.sin();
                        debug_assert!(v > band_low && v < band_high);
                        v
                    } else {
                        let c = &mix[component];
                        let z: f64 = StandardNormal.sample(&mut rng);
                        c.mean_hu + shifts[component] + z * c.stddev_hu * 3f64.sqrt() / 2.0
                    };
                    voxels[[t, h, w]] = value as f32;
                }
            }
        }

        volumes.push(HUVolume {
            patient_id: format!("ph{patient:05}"),
            label,
            voxels,
        });
    }
    Ok(volumes)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Mix whose background sits far below the band, so any in-band voxel in
    /// a positive volume must belong to the signal texture.
    fn isolating_spec() -> PhantomSpec {
        PhantomSpec {
            n_patients: 6,
            class_balance: 0.5,
            signal_band: (-100.0, 150.0),
            signal_texture_amplitude: 40.0,
            background_tissue_mix: vec![
                TissueComponent {
                    mean_hu: -900.0,
                    stddev_hu: 10.0,
                    volume_fraction: 0.6,
                },
                TissueComponent {
                    mean_hu: -900.0,
                    stddev_hu: 10.0,
                    volume_fraction: 0.4,
                },
            ],
            volume_shape: (6, 24, 24),
            rng_seed: 7,
        }
    }

    #[test]
    fn equal_seeds_give_bitwise_identical_cohorts() {
        let a = generate_phantoms(&isolating_spec()).unwrap();
        let b = generate_phantoms(&isolating_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = isolating_spec();
        other.rng_seed = 8;
        let c = generate_phantoms(&other).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn signal_voxels_lie_strictly_inside_the_band() {
        let spec = isolating_spec();
        let cohort = generate_phantoms(&spec).unwrap();
        let (low, high) = spec.signal_band;
        let mut saw_signal = false;
        for vol in &cohort {
            for &v in vol.voxels.iter() {
                let v = v as f64;
                if vol.label == 1 && v > -800.0 {
                    // Background lives near −900; anything this high is texture.
                    assert!(v > low && v < high, "texture voxel {v} escaped the band");
                    saw_signal = true;
                } else if vol.label == 0 {
                    assert!(v < -800.0, "negative volume has non-background voxel {v}");
                }
            }
        }
        assert!(saw_signal, "positive volumes must contain texture voxels");
    }

    #[test]
    fn class_balance_is_exact() {
        let mut spec = isolating_spec();
        spec.n_patients = 40;
        spec.class_balance = 0.5;
        let cohort = generate_phantoms(&spec).unwrap();
        let positives = cohort.iter().filter(|v| v.label == 1).count();
        assert_eq!(positives, 20);
        assert_eq!(cohort.len(), 40);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = isolating_spec();
        s.signal_band = (150.0, -100.0);
        assert!(matches!(
            generate_phantoms(&s),
            Err(XwdError::InvalidPhantomSpec(_))
        ));

        let mut s = isolating_spec();
        s.signal_band = (-2000.0, 150.0);
        assert!(generate_phantoms(&s).is_err());

        let mut s = isolating_spec();
        s.signal_texture_amplitude = 500.0; // cannot fit in a 250 HU band
        assert!(generate_phantoms(&s).is_err());

        let mut s = isolating_spec();
        s.background_tissue_mix[0].volume_fraction = 0.7; // sums to 1.1
        assert!(generate_phantoms(&s).is_err());

        let mut s = isolating_spec();
        s.background_tissue_mix.truncate(1);
        assert!(generate_phantoms(&s).is_err());

        let mut s = isolating_spec();
        s.class_balance = 0.0;
        assert!(generate_phantoms(&s).is_err());
    }

    #[test]
    fn patient_ids_are_stable_and_distinct() {
        let cohort = generate_phantoms(&isolating_spec()).unwrap();
        let ids: Vec<_> = cohort.iter().map(|v| v.patient_id.as_str()).collect();
        assert_eq!(ids[0], "ph00000");
        let unique: std::collections::BTreeSet<_> = ids.iter().collect();
        assert_eq!(unique.len(), ids.len());
    }
}
