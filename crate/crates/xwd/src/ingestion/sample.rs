//! Boundary-slice trimming and fixed-count slice sampling.
//!
//! The rule is deterministic: trim `floor(trim_fraction·N)` slices from each
//! end, start the sampling region at `floor(region_start_fraction·n)` of the
//! `n` kept slices, and pick `target_slices` indices by the stride rule
//! `index_k = region_start + floor(k·m/T)` over the `m`-slice region. When
//! the region is too short the region is expanded toward the kept ends
//! (only the lower end can move, since the region already runs to the last
//! kept slice); if the kept range is still shorter than `T`, the same stride
//! formula repeats indices.

use serde::{Deserialize, Serialize};

use crate::error::XwdError;
use crate::ingestion::HUVolume;
use crate::Result;

/// Which clinical task the sampling defaults target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    /// Diffuse parenchymal disease: mid-lung region, modest slice count.
    Diffuse,
    /// Focal vascular findings: whole kept range, dense slice count.
    Focal,
}

/// How a raw stack is trimmed and reduced to a fixed slice count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub task_mode: TaskMode,
    /// Number of slices the sampled volume must contain (T).
    pub target_slices: usize,
    /// Fraction of the kept range skipped before sampling begins.
    pub region_start_fraction: f64,
    /// Fraction trimmed from each end of the raw stack.
    pub trim_fraction: f64,
}

impl SamplingPlan {
    /// Full-scale diffuse defaults: 32 slices starting 40% into the kept range.
    pub fn diffuse_default() -> Self {
        SamplingPlan {
            task_mode: TaskMode::Diffuse,
            target_slices: 32,
            region_start_fraction: 0.40,
            trim_fraction: 0.10,
        }
    }

    /// Full-scale focal defaults: 128 slices over the whole kept range.
    pub fn focal_default() -> Self {
        SamplingPlan {
            task_mode: TaskMode::Focal,
            target_slices: 128,
            region_start_fraction: 0.0,
            trim_fraction: 0.10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_slices == 0 {
            return Err(XwdError::InvalidSampling(
                "target_slices must be positive".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.trim_fraction) {
            return Err(XwdError::InvalidSampling(format!(
                "trim_fraction must be in [0, 0.5), got {}",
                self.trim_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.region_start_fraction) {
            return Err(XwdError::InvalidSampling(format!(
                "region_start_fraction must be in [0, 1), got {}",
                self.region_start_fraction
            )));
        }
        Ok(())
    }
}

/// Indices (into the raw stack) selected by trimming plus the stride rule.
pub fn plan_indices(n_slices: usize, plan: &SamplingPlan) -> Result<Vec<usize>> {
    plan.validate()?;
    if n_slices < 3 {
        return Err(XwdError::InvalidSampling(format!(
            "sampling needs at least 3 slices, got {n_slices}"
        )));
    }
    let trim = (plan.trim_fraction * n_slices as f64).floor() as usize;
    let kept = n_slices - 2 * trim;
    if kept == 0 {
        return Err(XwdError::InvalidSampling(
            "trim removed every slice".into(),
        ));
    }

    let t = plan.target_slices;
    let mut start = (plan.region_start_fraction * kept as f64).floor() as usize;
    let mut m = kept - start;
    if m < t {
        // Expand toward the kept ends. The region already reaches the last
        // kept slice, so the whole deficit is absorbed by the lower end.
        start = start.saturating_sub(t - m);
        m = kept - start;
    }

    let indices = (0..t).map(|k| trim + start + k * m / t).collect();
    Ok(indices)
}

/// Apply [`plan_indices`] to a volume, gathering the selected slices.
pub fn trim_and_sample(volume: &HUVolume, plan: &SamplingPlan) -> Result<HUVolume> {
    let (t_raw, h, w) = volume.shape();
    let indices = plan_indices(t_raw, plan)?;
    let mut voxels = ndarray::Array3::zeros((indices.len(), h, w));
    for (dst, &src) in indices.iter().enumerate() {
        voxels
            .index_axis_mut(ndarray::Axis(0), dst)
            .assign(&volume.voxels.index_axis(ndarray::Axis(0), src));
    }
    Ok(HUVolume {
        patient_id: volume.patient_id.clone(),
        label: volume.label,
        voxels,
    })
}
