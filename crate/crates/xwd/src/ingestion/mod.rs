//! Volume ingestion: slice-series reading, HU conversion, orientation,
//! trimming/sampling, slice resizing, phantom synthesis, and patient splits.
//!
//! The preprocessing order is fixed: trim → sample → resize (all in the HU
//! domain) → window → normalize. One bilinear pass in HU keeps every window
//! of a patient geometrically consistent.

mod phantom;
mod resize;
mod sample;
mod series;
mod split;
mod volfile;

pub use phantom::{generate_phantoms, PhantomSpec, TissueComponent};
pub use resize::resize_slices;
pub use sample::{plan_indices, trim_and_sample, SamplingPlan, TaskMode};
pub use series::{load_cohort, load_labels, load_series, orient, to_hu, write_series, RawSeries};
pub use split::{split_patients, DatasetSplit, Partition, PartitionView};
pub use volfile::{read_vol, write_vol};

use ndarray::Array3;

/// A 3D scalar field in Hounsfield units with its classification label.
#[derive(Debug, Clone, PartialEq)]
pub struct HUVolume {
    pub patient_id: String,
    /// Binary class label in {0, 1}.
    pub label: u8,
    /// Voxels in (T, H, W) order, apex first.
    pub voxels: Array3<f32>,
}

impl HUVolume {
    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.voxels.dim();
        (d.0, d.1, d.2)
    }
}
