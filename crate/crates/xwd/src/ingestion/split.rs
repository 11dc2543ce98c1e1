//! Patient-level train/validation/test splitting.
//!
//! Splitting happens on patient identifiers, never on volumes, so one
//! patient can never straddle two partitions. Counts are `round(fraction·N)`
//! for train and validation with the remainder going to test; a partition
//! that rounds to zero is an error.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::XwdError;
use crate::seed::rng_from;
use crate::Result;

/// Which partition a piece of data belongs to. Carried by [`PartitionView`]
/// so leakage-sensitive operations can verify what they were handed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Partition::Train => write!(f, "train"),
            Partition::Val => write!(f, "val"),
            Partition::Test => write!(f, "test"),
        }
    }
}

/// A borrowed view of one partition's items, tagged with its kind.
///
/// Fitting operations take a view and check its `kind`: normalization
/// statistics demand `Train`, the ensemble meta-learner demands `Val`.
#[derive(Debug, Clone)]
pub struct PartitionView<'a, T> {
    pub kind: Partition,
    pub items: Vec<&'a T>,
}

/// Disjoint patient-id partitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn partition_of(&self, patient_id: &str) -> Option<Partition> {
        if self.train.iter().any(|p| p == patient_id) {
            Some(Partition::Train)
        } else if self.val.iter().any(|p| p == patient_id) {
            Some(Partition::Val)
        } else if self.test.iter().any(|p| p == patient_id) {
            Some(Partition::Test)
        } else {
            None
        }
    }

    pub fn ids(&self, which: Partition) -> &[String] {
        match which {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }
}

/// Shuffle patients with a seeded generator and cut into three partitions.
pub fn split_patients(
    patients: &[String],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let (ft, fv, fs) = fractions;
    let sum = ft + fv + fs;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(XwdError::ConfigInvalid(format!(
            "split fractions must sum to 1, got {sum}"
        )));
    }
    if ft < 0.0 || fv < 0.0 || fs < 0.0 {
        return Err(XwdError::ConfigInvalid(
            "split fractions must be nonnegative".into(),
        ));
    }
    let n = patients.len();
    let n_train = (ft * n as f64).round() as usize;
    let n_val = (fv * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(XwdError::EmptyPartition(format!(
            "{n} patients with fractions ({ft}, {fv}, {fs}) give sizes \
             ({n_train}, {n_val}, {})",
            n as isize - n_train as isize - n_val as isize
        )));
    }

    let mut shuffled: Vec<String> = patients.to_vec();
    let mut rng = rng_from(seed);
    shuffled.shuffle(&mut rng);

    let train = shuffled[..n_train].to_vec();
    let val = shuffled[n_train..n_train + n_val].to_vec();
    let test = shuffled[n_train + n_val..].to_vec();
    Ok(DatasetSplit { train, val, test })
}
