//! Per-window training data assembly.
//!
//! A [`WindowData`] is one partition's volumes for one window, ordered
//! exactly as the split lists its patient ids. That ordering is the
//! alignment contract between a student and its teacher during
//! distillation: row `n` of the teacher's precomputed feature matrix and
//! sample `n` of the student's data always belong to the same patient.

use ndarray::Array3;

use crate::error::XwdError;
use crate::ingestion::{DatasetSplit, Partition};
use crate::model::Tensor;
use crate::windowing::WindowedStack;
use crate::Result;

/// One partition's samples for one window, in split order.
#[derive(Debug, Clone)]
pub struct WindowData {
    pub ids: Vec<String>,
    pub volumes: Vec<Array3<f32>>,
    pub labels: Vec<u8>,
}

impl WindowData {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Stacks the selected samples into an `[n, 1, T, H, W]` batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        assert!(!indices.is_empty());
        let (t, h, w) = self.volumes[indices[0]].dim();
        let mut out = Tensor::zeros([indices.len(), 1, t, h, w]);
        for (n, &i) in indices.iter().enumerate() {
            let base = out.offset(n, 0, 0, 0);
            let dst = &mut out.data[base..base + t * h * w];
            for (d, &s) in dst.iter_mut().zip(self.volumes[i].iter()) {
                *d = s as f64;
            }
        }
        out
    }

    /// Labels of the selected samples as 0.0/1.0 targets.
    pub fn targets(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().map(|&i| self.labels[i] as f64).collect()
    }
}

/// Collects one partition's volumes for `window` from precomputed stacks,
/// ordered by the split's patient-id list.
pub fn window_data(
    stacks: &[WindowedStack],
    split: &DatasetSplit,
    which: Partition,
    window: &str,
) -> Result<WindowData> {
    let ids = split.ids(which);
    if ids.is_empty() {
        return Err(XwdError::EmptyPartition(format!(
            "{which} partition has no patients"
        )));
    }
    let mut volumes = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for id in ids {
        let stack = stacks
            .iter()
            .find(|s| &s.patient_id == id)
            .ok_or_else(|| XwdError::MissingPatient(id.clone()))?;
        volumes.push(stack.get(window)?.clone());
        labels.push(stack.label);
    }
    Ok(WindowData {
        ids: ids.to_vec(),
        volumes,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn stack(id: &str, label: u8, fill: f32) -> WindowedStack {
        let mut arrays = BTreeMap::new();
        arrays.insert("lung".to_string(), Array3::from_elem((2, 2, 2), fill));
        arrays.insert("bone".to_string(), Array3::from_elem((2, 2, 2), -fill));
        WindowedStack {
            patient_id: id.to_string(),
            label,
            arrays,
        }
    }

    fn split() -> DatasetSplit {
        DatasetSplit {
            train: vec!["c".into(), "a".into()],
            val: vec!["b".into()],
            test: vec!["d".into()],
        }
    }

    #[test]
    fn samples_follow_split_order_not_stack_order() {
        let stacks = vec![
            stack("a", 1, 1.0),
            stack("b", 0, 2.0),
            stack("c", 1, 3.0),
            stack("d", 0, 4.0),
        ];
        let data = window_data(&stacks, &split(), Partition::Train, "lung").unwrap();
        assert_eq!(data.ids, vec!["c", "a"]);
        assert_eq!(data.labels, vec![1, 1]);
        assert_eq!(data.volumes[0][(0, 0, 0)], 3.0);
        assert_eq!(data.volumes[1][(0, 0, 0)], 1.0);

        let bone = window_data(&stacks, &split(), Partition::Val, "bone").unwrap();
        assert_eq!(bone.ids, vec!["b"]);
        assert_eq!(bone.volumes[0][(0, 0, 0)], -2.0);
    }

    #[test]
    fn missing_patient_or_window_is_an_error() {
        let stacks = vec![stack("a", 1, 1.0)];
        let err = window_data(&stacks, &split(), Partition::Train, "lung").unwrap_err();
        assert!(matches!(err, XwdError::MissingPatient(_)));

        let stacks = vec![
            stack("a", 1, 1.0),
            stack("b", 0, 2.0),
            stack("c", 1, 3.0),
        ];
        let err = window_data(&stacks, &split(), Partition::Train, "hrct").unwrap_err();
        assert!(matches!(err, XwdError::UnknownWindow(_)));
    }

    #[test]
    fn batches_stack_selected_samples_with_targets() {
        let stacks = vec![
            stack("a", 1, 1.0),
            stack("b", 0, 2.0),
            stack("c", 0, 3.0),
        ];
        let split = DatasetSplit {
            train: vec!["a".into(), "b".into(), "c".into()],
            val: vec![],
            test: vec![],
        };
        let data = window_data(&stacks, &split, Partition::Train, "lung").unwrap();
        let x = data.batch(&[2, 0]);
        assert_eq!(x.shape, [2, 1, 2, 2, 2]);
        assert_eq!(x.data[x.offset(0, 0, 0, 0)], 3.0);
        assert_eq!(x.data[x.offset(1, 0, 0, 0)], 1.0);
        assert_eq!(data.targets(&[2, 0]), vec![0.0, 1.0]);
    }
}
