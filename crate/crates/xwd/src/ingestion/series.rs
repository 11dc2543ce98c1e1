//! Minimal uncompressed volume-series reader and writer.
//!
//! A series is a directory of `*.slice` files, one per axial slice. Each
//! file carries its own geometry and rescale metadata so a series can be
//! reassembled from loose files:
//!
//! ```text
//! magic "XWSL" | rows u32 | cols u32 | position f64 | slope f64 | intercept f64 | pixels i16...
//! ```
//!
//! All integers are little-endian; pixels are row-major. Cohorts add a
//! `labels.tsv` at the cohort root mapping `patient_id <TAB> label`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::XwdError;
use crate::ingestion::HUVolume;
use crate::Result;

const MAGIC: &[u8; 4] = b"XWSL";

/// One patient's slice stack before HU conversion.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub patient_id: String,
    /// One 2D integer pixel array per slice, all the same shape.
    pub slices: Vec<Array2<i16>>,
    /// Cranio-caudal position of each slice, parallel to `slices`.
    pub positions: Vec<f64>,
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
}

fn series_err(path: &Path, reason: impl Into<String>) -> XwdError {
    XwdError::InvalidSeries {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Load every `*.slice` file under `dir` and orient the stack.
pub fn load_series(dir: &Path) -> Result<RawSeries> {
    let patient_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());

    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "slice"))
        .collect();
    files.sort();

    if files.len() < 3 {
        return Err(series_err(
            dir,
            format!("needs at least 3 slices, found {}", files.len()),
        ));
    }

    let mut slices = Vec::with_capacity(files.len());
    let mut positions = Vec::with_capacity(files.len());
    let mut slope_intercept: Option<(f64, f64)> = None;
    let mut shape: Option<(usize, usize)> = None;

    for file in &files {
        let (pixels, position, slope, intercept) = read_slice(file)?;
        match shape {
            None => shape = Some(pixels.dim()),
            Some(s) if s != pixels.dim() => {
                return Err(series_err(
                    dir,
                    format!(
                        "inconsistent slice shapes: {:?} vs {:?}",
                        s,
                        pixels.dim()
                    ),
                ))
            }
            _ => {}
        }
        match slope_intercept {
            None => slope_intercept = Some((slope, intercept)),
            Some(si) if si != (slope, intercept) => {
                return Err(series_err(dir, "inconsistent rescale parameters"))
            }
            _ => {}
        }
        slices.push(pixels);
        positions.push(position);
    }

    let (rescale_slope, rescale_intercept) = slope_intercept.expect("at least 3 slices");
    orient(RawSeries {
        patient_id,
        slices,
        positions,
        rescale_slope,
        rescale_intercept,
    })
}

fn read_slice(path: &Path) -> Result<(Array2<i16>, f64, f64, f64)> {
    let invalid = |reason: &str| series_err(path, reason);
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = [0u8; 36];
    reader
        .read_exact(&mut header)
        .map_err(|_| invalid("truncated slice header"))?;
    if &header[..4] != MAGIC {
        return Err(invalid("bad slice magic"));
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let position = f64::from_le_bytes(header[12..20].try_into().unwrap());
    let slope = f64::from_le_bytes(header[20..28].try_into().unwrap());
    let intercept = f64::from_le_bytes(header[28..36].try_into().unwrap());
    if rows == 0 || cols == 0 {
        return Err(invalid("zero-sized slice"));
    }
    if !position.is_finite() || !slope.is_finite() || !intercept.is_finite() {
        return Err(invalid("non-finite slice metadata"));
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != rows * cols * 2 {
        return Err(invalid("pixel payload does not match slice dimensions"));
    }
    let pixels: Vec<i16> = payload
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let arr = Array2::from_shape_vec((rows, cols), pixels)
        .map_err(|_| invalid("shape construction failed"))?;
    Ok((arr, position, slope, intercept))
}

/// Sort slices apex-to-base by ascending position. Idempotent; rejects
/// duplicate positions, which would make the ordering ambiguous.
pub fn orient(mut series: RawSeries) -> Result<RawSeries> {
    let mut order: Vec<usize> = (0..series.positions.len()).collect();
    order.sort_by(|&a, &b| {
        series.positions[a]
            .partial_cmp(&series.positions[b])
            .expect("positions are finite")
    });
    let slices = order.iter().map(|&i| series.slices[i].clone()).collect();
    let positions: Vec<f64> = order.iter().map(|&i| series.positions[i]).collect();
    for pair in positions.windows(2) {
        if pair[0] >= pair[1] {
            return Err(XwdError::InvalidSeries {
                path: series.patient_id.clone(),
                reason: format!("duplicate slice position {}", pair[0]),
            });
        }
    }
    series.slices = slices;
    series.positions = positions;
    Ok(series)
}

/// Convert pixels to Hounsfield units: `hu = pixel·slope + intercept`.
pub fn to_hu(series: &RawSeries, label: u8) -> HUVolume {
    let (rows, cols) = series.slices[0].dim();
    let t = series.slices.len();
    let mut voxels = Array3::zeros((t, rows, cols));
    for (k, slice) in series.slices.iter().enumerate() {
        for ((r, c), &pix) in slice.indexed_iter() {
            voxels[[k, r, c]] =
                (pix as f64 * series.rescale_slope + series.rescale_intercept) as f32;
        }
    }
    HUVolume {
        patient_id: series.patient_id.clone(),
        label,
        voxels,
    }
}

/// Write an HU volume as a slice series under `dir` (created if needed),
/// quantizing to integer pixels with slope 1 / intercept −1024.
///
/// Round-tripping through [`load_series`] + [`to_hu`] recovers each voxel
/// within the 0.5 HU quantization step.
pub fn write_series(dir: &Path, volume: &HUVolume, slice_spacing: f64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (t, h, w) = volume.shape();
    let (slope, intercept) = (1.0f64, -1024.0f64);
    for k in 0..t {
        let path = dir.join(format!("slice_{k:04}.slice"));
        let mut out = BufWriter::new(File::create(&path)?);
        out.write_all(MAGIC)?;
        out.write_all(&(h as u32).to_le_bytes())?;
        out.write_all(&(w as u32).to_le_bytes())?;
        out.write_all(&(k as f64 * slice_spacing).to_le_bytes())?;
        out.write_all(&slope.to_le_bytes())?;
        out.write_all(&intercept.to_le_bytes())?;
        for r in 0..h {
            for c in 0..w {
                let hu = volume.voxels[[k, r, c]] as f64;
                let pixel = ((hu - intercept) / slope).round().clamp(-32768.0, 32767.0) as i16;
                out.write_all(&pixel.to_le_bytes())?;
            }
        }
        out.flush()?;
    }
    Ok(())
}

/// Read `labels.tsv` (`patient_id <TAB> label` per line) from a cohort root.
pub fn load_labels(cohort_root: &Path) -> Result<std::collections::BTreeMap<String, u8>> {
    let path = cohort_root.join("labels.tsv");
    let text = std::fs::read_to_string(&path)
        .map_err(|_| series_err(cohort_root, "missing labels.tsv"))?;
    let mut labels = std::collections::BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(id), Some(val)) = (parts.next(), parts.next()) else {
            return Err(series_err(
                cohort_root,
                format!("labels.tsv line {}: expected 'id<TAB>label'", lineno + 1),
            ));
        };
        let label: u8 = val.trim().parse().map_err(|_| {
            series_err(
                cohort_root,
                format!("labels.tsv line {}: label must be 0 or 1", lineno + 1),
            )
        })?;
        if label > 1 {
            return Err(series_err(
                cohort_root,
                format!("labels.tsv line {}: label must be 0 or 1", lineno + 1),
            ));
        }
        labels.insert(id.trim().to_string(), label);
    }
    if labels.is_empty() {
        return Err(series_err(cohort_root, "labels.tsv has no entries"));
    }
    Ok(labels)
}

/// Load every labeled patient series under a cohort root, sorted by id.
pub fn load_cohort(cohort_root: &Path) -> Result<Vec<HUVolume>> {
    let labels = load_labels(cohort_root)?;
    let mut volumes = Vec::with_capacity(labels.len());
    for (id, &label) in &labels {
        let dir = cohort_root.join(id);
        if !dir.is_dir() {
            return Err(series_err(
                cohort_root,
                format!("labels.tsv names '{id}' but no such series directory exists"),
            ));
        }
        let series = load_series(&dir)?;
        volumes.push(to_hu(&series, label));
    }
    Ok(volumes)
}
