//! Flat binary volume files.
//!
//! Layout: 16-byte header — magic `XWD1`, then T, H, W as little-endian
//! 32-bit unsigned integers — followed by T·H·W little-endian 32-bit floats
//! in C order (T, H, W). Used for per-(patient, window) arrays and exported
//! attention maps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;

use crate::error::XwdError;
use crate::Result;

const MAGIC: &[u8; 4] = b"XWD1";

/// Write a volume; the parent directory must exist.
pub fn write_vol(path: &Path, volume: &Array3<f32>) -> Result<()> {
    let (t, h, w) = volume.dim();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(t as u32).to_le_bytes())?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    // as_standard_layout is a no-op for freshly built arrays but guards
    // against callers handing in a transposed view.
    for &v in volume.as_standard_layout().iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Read a volume, validating magic, dimensions, and payload length.
pub fn read_vol(path: &Path) -> Result<Array3<f32>> {
    let display = path.display().to_string();
    let invalid = |reason: &str| XwdError::InvalidVolume {
        path: display.clone(),
        reason: reason.to_string(),
    };

    let mut reader = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    reader
        .read_exact(&mut header)
        .map_err(|_| invalid("truncated header"))?;
    if &header[..4] != MAGIC {
        return Err(invalid("bad magic"));
    }
    let t = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    if t == 0 || h == 0 || w == 0 {
        return Err(invalid("zero-sized dimension"));
    }
    let n = t
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| invalid("dimension overflow"))?;

    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != n * 4 {
        return Err(invalid("payload length does not match header dimensions"));
    }
    let mut data = Vec::with_capacity(n);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Array3::from_shape_vec((t, h, w), data)
        .map_err(|_| invalid("shape construction failed"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.vol");
        let vol =
            Array3::from_shape_fn((3, 4, 5), |(t, h, w)| (t * 100 + h * 10 + w) as f32 * 0.25);
        write_vol(&path, &vol).unwrap();
        let back = read_vol(&path).unwrap();
        assert_eq!(vol, back);
    }

    #[test]
    fn header_is_sixteen_bytes_with_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.vol");
        write_vol(&path, &Array3::zeros((2, 2, 2))).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"XWD1");
        assert_eq!(bytes.len(), 16 + 2 * 2 * 2 * 4);
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
    }

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vol");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            read_vol(&path),
            Err(XwdError::InvalidVolume { .. })
        ));

        let path2 = dir.path().join("trunc.vol");
        write_vol(&path2, &Array3::zeros((2, 2, 2))).unwrap();
        let bytes = std::fs::read(&path2).unwrap();
        std::fs::write(&path2, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            read_vol(&path2),
            Err(XwdError::InvalidVolume { .. })
        ));
    }
}
