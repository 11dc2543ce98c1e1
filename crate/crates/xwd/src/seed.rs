//! Deterministic seed derivation and content hashing.
//!
//! Every stochastic component (phantom synthesis, splits, weight init, batch
//! shuffling, bootstrap resampling) draws from a ChaCha generator whose seed
//! is *derived by name* from the experiment's root seed. Derivation is a
//! SHA-256 of `"xwd:<stage>:<name>:"` followed by the little-endian root
//! seed, truncated to the first eight bytes. Because seeds depend only on
//! names and never on execution order, stages can be re-run or skipped
//! without shifting any other stage's randomness.

use std::io::Read;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a named sub-seed from the experiment root seed.
///
/// The same `(root_seed, stage, name)` triple always yields the same seed;
/// distinct names yield independent streams for all practical purposes.
pub fn derive_seed(root_seed: u64, stage: &str, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"xwd:");
    hasher.update(stage.as_bytes());
    hasher.update(b":");
    hasher.update(name.as_bytes());
    hasher.update(b":");
    hasher.update(root_seed.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// ChaCha generator seeded by [`derive_seed`].
pub fn rng_for(root_seed: u64, stage: &str, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root_seed, stage, name))
}

/// ChaCha generator from a raw seed (used when the caller already derived one).
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Lowercase hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex(&hasher.finalize())
}

/// Lowercase hex SHA-256 of a file's contents, streamed.
pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
