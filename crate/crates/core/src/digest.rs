//! Stable hashing used for ids, sampling and seeded shuffles.

use std::io::Read;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// 64-bit hash of `(seed, key)`, stable across platforms and releases.
pub fn seeded_hash(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let out = h.finalize();
    u64::from_be_bytes(out[..8].try_into().unwrap())
}

/// A ChaCha stream keyed by `(seed, key)`.
pub fn seeded_rng(seed: u64, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seeded_hash(seed, key))
}

/// Hex SHA-256 of the NUL-joined parts.
pub fn sha256_hex(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            h.update([0u8]);
        }
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable() {
        // frozen: changing this value changes every sampled dataset
        assert_eq!(seeded_hash(7, "abc"), 6116423410878599780);
        assert_ne!(seeded_hash(7, "abc"), seeded_hash(8, "abc"));
        assert_eq!(sha256_hex(&["a", "b"]), sha256_hex(&["a", "b"]));
        assert_ne!(sha256_hex(&["a", "b"]), sha256_hex(&["ab"]));
    }
}
