//! Platform-stable hashing helpers built on SHA-256.

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hashes length-prefixed parts, so `["ab","c"]` and `["a","bc"]` differ.
pub fn hash_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

/// First eight bytes of [`hash_parts`] as a little-endian `u64`.
pub fn hash_u64(parts: &[&[u8]]) -> u64 {
    let d = hash_parts(parts);
    u64::from_le_bytes(d[..8].try_into().expect("32-byte digest"))
}

/// Maps a hash to `[0, 1)` using the top 53 bits.
pub fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn parts_are_length_prefixed() {
        assert_ne!(hash_u64(&[b"ab", b"c"]), hash_u64(&[b"a", b"bc"]));
    }

    #[test]
    fn unit_interval_bounds() {
        assert_eq!(unit_interval(0), 0.0);
        assert!(unit_interval(u64::MAX) < 1.0);
    }
}
