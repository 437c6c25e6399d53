//! Small shared helpers.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Short stable hash of a serializable config, for provenance records.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let text = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}

/// Appends a literal suffix to a path without `with_extension`'s
/// replace-the-last-extension semantics (stems may contain dots).
pub fn with_suffix(path: &std::path::Path, suffix: &str) -> std::path::PathBuf {
    let mut s = path.to_path_buf().into_os_string();
    s.push(suffix);
    std::path::PathBuf::from(s)
}

/// Decorrelated per-replicate seed from a base seed and two stream indices
/// (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut x = base
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    #[test]
    fn hash_is_stable_and_input_sensitive() {
        let a = super::config_hash(&("scan", 7, 1.5));
        let b = super::config_hash(&("scan", 7, 1.5));
        let c = super::config_hash(&("scan", 8, 1.5));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 16);
    }
}
