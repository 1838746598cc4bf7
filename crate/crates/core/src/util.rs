use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Derives an independent 64-bit seed from a base seed and a stream tag
/// (SplitMix64 finalizer over the combined words).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed derived from a string key (doc ids, context labels).
pub fn seed_for(base: u64, key: &str) -> u64 {
    let digest = Sha256::digest(key.as_bytes());
    let mut w = [0u8; 8];
    w.copy_from_slice(&digest[..8]);
    derive_seed(base, u64::from_le_bytes(w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(seed_for(3, "tr-00001"), seed_for(3, "tr-00001"));
        assert_ne!(seed_for(3, "tr-00001"), seed_for(3, "tr-00002"));
    }
}
