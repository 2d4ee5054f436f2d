//! Stable 64-bit mixing used for item identities and derived seeds.
//!
//! The values produced here end up in files and in proxy-label decisions, so
//! they must not depend on the platform or the Rust release.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a word sequence.
pub fn hash_words(words: &[u64]) -> u64 {
    let mut h = mix64(words.len() as u64);
    for &w in words {
        h = mix64(h ^ mix64(w));
    }
    h
}

/// Maps a hash to a uniform value in `[0, 1)` using its top 53 bits.
pub fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_matters() {
        assert_ne!(hash_words(&[1, 2]), hash_words(&[2, 1]));
        assert_ne!(hash_words(&[0]), hash_words(&[0, 0]));
    }

    #[test]
    fn unit_interval_range() {
        assert_eq!(unit_interval(0), 0.0);
        assert!(unit_interval(u64::MAX) < 1.0);
    }

    #[test]
    fn unit_interval_is_roughly_uniform() {
        let n = 20_000u64;
        let below = (0..n)
            .filter(|&i| unit_interval(hash_words(&[i])) < 0.25)
            .count() as f64;
        let p = below / n as f64;
        assert!((p - 0.25).abs() < 0.02, "{p}");
    }
}
