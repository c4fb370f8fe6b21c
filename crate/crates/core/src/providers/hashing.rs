use crate::embedding::Embedding;

use super::{normalize_upstream, Encoder, ProviderError, ProviderKind};

/// Offline encoder: signed feature hashing of lowercased word unigrams and
/// bigrams, L2-normalized. Texts sharing many words land close together.
#[derive(Debug, Clone)]
pub struct HashingEncoder {
    dim: usize,
    seed: u64,
    name: String,
}

/// Builds a [`HashingEncoder`]. `dim` below 8 is raised to 8.
pub fn deterministic_test_encoder(dim: usize, seed: u64) -> HashingEncoder {
    HashingEncoder::new(dim, seed)
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

impl HashingEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let dim = dim.max(8);
        HashingEncoder {
            dim,
            seed,
            name: format!("hashing-d{dim}-s{seed}"),
        }
    }

    pub fn kind(&self) -> ProviderKind {
        ProviderKind::Local
    }

    fn hash(&self, feature: &str) -> u64 {
        // FNV-1a over seed bytes then feature bytes, finished with splitmix64
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.seed.to_le_bytes().iter().chain(feature.as_bytes()) {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^ (h >> 31)
    }

    fn add(&self, acc: &mut [f64], feature: &str) {
        let h = self.hash(feature);
        let bucket = (h % self.dim as u64) as usize;
        acc[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    }
}

impl Encoder for HashingEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Embedding, ProviderError> {
        if text.trim().is_empty() {
            return Err(ProviderError::EmptyInput);
        }
        let tokens = tokenize(text);
        let mut acc = vec![0.0; self.dim];
        if tokens.is_empty() {
            self.add(&mut acc, text.trim());
        } else {
            for t in &tokens {
                self.add(&mut acc, t);
            }
            for w in tokens.windows(2) {
                self.add(&mut acc, &format!("{} {}", w[0], w[1]));
            }
        }
        if acc.iter().all(|v| *v == 0.0) {
            // every feature cancelled out; fall back to a fixed bucket
            acc[(self.hash(text) % self.dim as u64) as usize] = 1.0;
        }
        normalize_upstream(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine_similarity;
    use proptest::prelude::*;

    #[test]
    fn deterministic_per_dim_and_seed() {
        let a = deterministic_test_encoder(64, 3);
        let b = deterministic_test_encoder(64, 3);
        let x = a.encode("hello").unwrap();
        assert_eq!(x, a.encode("hello").unwrap());
        assert_eq!(x, b.encode("hello").unwrap());
        assert!((cosine_similarity(&a.encode("a b c").unwrap(), &a.encode("a b c").unwrap()).unwrap() - 1.0).abs() < 1e-12);
        assert_ne!(x, deterministic_test_encoder(64, 4).encode("hello").unwrap());
    }

    #[test]
    fn shared_words_are_closer() {
        for seed in 0..20 {
            let enc = deterministic_test_encoder(128, seed);
            let q = enc.encode("sad crying grief").unwrap();
            let near = enc.encode("sad crying tears").unwrap();
            let far = enc.encode("stock market report").unwrap();
            let cn = cosine_similarity(&q, &near).unwrap();
            let cf = cosine_similarity(&q, &far).unwrap();
            assert!(cn > cf, "seed {seed}: {cn} <= {cf}");
        }
    }

    #[test]
    fn tokenize_lowercases_and_splits() {
        assert_eq!(tokenize("I can't SLEEP!"), ["i", "can", "t", "sleep"]);
    }

    #[test]
    fn punctuation_only_still_encodes() {
        let enc = deterministic_test_encoder(16, 0);
        assert!(enc.encode("!!!").unwrap().is_unit());
    }

    proptest! {
        #[test]
        fn output_is_unit_norm(text in "[a-zA-Z ,.!?']{1,80}", dim in 8usize..300) {
            prop_assume!(!text.trim().is_empty());
            let e = deterministic_test_encoder(dim, 1).encode(&text).unwrap();
            prop_assert_eq!(e.dim(), dim);
            prop_assert!((e.norm() - 1.0).abs() <= 1e-6);
        }
    }
}
