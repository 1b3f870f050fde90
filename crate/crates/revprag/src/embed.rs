//! Deterministic hashed character n-gram text encoders and similarity
//! functions, standing in for dense retriever encoders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Similarity metric between embedding vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Dot,
    Cosine,
}

/// Encoder role. With `shared_encoders` unset the query and passage encoders
/// hash into disjoint streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Query,
    Passage,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EmbedConfig {
    /// Embedding dimensionality.
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Character n-gram length.
    #[serde(default = "default_ngram")]
    pub ngram: usize,
    #[serde(default)]
    pub metric: Metric,
    /// L2-normalize nonzero vectors after hashing.
    #[serde(default = "default_true")]
    pub l2norm: bool,
    /// Use one encoder for both queries and passages.
    #[serde(default = "default_true")]
    pub shared_encoders: bool,
}

fn default_dim() -> usize {
    256
}
fn default_ngram() -> usize {
    3
}
fn default_true() -> bool {
    true
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            dim: default_dim(),
            ngram: default_ngram(),
            metric: Metric::Dot,
            l2norm: true,
            shared_encoders: true,
        }
    }
}

pub type EmbeddingVector = Vec<f64>;

/// FNV-1a 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Encode text as a signed hashed bag of character n-grams. Total function:
/// text shorter than the n-gram length yields the zero vector.
pub fn encode(text: &str, role: Role, config: &EmbedConfig) -> EmbeddingVector {
    let mut v = vec![0.0f64; config.dim];
    let chars: Vec<char> = text.chars().collect();
    if chars.len() >= config.ngram && config.dim > 0 {
        let salt: &[u8] = if config.shared_encoders {
            b""
        } else {
            match role {
                Role::Query => b"q:",
                Role::Passage => b"p:",
            }
        };
        let mut buf = Vec::new();
        for window in chars.windows(config.ngram) {
            buf.clear();
            buf.extend_from_slice(salt);
            let mut tmp = [0u8; 4];
            for &c in window {
                buf.extend_from_slice(c.encode_utf8(&mut tmp).as_bytes());
            }
            let h = fnv1a64(&buf);
            let bucket = ((h >> 1) % config.dim as u64) as usize;
            let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
    }
    if config.l2norm {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in v.iter_mut() {
                *x /= norm;
            }
        }
    }
    v
}

/// Similarity between two equal-dimension vectors. Cosine with a zero vector
/// is defined as 0.
pub fn sim(a: &[f64], b: &[f64], metric: Metric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("dim {}", a.len()),
            got: format!("dim {}", b.len()),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    match metric {
        Metric::Dot => Ok(dot),
        Metric::Cosine => {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                eprintln!("warning: cosine similarity with a zero vector, returning 0");
                return Ok(0.0);
            }
            Ok(dot / (na * nb))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_zero_vector() {
        let cfg = EmbedConfig::default();
        let v = encode("", Role::Query, &cfg);
        assert_eq!(v, vec![0.0; cfg.dim]);
    }

    #[test]
    fn encode_deterministic() {
        let cfg = EmbedConfig::default();
        let a = encode("the color of bazomi is red .", Role::Passage, &cfg);
        let b = encode("the color of bazomi is red .", Role::Passage, &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn single_ngram_matches_reference_hash() {
        // independent FNV-1a reference, written out longhand
        let mut h: u64 = 14695981039346656037;
        for &b in b"abc" {
            h ^= b as u64;
            h = h.wrapping_mul(1099511628211);
        }
        let bucket = ((h >> 1) % 8) as usize;
        let sign = if h & 1 == 0 { 1.0 } else { -1.0 };

        let cfg = EmbedConfig {
            dim: 8,
            ngram: 3,
            l2norm: false,
            ..EmbedConfig::default()
        };
        let v = encode("abc", Role::Query, &cfg);
        assert_eq!(v.iter().filter(|x| **x != 0.0).count(), 1);
        assert_eq!(v[bucket], sign);
    }

    #[test]
    fn dot_examples() {
        assert_eq!(sim(&[1.0, 0.0], &[0.0, 1.0], Metric::Dot).unwrap(), 0.0);
        assert_eq!(sim(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], Metric::Dot).unwrap(), 32.0);
    }

    #[test]
    fn cosine_parallel() {
        let c = sim(&[2.0, 0.0], &[1.0, 0.0], Metric::Cosine).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_vector_is_zero() {
        assert_eq!(sim(&[0.0, 0.0], &[1.0, 2.0], Metric::Cosine).unwrap(), 0.0);
    }

    #[test]
    fn dim_mismatch_is_error() {
        assert!(sim(&[1.0], &[1.0, 2.0], Metric::Dot).is_err());
    }

    #[test]
    fn collision_rate_below_one_percent() {
        let corpus = crate::corpus::gen_synthetic(600, 0.5, 42).unwrap();
        let cfg = EmbedConfig::default();
        let mut vecs: Vec<Vec<u64>> = corpus
            .documents
            .iter()
            .map(|d| {
                encode(&d.text, Role::Passage, &cfg)
                    .iter()
                    .map(|x| x.to_bits())
                    .collect()
            })
            .collect();
        let texts: std::collections::HashSet<&str> =
            corpus.documents.iter().map(|d| d.text.as_str()).collect();
        let n_distinct_texts = texts.len();
        vecs.sort();
        vecs.dedup();
        let collisions = n_distinct_texts - vecs.len().min(n_distinct_texts);
        assert!(
            (collisions as f64) < 0.01 * n_distinct_texts as f64,
            "{collisions} collisions over {n_distinct_texts}"
        );
    }

    proptest! {
        #[test]
        fn sim_symmetry(a in proptest::collection::vec(-10.0f64..10.0, 8),
                        b in proptest::collection::vec(-10.0f64..10.0, 8)) {
            for m in [Metric::Dot, Metric::Cosine] {
                let x = sim(&a, &b, m).unwrap();
                let y = sim(&b, &a, m).unwrap();
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn dot_linearity_cosine_scale_invariance(
            a in proptest::collection::vec(-10.0f64..10.0, 8),
            b in proptest::collection::vec(-10.0f64..10.0, 8),
            c in 0.1f64..10.0,
        ) {
            let scaled: Vec<f64> = b.iter().map(|x| c * x).collect();
            let d1 = sim(&a, &scaled, Metric::Dot).unwrap();
            let d2 = c * sim(&a, &b, Metric::Dot).unwrap();
            prop_assert!((d1 - d2).abs() < 1e-9 * (1.0 + d2.abs()));

            let norm_a: f64 = a.iter().map(|x| x * x).sum::<f64>();
            prop_assume!(norm_a > 1e-6);
            let ca: Vec<f64> = a.iter().map(|x| c * x).collect();
            let cos = sim(&a, &ca, Metric::Cosine).unwrap();
            prop_assert!((cos - 1.0).abs() < 1e-9);
        }
    }
}
