use super::GatewayError;

pub const DEFAULT_DIMENSION: usize = 256;

/// Source of unit-norm text embeddings.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError>;
    fn dimension(&self) -> usize;
}

/// Offline hashing embedder: lowercased alphanumeric tokens are hashed into
/// `dimension` buckets, counted, and L2-normalized. Token order is irrelevant.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    dimension: usize,
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION)
    }
}

impl Embedder for HashingEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        Ok(hashing_embed(text, self.dimension))
    }

    fn dimension(&self) -> usize {
        self.dimension
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn hashing_embed(text: &str, dimension: usize) -> Vec<f64> {
    let mut v = vec![0.0; dimension];
    let lower = text.to_lowercase();
    for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        v[(fnv1a(token.as_bytes()) % dimension as u64) as usize] += 1.0;
    }
    normalize(&mut v);
    v
}

/// Scales `v` to unit L2 norm; the zero vector is left unchanged.
pub fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Cosine similarity, defined as 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, GatewayError> {
    if a.len() != b.len() {
        return Err(GatewayError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_is_zero_vector() {
        assert!(hashing_embed("", 16).iter().all(|x| *x == 0.0));
        assert!(hashing_embed(" ,;- ", 16).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn nonempty_text_has_unit_norm() {
        let v = hashing_embed("travel plan", 256);
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn cosine_degenerate_and_basis_cases() {
        let e1 = [1.0, 0.0, 0.0];
        let e2 = [0.0, 1.0, 0.0];
        assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
        assert_eq!(cosine(&e1, &e1).unwrap(), 1.0);
        assert_eq!(cosine(&[0.0; 3], &e1).unwrap(), 0.0);
        assert!(matches!(
            cosine(&e1, &[1.0]),
            Err(GatewayError::DimensionMismatch { left: 3, right: 1 })
        ));
    }

    proptest! {
        #[test]
        fn token_order_does_not_matter(words in proptest::collection::vec("[a-z]{1,6}", 1..8), seed in any::<u64>()) {
            let mut shuffled = words.clone();
            let n = shuffled.len();
            for i in (1..n).rev() {
                let j = ((seed.wrapping_mul(i as u64 + 7)) % (i as u64 + 1)) as usize;
                shuffled.swap(i, j);
            }
            prop_assert_eq!(hashing_embed(&words.join(" "), 32), hashing_embed(&shuffled.join("  "), 32));
        }

        #[test]
        fn cosine_is_symmetric(a in proptest::collection::vec(-5.0f64..5.0, 6), b in proptest::collection::vec(-5.0f64..5.0, 6)) {
            prop_assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
        }

        #[test]
        fn self_cosine_of_unit_vector_is_one(words in "[a-z ]{1,40}") {
            let v = hashing_embed(&words, 64);
            if v.iter().any(|x| *x != 0.0) {
                prop_assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }
}
