/// Deterministic text encoder with a fixed output dimension.
pub trait TextEmbedder: Send + Sync {
    /// Identifier stored in checkpoint headers.
    fn name(&self) -> &str;
    fn version(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f32>;

    /// `name@version`, the form recorded in checkpoints.
    fn id(&self) -> String {
        format!("{}@{}", self.name(), self.version())
    }
}

/// Signed feature hashing of character trigrams into `dim` buckets,
/// L2-normalized.
///
/// Text is lowercased and padded with one space on each side before the
/// trigrams are taken; each trigram is hashed with 64-bit FNV-1a over its
/// UTF-8 bytes, the low bits choose the bucket and bit 63 the sign. The
/// result depends only on the input string, never on the platform.
#[derive(Clone, Debug)]
pub struct HashingEmbedder {
    dim: usize,
}

pub const DEFAULT_TEXT_DIM: usize = 384;

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashingEmbedder { dim }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder::new(DEFAULT_TEXT_DIM)
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

impl TextEmbedder for HashingEmbedder {
    fn name(&self) -> &str {
        "hash-trigram"
    }

    fn version(&self) -> &str {
        "1"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f32> {
        let mut acc = vec![0f64; self.dim];
        let chars: Vec<char> = std::iter::once(' ')
            .chain(text.chars().flat_map(char::to_lowercase))
            .chain(std::iter::once(' '))
            .collect();
        if chars.len() > 2 && text.chars().any(|c| !c.is_whitespace()) {
            let mut buf = String::with_capacity(12);
            for gram in chars.windows(3) {
                buf.clear();
                buf.extend(gram);
                let h = fnv1a(buf.as_bytes());
                let bucket = (h % self.dim as u64) as usize;
                acc[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter().map(|v| (v / norm) as f32).collect()
        } else {
            vec![0.0; self.dim]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_dim_unit_norm_and_deterministic() {
        let e = HashingEmbedder::default();
        let a = e.embed("price of product");
        assert_eq!(a.len(), 384);
        let norm: f64 = a.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(a, e.embed("price of product"));
        assert_eq!(a, e.embed("PRICE of Product"));
        assert_ne!(a, e.embed("age of user"));
    }

    #[test]
    fn empty_text_is_zero_vector() {
        let e = HashingEmbedder::new(16);
        assert!(e.embed("").iter().all(|&v| v == 0.0));
        assert!(e.embed("   ").iter().all(|&v| v == 0.0));
        assert!(e.embed("a").iter().any(|&v| v != 0.0));
    }

    #[test]
    fn known_bucket_layout_is_stable() {
        // FNV-1a of " ab" and "ab " computed independently of the embedder.
        let h1 = fnv1a(b" ab");
        let h2 = fnv1a(b"ab ");
        let e = HashingEmbedder::new(7);
        let v = e.embed("ab");
        let mut expected = [0f64; 7];
        expected[(h1 % 7) as usize] += if h1 >> 63 == 1 { -1.0 } else { 1.0 };
        expected[(h2 % 7) as usize] += if h2 >> 63 == 1 { -1.0 } else { 1.0 };
        let n = expected.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (got, want) in v.iter().zip(expected) {
            assert!((f64::from(*got) - want / n).abs() < 1e-7);
        }
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
