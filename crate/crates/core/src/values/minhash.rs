//! MinHash signatures over padded character shingles, and LSH banding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const MERSENNE_61: u64 = (1 << 61) - 1;
const SEED: u64 = 0x5EED_F00D;
const PAD_START: char = '\u{2}';
const PAD_END: char = '\u{3}';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LshParams {
    pub num_perm: usize,
    pub bands: usize,
    pub rows: usize,
    pub shingle: usize,
}

impl Default for LshParams {
    fn default() -> Self {
        Self {
            num_perm: 128,
            bands: 128,
            rows: 1,
            shingle: 3,
        }
    }
}

impl LshParams {
    pub fn banded(bands: usize, rows: usize) -> Self {
        Self {
            num_perm: bands * rows,
            bands,
            rows,
            ..Self::default()
        }
    }

    pub fn is_valid(&self) -> bool {
        self.num_perm > 0 && self.shingle > 0 && self.bands * self.rows == self.num_perm
    }
}

/// Character n-grams of `text` for every n in `1..=k`, each padded with
/// `n - 1` markers at both ends and tagged with its size. Any two strings
/// sharing a character share a shingle.
pub fn shingles(text: &str, k: usize) -> Vec<String> {
    let mut out = Vec::new();
    for n in 1..=k {
        let padded: Vec<char> = std::iter::repeat_n(PAD_START, n - 1)
            .chain(text.chars())
            .chain(std::iter::repeat_n(PAD_END, n - 1))
            .collect();
        for w in padded.windows(n) {
            let mut s = String::with_capacity(n + 1);
            s.push(char::from(b'0' + (n % 10) as u8));
            s.extend(w);
            out.push(s);
        }
    }
    out.sort();
    out.dedup();
    out
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct MinHasher {
    params: LshParams,
    coeffs: Vec<(u64, u64)>,
}

impl MinHasher {
    pub fn new(params: LshParams) -> Self {
        assert!(params.is_valid(), "invalid LSH parameters {params:?}");
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        let coeffs = (0..params.num_perm)
            .map(|_| {
                (
                    rng.random_range(1..MERSENNE_61),
                    rng.random_range(0..MERSENNE_61),
                )
            })
            .collect();
        Self { params, coeffs }
    }

    pub fn params(&self) -> LshParams {
        self.params
    }

    pub fn signature(&self, normalized: &str) -> Vec<u64> {
        let hashes: Vec<u64> = shingles(normalized, self.params.shingle)
            .iter()
            .map(|s| fnv1a(s.as_bytes()) % MERSENNE_61)
            .collect();
        self.coeffs
            .iter()
            .map(|&(a, b)| {
                hashes
                    .iter()
                    .map(|&h| ((u128::from(a) * u128::from(h) + u128::from(b)) % u128::from(MERSENNE_61)) as u64)
                    .min()
                    .unwrap_or(u64::MAX)
            })
            .collect()
    }

    /// One bucket key per band.
    pub fn band_keys(&self, signature: &[u64]) -> Vec<u64> {
        signature
            .chunks(self.params.rows)
            .enumerate()
            .map(|(band, rows)| {
                let mut bytes = Vec::with_capacity(8 * (rows.len() + 1));
                bytes.extend_from_slice(&(band as u64).to_le_bytes());
                for r in rows {
                    bytes.extend_from_slice(&r.to_le_bytes());
                }
                fnv1a(&bytes)
            })
            .collect()
    }
}

/// Fraction of equal signature positions, an estimate of Jaccard similarity.
pub fn estimated_jaccard(a: &[u64], b: &[u64]) -> f64 {
    if a.is_empty() || a.len() != b.len() {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}
