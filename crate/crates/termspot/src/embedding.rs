//! Term embeddings: the pluggable map from phoneme sequences to unit vectors.
//!
//! The provided implementation is a deterministic signed-hash bag of phoneme
//! n-grams (orders 1 and 2 with boundary markers) accumulated into K buckets
//! and L2-normalized. Any other map producing unit vectors can stand behind
//! the [`TermEmbedder`] trait.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered set of phoneme symbols.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeInventory {
    symbols: Vec<String>,
}

impl PhonemeInventory {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::InvalidInventory);
        }
        let mut seen = std::collections::HashSet::new();
        for s in &symbols {
            if !seen.insert(s.as_str()) {
                return Err(Error::InvalidInventory);
            }
        }
        Ok(Self { symbols })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.symbols.iter().any(|s| s == symbol)
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }
}

/// A term: identifier plus one or more pronunciations (phoneme sequences).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Term {
    pub id: String,
    pub prons: Vec<Vec<String>>,
}

impl Term {
    pub fn new(id: impl Into<String>, prons: Vec<Vec<String>>) -> Self {
        Self {
            id: id.into(),
            prons,
        }
    }

    pub fn single(id: impl Into<String>, pron: Vec<String>) -> Self {
        Self::new(id, vec![pron])
    }

    pub fn validate(&self, inventory: &PhonemeInventory) -> Result<()> {
        if self.prons.is_empty() || self.prons.iter().any(|p| p.is_empty()) {
            return Err(Error::EmptyPhonemeSequence);
        }
        for pron in &self.prons {
            for p in pron {
                if !inventory.contains(p) {
                    return Err(Error::UnknownPhoneme(p.clone()));
                }
            }
        }
        Ok(())
    }
}

/// A K-dimensional unit vector representing a term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermEmbedding {
    values: Vec<f64>,
}

impl TermEmbedding {
    /// Normalize `values` to unit L2 norm. Fails on near-zero norm.
    /// Idempotent: a vector already unit within floating-point error is
    /// returned unchanged, so repeated normalization is exact.
    pub fn unit(mut values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::DegenerateEmbedding);
        }
        if (norm - 1.0).abs() > 1e-12 {
            for v in &mut values {
                *v /= norm;
            }
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Cosine similarity between two nonzero vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    debug_assert_eq!(a.len(), b.len());
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na < 1e-24 || nb < 1e-24 {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Anything that maps phoneme sequences to unit embeddings.
pub trait TermEmbedder {
    fn dim(&self) -> usize;

    fn embed_sequence(&self, seq: &[String]) -> Result<TermEmbedding>;

    /// Term embedding: the arithmetic mean over all pronunciations,
    /// re-normalized to unit norm.
    fn embed_term(&self, term: &Term) -> Result<TermEmbedding> {
        if term.prons.is_empty() {
            return Err(Error::EmptyPhonemeSequence);
        }
        let mut acc = vec![0.0; self.dim()];
        for pron in &term.prons {
            let e = self.embed_sequence(pron)?;
            for (a, v) in acc.iter_mut().zip(e.as_slice()) {
                *a += v;
            }
        }
        let n = term.prons.len() as f64;
        for a in &mut acc {
            *a /= n;
        }
        TermEmbedding::unit(acc)
    }
}

/// Deterministic signed-hash n-gram embedder.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    inventory: PhonemeInventory,
    dim: usize,
    seed: u64,
}

const BOUNDARY_START: &str = "^";
const BOUNDARY_END: &str = "$";

// unigram content carries more weight than bigram order: unigrams of an
// unseen term are individually familiar, so this keeps embeddings of
// unseen terms predictable from their parts
const UNIGRAM_WEIGHT: f64 = 2.0;
const BIGRAM_WEIGHT: f64 = 1.0;

impl HashEmbedder {
    pub fn new(inventory: PhonemeInventory, dim: usize, seed: u64) -> Result<Self> {
        if dim < 8 {
            return Err(Error::EmbeddingDimTooSmall(dim));
        }
        Ok(Self {
            inventory,
            dim,
            seed,
        })
    }

    pub fn inventory(&self) -> &PhonemeInventory {
        &self.inventory
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn accumulate(&self, acc: &mut [f64], gram: &[&str], weight: f64) {
        let mut h = hash_seeded(self.seed, gram);
        let bucket = (h % self.dim as u64) as usize;
        h = splitmix64(h);
        let sign = if h & 1 == 0 { weight } else { -weight };
        acc[bucket] += sign;
    }
}

impl TermEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_sequence(&self, seq: &[String]) -> Result<TermEmbedding> {
        if seq.is_empty() {
            return Err(Error::EmptyPhonemeSequence);
        }
        for p in seq {
            if !self.inventory.contains(p) {
                return Err(Error::UnknownPhoneme(p.clone()));
            }
        }
        let mut acc = vec![0.0; self.dim];
        for p in seq {
            self.accumulate(&mut acc, &[p], UNIGRAM_WEIGHT);
        }
        let mut prev = BOUNDARY_START;
        for p in seq {
            self.accumulate(&mut acc, &[prev, p], BIGRAM_WEIGHT);
            prev = p;
        }
        self.accumulate(&mut acc, &[prev, BOUNDARY_END], BIGRAM_WEIGHT);
        TermEmbedding::unit(acc)
    }
}

/// FNV-1a over the gram tokens, mixed with splitmix64. Stable across
/// platforms and releases, unlike the std hasher.
fn hash_seeded(seed: u64, tokens: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ seed.wrapping_mul(0x9e3779b97f4a7c15);
    for t in tokens {
        for b in t.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        // token separator so ["ab"] and ["a","b"] differ
        h ^= 0x1f;
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(h)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Embeddings for a whole lexicon, keyed by term id.
pub type EmbeddingTable = BTreeMap<String, TermEmbedding>;

pub fn build_embedding_table(
    terms: &[Term],
    embedder: &dyn TermEmbedder,
) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::new();
    for term in terms {
        table.insert(term.id.clone(), embedder.embed_term(term)?);
    }
    Ok(table)
}

/// Write a lexicon as JSON Lines: one `{"id": ..., "prons": [...]}` per line.
pub fn write_lexicon(path: &Path, terms: &[Term]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for term in terms {
        serde_json::to_writer(&mut f, term)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_lexicon(path: &Path) -> Result<Vec<Term>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut terms = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        terms.push(serde_json::from_str(&line)?);
    }
    Ok(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::IndexedRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inventory() -> PhonemeInventory {
        PhonemeInventory::new(
            ["k", "ae", "t", "a", "b", "s", "ih", "n"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap()
    }

    fn seq(s: &str) -> Vec<String> {
        s.split_whitespace().map(|p| p.to_string()).collect()
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let e = HashEmbedder::new(inventory(), 64, 1).unwrap();
        let a = e.embed_sequence(&seq("k ae t")).unwrap();
        let b = e.embed_sequence(&seq("k ae t")).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert!((cosine(a.as_slice(), b.as_slice()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors_on_bad_input() {
        let e = HashEmbedder::new(inventory(), 64, 1).unwrap();
        assert!(matches!(
            e.embed_sequence(&[]),
            Err(Error::EmptyPhonemeSequence)
        ));
        assert!(matches!(
            e.embed_sequence(&seq("k zz")),
            Err(Error::UnknownPhoneme(_))
        ));
        assert!(matches!(
            HashEmbedder::new(inventory(), 4, 1),
            Err(Error::EmbeddingDimTooSmall(4))
        ));
    }

    #[test]
    fn order_sensitive() {
        let e = HashEmbedder::new(inventory(), 64, 1).unwrap();
        let ab = e.embed_sequence(&seq("a b")).unwrap();
        let ba = e.embed_sequence(&seq("b a")).unwrap();
        assert_ne!(ab, ba);
    }

    #[test]
    fn distinct_pair_cosine_spread() {
        // Regression bound computed once with this hash at K=64, seed 1:
        // observed mean |cos| 0.1634, max |cos| 0.5401 over these 100 pairs.
        let inv = PhonemeInventory::new((0..40).map(|i| format!("p{i:02}")).collect()).unwrap();
        let e = HashEmbedder::new(inv.clone(), 64, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut abs_cos = Vec::new();
        while abs_cos.len() < 100 {
            let draw = |rng: &mut ChaCha8Rng| -> Vec<String> {
                let len = rng.random_range(3..=8);
                (0..len)
                    .map(|_| inv.symbols().choose(rng).unwrap().clone())
                    .collect()
            };
            let s1 = draw(&mut rng);
            let s2 = draw(&mut rng);
            if s1 == s2 {
                continue;
            }
            let c = cosine(
                e.embed_sequence(&s1).unwrap().as_slice(),
                e.embed_sequence(&s2).unwrap().as_slice(),
            )
            .unwrap();
            abs_cos.push(c.abs());
        }
        let mean = abs_cos.iter().sum::<f64>() / abs_cos.len() as f64;
        let max = abs_cos.iter().cloned().fold(0.0, f64::max);
        assert!(mean < 0.5, "mean |cos| {mean}");
        assert!(max < 0.999, "max |cos| {max}");
        // frozen regression bounds (slightly above the observed values)
        assert!(mean < 0.22, "mean |cos| regressed: {mean}");
        assert!(max < 0.62, "max |cos| regressed: {max}");
    }

    #[test]
    fn pronunciation_averaging() {
        let e = HashEmbedder::new(inventory(), 64, 1).unwrap();
        let single = Term::single("cat", seq("k ae t"));
        let double = Term::new("cat", vec![seq("k ae t"), seq("k ae t")]);
        let a = e.embed_term(&single).unwrap();
        let b = e.embed_term(&double).unwrap();
        assert_eq!(a, e.embed_sequence(&seq("k ae t")).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn orthogonal_pronunciations_average_at_45_degrees() {
        // Two orthogonal unit vectors u, v: mean renormalizes to (u+v)/sqrt(2).
        struct TwoOrtho;
        impl TermEmbedder for TwoOrtho {
            fn dim(&self) -> usize {
                2
            }
            fn embed_sequence(&self, seq: &[String]) -> Result<TermEmbedding> {
                match seq[0].as_str() {
                    "u" => TermEmbedding::unit(vec![1.0, 0.0]),
                    _ => TermEmbedding::unit(vec![0.0, 1.0]),
                }
            }
        }
        let e = TwoOrtho;
        let t = Term::new("x", vec![vec!["u".into()], vec!["v".into()]]);
        let emb = e.embed_term(&t).unwrap();
        let u = e.embed_sequence(&[String::from("u")]).unwrap();
        let c = cosine(emb.as_slice(), u.as_slice()).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn degenerate_mean_is_an_error() {
        struct Cancelling;
        impl TermEmbedder for Cancelling {
            fn dim(&self) -> usize {
                2
            }
            fn embed_sequence(&self, seq: &[String]) -> Result<TermEmbedding> {
                match seq[0].as_str() {
                    "u" => TermEmbedding::unit(vec![1.0, 0.0]),
                    _ => TermEmbedding::unit(vec![-1.0, 0.0]),
                }
            }
        }
        let t = Term::new("x", vec![vec!["u".into()], vec!["v".into()]]);
        assert!(matches!(
            Cancelling.embed_term(&t),
            Err(Error::DegenerateEmbedding)
        ));
    }

    #[test]
    fn lexicon_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lexicon.jsonl");
        let terms = vec![
            Term::single("cat", seq("k ae t")),
            Term::new("abs", vec![seq("a b s"), seq("ae b s")]),
        ];
        write_lexicon(&path, &terms).unwrap();
        assert_eq!(read_lexicon(&path).unwrap(), terms);
    }
}
