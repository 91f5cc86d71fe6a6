//! Deterministic offline providers: term-frequency attention, token-set
//! Jaccard similarity and a seeded hashing embedder.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{AttentionScorer, Embedder, EmbeddingVector, ProviderError, SimilarityScorer};
use crate::dialogue::Dialogue;
use crate::text::{normalize_keyword, tokenize};

/// Token form used by the local scorers: normalized, with surrounding ASCII
/// punctuation removed from non-CJK words. Empty tokens are dropped.
pub(crate) fn scoring_tokens(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .map(|t| normalize_keyword(t.trim_matches(|c: char| c.is_ascii_punctuation())))
        .filter(|t| !t.is_empty())
        .collect()
}

/// Attention stand-in: normalized term frequency. A keyword's weight is the
/// mean frequency of its tokens, and 0 when the keyword does not occur in
/// the text.
#[derive(Debug, Default, Clone, Copy)]
pub struct FrequencyAttention;

impl AttentionScorer for FrequencyAttention {
    fn attention_weights(&self, text: &str, keywords: &[String]) -> Result<BTreeMap<String, f64>, ProviderError> {
        let tokens = scoring_tokens(text);
        let total = tokens.len() as f64;
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in &tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
        let haystack = normalize_keyword(text);
        let mut out = BTreeMap::new();
        for kw in keywords {
            let needle = normalize_keyword(kw);
            let kw_tokens = scoring_tokens(kw);
            let weight = if needle.is_empty() || kw_tokens.is_empty() || !haystack.contains(&needle) {
                0.0
            } else {
                kw_tokens.iter().map(|t| counts.get(t.as_str()).copied().unwrap_or(0) as f64 / total).sum::<f64>()
                    / kw_tokens.len() as f64
            };
            out.insert(kw.clone(), weight);
        }
        Ok(out)
    }
}

/// Similarity stand-in: Jaccard index of the token sets of the concatenated turns.
#[derive(Debug, Default, Clone, Copy)]
pub struct JaccardSimilarity;

impl JaccardSimilarity {
    pub fn texts(a: &str, b: &str) -> f64 {
        let sa: HashSet<String> = scoring_tokens(a).into_iter().collect();
        let sb: HashSet<String> = scoring_tokens(b).into_iter().collect();
        let union = sa.union(&sb).count();
        if union == 0 {
            return 1.0;
        }
        sa.intersection(&sb).count() as f64 / union as f64
    }
}

impl SimilarityScorer for JaccardSimilarity {
    fn similarity(&self, a: &Dialogue, b: &Dialogue) -> Result<f64, ProviderError> {
        Ok(Self::texts(&a.joined_text(), &b.joined_text()))
    }
}

/// Bag-of-tokens embedder: every token maps to a pseudo-random vector drawn
/// from a generator keyed on `(seed, token)`; a text's embedding is the
/// L2-normalized sum of its token vectors.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    seed: u64,
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(seed: u64, dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        HashEmbedder { seed, dimension }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dimension).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut acc = vec![0.0; self.dimension];
        for token in scoring_tokens(text) {
            for (a, v) in acc.iter_mut().zip(self.token_vector(&token)) {
                *a += v;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector(acc)
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(0, 32)
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::InvalidRequest("no texts to embed".into()));
        }
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}
