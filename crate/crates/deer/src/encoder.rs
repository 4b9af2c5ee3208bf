//! Text -> fixed-dimension feature vectors via signed feature hashing.
//!
//! The default backend hashes word n-grams and character n-grams with
//! 64-bit FNV-1a into a signed-count block (L2-normalized), followed by a
//! few vocabulary-free style statistics (token redundancy and repetition
//! rates). The hashed block carries lexical evidence; the statistics block
//! carries signals that survive a complete vocabulary shift, standing in
//! for the distributional style cues a pretrained transformer encoder
//! provides. The same vector is the state consumed by the routing policy.

use serde::{Deserialize, Serialize};

use crate::nnprims::fnv1a64;

/// Encoder backend selector, serialized into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderBackend {
    /// Frozen hashed n-gram features.
    HashedNgram,
    /// Hashed n-gram features followed by a trainable D->D linear adapter
    /// (the adapter parameters live in the model store, not here).
    Adapter,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub word_ngrams: Vec<usize>,
    pub char_ngrams: Vec<usize>,
    pub lowercase: bool,
    /// Trailing dimensions reserved for style statistics (0 disables them);
    /// the remaining dim - stats_dims slots hold the hashed n-grams.
    pub stats_dims: usize,
    pub backend: EncoderBackend,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 768,
            word_ngrams: vec![1, 2],
            char_ngrams: vec![3],
            lowercase: true,
            stats_dims: 4,
            backend: EncoderBackend::HashedNgram,
        }
    }
}

impl EncoderConfig {
    pub fn with_dim(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }
}

fn accumulate(values: &mut [f64], bytes: &[u8]) {
    let h = fnv1a64(bytes);
    let idx = (h % values.len() as u64) as usize;
    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
    values[idx] += sign;
}

/// Vocabulary-free style statistics, each in [0, 1]: adjacent-token repeat
/// rate, unigram redundancy (1 - type/token ratio), peak token frequency,
/// and bigram redundancy. Empty text maps to all zeros.
pub fn style_stats(tokens: &[&str]) -> [f64; 4] {
    if tokens.is_empty() {
        return [0.0; 4];
    }
    let n = tokens.len();
    let mut counts: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for &t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let distinct = counts.len();
    let peak = counts.values().copied().max().unwrap_or(0);
    let (mut repeats, mut distinct_bigrams) = (0usize, std::collections::HashSet::new());
    for w in tokens.windows(2) {
        if w[0] == w[1] {
            repeats += 1;
        }
        distinct_bigrams.insert((w[0], w[1]));
    }
    let pairs = n.saturating_sub(1);
    [
        if pairs == 0 { 0.0 } else { repeats as f64 / pairs as f64 },
        1.0 - distinct as f64 / n as f64,
        peak as f64 / n as f64,
        if pairs == 0 {
            0.0
        } else {
            1.0 - distinct_bigrams.len() as f64 / pairs as f64
        },
    ]
}

/// Hash a text into a feature vector: an L2-normalized signed n-gram block
/// followed by the style-statistics block. Empty text gives the zero vector.
pub fn encode(cfg: &EncoderConfig, text: &str) -> Vec<f64> {
    let ns = cfg.stats_dims.min(cfg.dim);
    let hash_dim = cfg.dim - ns;
    let mut values = vec![0.0; cfg.dim];
    let lowered;
    let text = if cfg.lowercase {
        lowered = text.to_lowercase();
        &lowered
    } else {
        text
    };
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if hash_dim > 0 {
        let hashed = &mut values[..hash_dim];
        for &order in &cfg.word_ngrams {
            if order == 0 || tokens.len() < order {
                continue;
            }
            for window in tokens.windows(order) {
                accumulate(hashed, window.join(" ").as_bytes());
            }
        }
        let chars: Vec<char> = text.chars().collect();
        for &order in &cfg.char_ngrams {
            if order == 0 || chars.len() < order {
                continue;
            }
            for window in chars.windows(order) {
                let gram: String = window.iter().collect();
                accumulate(hashed, gram.as_bytes());
            }
        }
        let norm: f64 = hashed.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in hashed.iter_mut() {
                *v /= norm;
            }
        }
    }
    let stats = style_stats(&tokens);
    for (slot, &s) in values[hash_dim..].iter_mut().zip(stats.iter()) {
        *slot = s;
    }
    values
}

/// RL state vector for a text. Under the hashed-ngram backend this equals
/// [`encode`]; kept separate so a different backend can diverge.
pub fn state_of(cfg: &EncoderConfig, text: &str) -> Vec<f64> {
    encode(cfg, text)
}
