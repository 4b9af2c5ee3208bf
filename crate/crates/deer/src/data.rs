//! Dataset I/O, seeded synthetic multi-domain corpus generation, and
//! token-level perturbation.
//!
//! The synthetic generator builds n_source + n_ood domains with pairwise
//! disjoint vocabularies. Machine texts mix three signals: tokens from a
//! globally shared machine vocabulary (the transferable signature), tokens
//! from a per-domain quirk sub-vocabulary (domain-local signal), and a
//! bigram repetition bias. OOD domains get fresh vocabularies but keep the
//! shared machine vocabulary and the repeat bias, so only the transferable
//! signal survives domain shift.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{DeerError, Result};
use crate::nnprims::fnv1a64;

pub const LABEL_HUMAN: u8 = 0;
pub const LABEL_MACHINE: u8 = 1;

/// One labeled text instance. `domain` is `None` for unlabeled OOD inference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub text: String,
    pub label: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

impl Sample {
    pub fn new(text: impl Into<String>, label: u8, domain: Option<String>) -> Self {
        Self {
            text: text.into(),
            label,
            domain,
        }
    }
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let file = fs::File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| DeerError::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
        let text = value
            .get("text")
            .and_then(|v| v.as_str())
            .ok_or_else(|| DeerError::Parse {
                line: lineno,
                msg: "missing string field `text`".into(),
            })?
            .to_string();
        let label = value
            .get("label")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| DeerError::Parse {
                line: lineno,
                msg: "missing integer field `label`".into(),
            })?;
        if label > 1 {
            return Err(DeerError::Data(format!(
                "line {lineno}: label {label} not in {{0,1}}"
            )));
        }
        let domain = value
            .get("domain")
            .and_then(|v| v.as_str())
            .map(|s| s.to_string());
        samples.push(Sample::new(text, label as u8, domain));
    }
    Ok(samples)
}

pub fn save_jsonl(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    if let Some(parent) = path.as_ref().parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::File::create(path.as_ref())?;
    for s in samples {
        serde_json::to_writer(&mut file, s)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_source: usize,
    pub n_ood: usize,
    pub per_domain: usize,
    pub vocab_per_domain: usize,
    pub shared_machine_vocab: usize,
    /// Probability that a machine token comes from the shared machine vocab.
    pub shared_signal_strength: f64,
    /// Probability that a machine token comes from the domain quirk vocab.
    pub domain_signal_strength: f64,
    /// Probability that a machine token repeats the previous token.
    pub repeat_bias: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_source: 3,
            n_ood: 2,
            per_domain: 2000,
            vocab_per_domain: 400,
            shared_machine_vocab: 60,
            shared_signal_strength: 0.35,
            domain_signal_strength: 0.25,
            repeat_bias: 0.15,
            min_len: 30,
            max_len: 120,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shared_signal_strength + self.domain_signal_strength > 1.0 {
            return Err(DeerError::Config(
                "shared_signal_strength + domain_signal_strength must be <= 1".into(),
            ));
        }
        if self.n_source == 0
            || self.per_domain == 0
            || self.vocab_per_domain == 0
            || self.shared_machine_vocab == 0
        {
            return Err(DeerError::Config("synthetic counts must be positive".into()));
        }
        if self.min_len == 0 || self.max_len < self.min_len {
            return Err(DeerError::Config("invalid length range".into()));
        }
        for (name, v) in [
            ("shared_signal_strength", self.shared_signal_strength),
            ("domain_signal_strength", self.domain_signal_strength),
            ("repeat_bias", self.repeat_bias),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DeerError::Config(format!("{name} must be in [0,1]")));
            }
        }
        Ok(())
    }
}

/// Train/val/test splits for one source domain.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub name: String,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub source: Vec<DomainData>,
    pub ood: Vec<(String, Vec<Sample>)>,
}

impl SyntheticCorpus {
    pub fn pooled_train(&self) -> Vec<Sample> {
        self.source.iter().flat_map(|d| d.train.clone()).collect()
    }

    pub fn pooled_val(&self) -> Vec<Sample> {
        self.source.iter().flat_map(|d| d.val.clone()).collect()
    }

    pub fn source_names(&self) -> Vec<String> {
        self.source.iter().map(|d| d.name.clone()).collect()
    }
}

struct DomainVocab {
    base: Vec<String>,
    quirk: Vec<String>,
}

fn mint_words(counter: &mut usize, n: usize) -> Vec<String> {
    (0..n)
        .map(|_| {
            let w = format!("w{:05}", *counter);
            *counter += 1;
            w
        })
        .collect()
}

fn gen_domain_samples(
    name: &str,
    vocab: &DomainVocab,
    shared: &[String],
    cfg: &SyntheticConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Sample> {
    let zipf = Zipf::new(vocab.base.len() as u64, 1.1).expect("valid zipf");
    let n_machine = cfg.per_domain / 2;
    let n_human = cfg.per_domain - n_machine;
    let draw_base = |rng: &mut ChaCha8Rng| -> &str {
        let idx = zipf.sample(rng) as usize - 1;
        &vocab.base[idx.min(vocab.base.len() - 1)]
    };
    let mut samples = Vec::with_capacity(cfg.per_domain);
    for _ in 0..n_human {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let tokens: Vec<&str> = (0..len).map(|_| draw_base(rng)).collect();
        samples.push(Sample::new(
            tokens.join(" "),
            LABEL_HUMAN,
            Some(name.to_string()),
        ));
    }
    for _ in 0..n_machine {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let mut tokens: Vec<String> = Vec::with_capacity(len);
        for t in 0..len {
            if t > 0 && rng.gen_bool(cfg.repeat_bias) {
                tokens.push(tokens[t - 1].clone());
                continue;
            }
            let u: f64 = rng.gen();
            let word = if u < cfg.shared_signal_strength {
                shared[rng.gen_range(0..shared.len())].clone()
            } else if u < cfg.shared_signal_strength + cfg.domain_signal_strength {
                vocab.quirk[rng.gen_range(0..vocab.quirk.len())].clone()
            } else {
                draw_base(rng).to_string()
            };
            tokens.push(word);
        }
        samples.push(Sample::new(
            tokens.join(" "),
            LABEL_MACHINE,
            Some(name.to_string()),
        ));
    }
    samples.shuffle(rng);
    samples
}

/// Generate the full synthetic corpus, fully determined by `cfg.seed`.
/// Source domains are split 80/10/10 into train/val/test; OOD domains are
/// emitted whole as test sets.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut counter = 0usize;
    let shared = mint_words(&mut counter, cfg.shared_machine_vocab);
    let quirk_size = (cfg.vocab_per_domain / 10).max(8);

    let mut source = Vec::new();
    for k in 0..cfg.n_source {
        let name = format!("src{k}");
        let vocab = DomainVocab {
            base: mint_words(&mut counter, cfg.vocab_per_domain),
            quirk: mint_words(&mut counter, quirk_size),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a64(name.as_bytes()));
        let samples = gen_domain_samples(&name, &vocab, &shared, cfg, &mut rng);
        let n = samples.len();
        let n_train = n * 8 / 10;
        let n_val = n / 10;
        let mut it = samples.into_iter();
        let train: Vec<Sample> = it.by_ref().take(n_train).collect();
        let val: Vec<Sample> = it.by_ref().take(n_val).collect();
        let test: Vec<Sample> = it.collect();
        source.push(DomainData {
            name,
            train,
            val,
            test,
        });
    }

    let mut ood = Vec::new();
    for k in 0..cfg.n_ood {
        let name = format!("ood{k}");
        let vocab = DomainVocab {
            base: mint_words(&mut counter, cfg.vocab_per_domain),
            quirk: mint_words(&mut counter, quirk_size),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a64(name.as_bytes()));
        let samples = gen_domain_samples(&name, &vocab, &shared, cfg, &mut rng);
        ood.push((name, samples));
    }

    Ok(SyntheticCorpus { source, ood })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub cfg: SyntheticConfig,
    pub source_domains: Vec<String>,
    pub ood_domains: Vec<String>,
}

/// Write a corpus under `dir/{domain}/{split}.jsonl` plus `manifest.json`.
pub fn write_corpus(dir: impl AsRef<Path>, corpus: &SyntheticCorpus, cfg: &SyntheticConfig) -> Result<()> {
    let dir = dir.as_ref();
    for d in &corpus.source {
        save_jsonl(dir.join(&d.name).join("train.jsonl"), &d.train)?;
        save_jsonl(dir.join(&d.name).join("val.jsonl"), &d.val)?;
        save_jsonl(dir.join(&d.name).join("test.jsonl"), &d.test)?;
    }
    for (name, samples) in &corpus.ood {
        save_jsonl(dir.join(name).join("test.jsonl"), samples)?;
    }
    let manifest = CorpusManifest {
        cfg: cfg.clone(),
        source_domains: corpus.source.iter().map(|d| d.name.clone()).collect(),
        ood_domains: corpus.ood.iter().map(|(n, _)| n.clone()).collect(),
    };
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = dir.as_ref().join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| DeerError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Load a corpus previously written by [`write_corpus`].
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<SyntheticCorpus> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut source = Vec::new();
    for name in &manifest.source_domains {
        source.push(DomainData {
            name: name.clone(),
            train: load_jsonl(dir.join(name).join("train.jsonl"))?,
            val: load_jsonl(dir.join(name).join("val.jsonl"))?,
            test: load_jsonl(dir.join(name).join("test.jsonl"))?,
        });
    }
    let mut ood = Vec::new();
    for name in &manifest.ood_domains {
        ood.push((name.clone(), load_jsonl(dir.join(name).join("test.jsonl"))?));
    }
    Ok(SyntheticCorpus { source, ood })
}

/// Sorted unique whitespace tokens of a sample set; the replacement pool for
/// [`perturb`].
pub fn corpus_vocabulary(samples: &[Sample]) -> Vec<String> {
    let mut set = BTreeSet::new();
    for s in samples {
        for t in s.text.split_whitespace() {
            set.insert(t.to_string());
        }
    }
    set.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbKind {
    Repeat,
    Delete,
    Replace,
}

impl FromStr for PerturbKind {
    type Err = DeerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "repeat" => Ok(PerturbKind::Repeat),
            "delete" => Ok(PerturbKind::Delete),
            "replace" => Ok(PerturbKind::Replace),
            other => Err(DeerError::Config(format!("unknown perturbation kind `{other}`"))),
        }
    }
}

/// Perturb each token independently with probability `rate`.
pub fn perturb(
    text: &str,
    kind: PerturbKind,
    rate: f64,
    vocab: &[String],
    seed: u64,
) -> Result<String> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(DeerError::Config(format!("rate {rate} not in [0,1]")));
    }
    if kind == PerturbKind::Replace && vocab.is_empty() && rate > 0.0 {
        return Err(DeerError::Config("replace perturbation needs a vocabulary".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<String> = Vec::new();
    for token in text.split_whitespace() {
        let hit = rate > 0.0 && rng.gen_bool(rate);
        match kind {
            PerturbKind::Repeat => {
                out.push(token.to_string());
                if hit {
                    out.push(token.to_string());
                }
            }
            PerturbKind::Delete => {
                if !hit {
                    out.push(token.to_string());
                }
            }
            PerturbKind::Replace => {
                if hit {
                    out.push(vocab[rng.gen_range(0..vocab.len())].clone());
                } else {
                    out.push(token.to_string());
                }
            }
        }
    }
    Ok(out.join(" "))
}
