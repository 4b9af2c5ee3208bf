//! `deer` command-line surface: corpus synthesis, two-stage training,
//! evaluation, detection, perturbation robustness, ablations, and modular
//! domain expansion. Every command writes JSON artifacts; failures exit 1
//! with a single machine-parseable line on stderr:
//! `error category=<config|data|compat|numeric>: <message>`.

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use deer::checkpoint::{check_pair, load_model, load_policy, save_model, save_policy};
use deer::data::{
    corpus_vocabulary, generate_synthetic, load_corpus, load_jsonl, perturb, write_corpus,
    PerturbKind, Sample, SyntheticConfig, SyntheticCorpus,
};
use deer::dmoe::{train_stage1, Ablation, DmoeConfig, DmoeModel};
use deer::encoder::EncoderConfig;
use deer::error::{DeerError, Result};
use deer::eval::{
    evaluate, run_ablation, train_domain_classifier, AblationKind, AblationSetup,
    ClassifierConfig, EvalContext, EvalReport, RoutingStrategy,
};
use deer::incremental::{expand_domain, param_report, ExpandConfig};
use deer::inference::detect;
use deer::policy::{train_policy, PolicyConfig, PolicyNetwork, RewardKind, StateNormalizer};

#[derive(Parser)]
#[command(name = "deer", version, about = "Two-stage mixture-of-experts detector for machine-generated text")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AblateFlag {
    None,
    NoDs,
    NoShared,
    Base,
}

impl From<AblateFlag> for Ablation {
    fn from(a: AblateFlag) -> Self {
        match a {
            AblateFlag::None => Ablation::None,
            AblateFlag::NoDs => Ablation::NoDomainSpecific,
            AblateFlag::NoShared => Ablation::NoShared,
            AblateFlag::Base => Ablation::Base,
        }
    }
}

#[derive(Args)]
struct DmoeFlags {
    #[arg(long, default_value_t = 5)]
    m1: usize,
    #[arg(long, default_value_t = 6)]
    m2: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 2e-5)]
    lr: f64,
    #[arg(long, default_value_t = 768)]
    dim: usize,
    #[arg(long, default_value_t = 256)]
    expert_hidden: usize,
    #[arg(long, default_value_t = 128)]
    head_hidden: usize,
}

impl DmoeFlags {
    fn to_config(&self, ablation: Ablation, seed: u64) -> DmoeConfig {
        DmoeConfig {
            m1: self.m1,
            m2: self.m2,
            expert_hidden: self.expert_hidden,
            head_hidden: self.head_hidden,
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            ablation,
            seed,
            ..DmoeConfig::default()
        }
    }
}

#[derive(Args)]
struct PolicyFlags {
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    wd: f64,
    #[arg(long, default_value_t = 0.01)]
    entropy: f64,
    #[arg(long, default_value_t = 512)]
    hidden: usize,
    #[arg(long, default_value = "neg_loss")]
    reward: String,
}

impl PolicyFlags {
    fn to_config(&self, seed: u64) -> Result<PolicyConfig> {
        Ok(PolicyConfig {
            hidden: self.hidden,
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            weight_decay: self.wd,
            entropy_coef: self.entropy,
            reward_kind: self.reward.parse::<RewardKind>()?,
            seed,
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    /// Pooled in-distribution test sets of the source domains.
    Ind,
    /// Pooled out-of-distribution test sets.
    Ood,
    /// Pooled source validation sets.
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic multi-domain corpus.
    Synth {
        /// JSON file mirroring SyntheticConfig; defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Stage 1: train the disentangled mixture-of-experts detector.
    TrainDmoe {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: DmoeFlags,
        #[arg(long, value_enum, default_value_t = AblateFlag::None)]
        ablate: AblateFlag,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Stage 2: train the routing policy over a frozen detector.
    TrainPolicy {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: PolicyFlags,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a routing strategy on a corpus split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        strategy: String,
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long, value_enum, default_value_t = Split::Ood)]
        split: Split,
        /// Add the length-bucketed breakdown.
        #[arg(long)]
        buckets: bool,
        /// Renormalize the top-m routing weights before fusion.
        #[arg(long)]
        renormalize: bool,
        /// Epochs for the on-the-fly domain classifier (classifier strategy).
        #[arg(long, default_value_t = 5)]
        cls_epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Detect machine-generated text without domain labels.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long)]
        renormalize: bool,
        #[arg(long, conflicts_with = "input")]
        text: Option<String>,
        #[arg(long)]
        input: Option<PathBuf>,
        /// JSONL output; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Robustness evaluation under token-level perturbation.
    PerturbEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "repeat,delete,replace")]
        kinds: String,
        #[arg(long, default_value_t = 0.15)]
        rate: f64,
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long, value_enum, default_value_t = Split::Ood)]
        split: Split,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Expert-type or routing-strategy ablation over several seeds.
    Ablate {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        data: PathBuf,
        /// Number of seeds (0..seeds).
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[command(flatten)]
        dmoe: DmoeFlags,
        #[arg(long, default_value_t = 20)]
        policy_epochs: usize,
        #[arg(long, default_value_t = 64)]
        policy_hidden: usize,
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long)]
        report: PathBuf,
    },
    /// Add one domain by modular expansion and fine-tune it.
    Expand {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        new_domain: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Keep the classification head frozen during fine-tuning.
        #[arg(long)]
        strict_freeze_head: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
}

fn split_samples(corpus: &SyntheticCorpus, split: Split) -> Vec<Sample> {
    match split {
        Split::Ind => corpus.source.iter().flat_map(|d| d.test.clone()).collect(),
        Split::Ood => corpus.ood.iter().flat_map(|(_, s)| s.clone()).collect(),
        Split::Val => corpus.pooled_val(),
    }
}

/// Serialize a report with a leading timestamp field. The timestamp is the
/// only run-varying field; everything below it is deterministic per seed.
fn write_report<T: Serialize>(path: &PathBuf, body: &T) -> Result<()> {
    let mut value = json!({
        "timestamp": chrono::Utc::now().to_rfc3339(),
    });
    let body = serde_json::to_value(body)?;
    if let (Value::Object(dst), Value::Object(src)) = (&mut value, body) {
        for (k, v) in src {
            dst.insert(k, v);
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(&value)?)?;
    Ok(())
}

fn load_pair(
    model_path: &PathBuf,
    policy_path: &PathBuf,
) -> Result<(DmoeModel, PolicyNetwork, StateNormalizer)> {
    let model = load_model(model_path)?;
    let (policy, norm, _) = load_policy(policy_path)?;
    check_pair(&model, &policy)?;
    Ok((model, policy, norm))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let mut cfg: SyntheticConfig = match config {
                Some(path) => {
                    let text = fs::read_to_string(&path)
                        .map_err(|e| DeerError::Data(format!("cannot read {}: {e}", path.display())))?;
                    serde_json::from_str(&text)
                        .map_err(|e| DeerError::Config(format!("bad synth config: {e}")))?
                }
                None => SyntheticConfig::default(),
            };
            cfg.seed = seed;
            let corpus = generate_synthetic(&cfg)?;
            write_corpus(&out, &corpus, &cfg)?;
            println!(
                "wrote {} source + {} ood domains to {}",
                corpus.source.len(),
                corpus.ood.len(),
                out.display()
            );
        }
        Command::TrainDmoe {
            data,
            out,
            flags,
            ablate,
            seed,
        } => {
            let corpus = load_corpus(&data)?;
            let cfg = flags.to_config(ablate.into(), seed);
            let mut enc = EncoderConfig::default();
            enc.dim = flags.dim;
            let mut model = DmoeModel::new(enc, cfg, corpus.source_names(), seed)?;
            let history = train_stage1(&mut model, &corpus.pooled_train(), &corpus.pooled_val())?;
            save_model(&out, &model)?;
            println!(
                "trained {} epochs; best val F1 {:.4} (epoch {:?}); saved {}",
                history.train_loss.len(),
                history.val_f1.iter().cloned().fold(0.0, f64::max),
                history.best_epoch,
                out.display()
            );
        }
        Command::TrainPolicy {
            model,
            data,
            out,
            flags,
            seed,
        } => {
            let mut model = load_model(&model)?;
            model.store.freeze_all();
            let corpus = load_corpus(&data)?;
            let cfg = flags.to_config(seed)?;
            let mut policy =
                PolicyNetwork::new(model.dim(), cfg.hidden, model.n_domains(), &cfg, seed);
            let mut norm = StateNormalizer::new(model.dim());
            let history = train_policy(&mut policy, &mut norm, &model, &corpus.pooled_train(), &cfg)?;
            norm.frozen = true;
            save_policy(&out, &policy, &norm, &cfg)?;
            println!(
                "trained {} epochs; final mean relative reward {:.4}; saved {}",
                history.mean_reward.len(),
                history.mean_reward.last().copied().unwrap_or(0.0),
                out.display()
            );
        }
        Command::Evaluate {
            model,
            policy,
            data,
            strategy,
            m,
            split,
            buckets,
            renormalize,
            cls_epochs,
            seed,
            report,
        } => {
            let strategy: RoutingStrategy = strategy.parse()?;
            let model = load_model(&model)?;
            let corpus = load_corpus(&data)?;
            let loaded_policy = match policy {
                Some(path) => {
                    let (p, n, _) = load_policy(&path)?;
                    check_pair(&model, &p)?;
                    Some((p, n))
                }
                None => None,
            };
            let classifier = if strategy == RoutingStrategy::Classifier {
                Some(train_domain_classifier(
                    &model.enc,
                    &corpus.source_names(),
                    &corpus.pooled_train(),
                    &corpus.pooled_val(),
                    &ClassifierConfig {
                        epochs: cls_epochs,
                        seed,
                        ..ClassifierConfig::default()
                    },
                )?)
            } else {
                None
            };
            let samples = split_samples(&corpus, split);
            let ctx = EvalContext {
                model: &model,
                policy: loaded_policy.as_ref().map(|(p, n)| (p, n)),
                classifier: classifier.as_ref(),
                m,
                renormalize,
                seed,
            };
            let result: EvalReport = evaluate(&ctx, strategy, &samples, buckets)?;
            println!(
                "{:?} on {} samples: acc {:.4}, F1 {:.4}",
                strategy, result.pooled.n, result.pooled.accuracy, result.pooled.f1
            );
            write_report(&report, &result)?;
        }
        Command::Detect {
            model,
            policy,
            m,
            renormalize,
            text,
            input,
            out,
        } => {
            let (model, policy, norm) = load_pair(&model, &policy)?;
            let texts: Vec<String> = match (text, input) {
                (Some(t), None) => vec![t],
                (None, Some(path)) => load_jsonl(&path)?.into_iter().map(|s| s.text).collect(),
                (None, None) => {
                    return Err(DeerError::Config("need --text or --input".into()));
                }
                _ => unreachable!("clap conflicts_with"),
            };
            let mut lines = Vec::with_capacity(texts.len());
            for t in &texts {
                let r = detect(&model, &policy, &norm, t, m, renormalize)?;
                lines.push(serde_json::to_string(&r)?);
            }
            match out {
                Some(path) => {
                    if let Some(parent) = path.parent() {
                        fs::create_dir_all(parent)?;
                    }
                    let mut f = fs::File::create(&path)?;
                    for l in &lines {
                        writeln!(f, "{l}")?;
                    }
                    println!("wrote {} results to {}", lines.len(), path.display());
                }
                None => {
                    for l in &lines {
                        println!("{l}");
                    }
                }
            }
        }
        Command::PerturbEval {
            model,
            policy,
            data,
            kinds,
            rate,
            m,
            split,
            seed,
            report,
        } => {
            let (model, policy, norm) = load_pair(&model, &policy)?;
            let corpus = load_corpus(&data)?;
            let samples = split_samples(&corpus, split);
            let vocab = corpus_vocabulary(&samples);
            let kinds: Vec<PerturbKind> = kinds
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.trim().parse())
                .collect::<Result<_>>()?;
            if kinds.is_empty() {
                return Err(DeerError::Config("no perturbation kinds given".into()));
            }
            let eval_texts = |data: &[Sample]| -> Result<deer::eval::Metrics> {
                let ctx = EvalContext {
                    model: &model,
                    policy: Some((&policy, &norm)),
                    classifier: None,
                    m,
                    renormalize: false,
                    seed,
                };
                Ok(evaluate(&ctx, RoutingStrategy::Rl, data, false)?.pooled)
            };
            let clean = eval_texts(&samples)?;
            let mut per_kind = serde_json::Map::new();
            for kind in kinds {
                let perturbed: Vec<Sample> = samples
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        Ok(Sample::new(
                            perturb(&s.text, kind, rate, &vocab, seed ^ (i as u64) << 1)?,
                            s.label,
                            s.domain.clone(),
                        ))
                    })
                    .collect::<Result<_>>()?;
                let metrics = eval_texts(&perturbed)?;
                println!(
                    "{:?} rate {rate}: acc {:.4}, F1 {:.4}",
                    kind, metrics.accuracy, metrics.f1
                );
                per_kind.insert(
                    format!("{kind:?}").to_lowercase(),
                    serde_json::to_value(metrics)?,
                );
            }
            write_report(
                &report,
                &json!({
                    "rate": rate,
                    "m": m,
                    "clean": clean,
                    "perturbed": per_kind,
                }),
            )?;
        }
        Command::Ablate {
            kind,
            data,
            seeds,
            dmoe,
            policy_epochs,
            policy_hidden,
            m,
            report,
        } => {
            let kind: AblationKind = kind.parse()?;
            let corpus = load_corpus(&data)?;
            let mut enc = EncoderConfig::default();
            enc.dim = dmoe.dim;
            let setup = AblationSetup {
                enc,
                dmoe: dmoe.to_config(Ablation::None, 0),
                policy: PolicyConfig {
                    hidden: policy_hidden,
                    epochs: policy_epochs,
                    ..PolicyConfig::default()
                },
                classifier: ClassifierConfig::default(),
                m,
            };
            let seed_list: Vec<u64> = (0..seeds).collect();
            let result = run_ablation(kind, &corpus, &setup, &seed_list)?;
            for row in &result.rows {
                println!(
                    "{:<20} OOD F1 {:.4} ± {:.4}",
                    row.variant, row.pooled_f1.mean, row.pooled_f1.std
                );
            }
            write_report(&report, &result)?;
        }
        Command::Expand {
            model,
            new_domain,
            data,
            out,
            epochs,
            batch,
            lr,
            strict_freeze_head,
            seed,
            report,
        } => {
            let mut model = load_model(&model)?;
            let corpus = load_corpus(&data)?;
            let (train, val): (Vec<Sample>, Vec<Sample>) =
                if let Some(d) = corpus.source.iter().find(|d| d.name == new_domain) {
                    (d.train.clone(), d.val.clone())
                } else if let Some((_, samples)) =
                    corpus.ood.iter().find(|(n, _)| *n == new_domain)
                {
                    // OOD domains ship as a single test split: carve 80/10
                    let n_train = samples.len() * 8 / 10;
                    let n_val = samples.len() / 10;
                    (
                        samples[..n_train].to_vec(),
                        samples[n_train..n_train + n_val].to_vec(),
                    )
                } else {
                    return Err(DeerError::Data(format!(
                        "domain `{new_domain}` not found in {}",
                        data.display()
                    )));
                };
            let result = expand_domain(
                &mut model,
                &new_domain,
                &train,
                &val,
                &ExpandConfig {
                    epochs,
                    batch_size: batch,
                    lr,
                    strict_freeze_head,
                    seed,
                },
            )?;
            save_model(&out, &model)?;
            let params = param_report(&model);
            println!(
                "expanded to {} domains; trainable fraction {:.4}; saved {}",
                result.n_domains,
                params.trainable_fraction,
                out.display()
            );
            write_report(&report, &result)?;
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error category={}: {e}", e.category());
        std::process::exit(1);
    }
}
