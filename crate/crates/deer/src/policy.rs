//! Stage-2 routing: policy network, running state normalization,
//! domain-baseline relative rewards, and entropy-regularized REINFORCE over
//! a frozen detector.
//!
//! Episodes are single-step contextual-bandit decisions: one state, one
//! domain choice, one reward, no discounting.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::dmoe::DmoeModel;
use crate::error::{DeerError, Result};
use crate::nnprims::{
    adamw_step, argmax_tie_low, cross_entropy, entropy, softmax, AdamWConfig, AdamWState,
    Activation, GradStore, ParamStore, TwoLayerCache, TwoLayerSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// Negative cross-entropy of the pathway's class distribution.
    NegLoss,
    /// 1 if the pathway's argmax label is correct, else 0.
    Accuracy,
}

impl std::str::FromStr for RewardKind {
    type Err = DeerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neg_loss" => Ok(RewardKind::NegLoss),
            "accuracy" => Ok(RewardKind::Accuracy),
            other => Err(DeerError::Config(format!("unknown reward kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Entropy bonus coefficient, linearly decayed to 0 over the last 20%
    /// of epochs.
    pub entropy_coef: f64,
    pub reward_kind: RewardKind,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            epochs: 100,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-5,
            entropy_coef: 0.01,
            reward_kind: RewardKind::NegLoss,
            seed: 0,
        }
    }
}

/// Welford running statistics over state vectors. Frozen at inference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateNormalizer {
    pub count: u64,
    pub mean: Vec<f64>,
    m2: Vec<f64>,
    pub eps: f64,
    pub frozen: bool,
}

impl StateNormalizer {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            eps: 1e-8,
            frozen: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Welford accumulation; a no-op when frozen.
    pub fn update(&mut self, s: &[f64]) {
        if self.frozen {
            return;
        }
        self.count += 1;
        let n = self.count as f64;
        for i in 0..self.mean.len() {
            let delta = s[i] - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (s[i] - self.mean[i]);
        }
    }

    /// Per-coordinate sample variance; 1 by convention below two observations.
    pub fn variance(&self, i: usize) -> f64 {
        if self.count > 1 {
            self.m2[i] / (self.count - 1) as f64
        } else {
            1.0
        }
    }

    /// (s - mean) / sqrt(var + eps). With no statistics yet, returns s.
    pub fn normalize(&self, s: &[f64]) -> Vec<f64> {
        if self.count == 0 {
            return s.to_vec();
        }
        (0..s.len())
            .map(|i| (s[i] - self.mean[i]) / (self.variance(i) + self.eps).sqrt())
            .collect()
    }
}

/// The router pi_theta2: softmax(w2 . tanh(w1 . s)).
#[derive(Debug, Clone)]
pub struct PolicyNetwork {
    pub dim: usize,
    pub hidden: usize,
    pub n_domains: usize,
    pub store: ParamStore,
    pub opt: AdamWState,
}

impl PolicyNetwork {
    pub fn new(dim: usize, hidden: usize, n_domains: usize, cfg: &PolicyConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let spec = Self::spec_for(dim, hidden, n_domains);
        spec.init(&mut store, seed);
        Self {
            dim,
            hidden,
            n_domains,
            store,
            opt: AdamWState::new(AdamWConfig::new(cfg.lr, cfg.weight_decay)),
        }
    }

    fn spec_for(dim: usize, hidden: usize, n_domains: usize) -> TwoLayerSpec {
        TwoLayerSpec::new("policy", dim, hidden, n_domains, Activation::Tanh)
    }

    pub(crate) fn spec(&self) -> TwoLayerSpec {
        Self::spec_for(self.dim, self.hidden, self.n_domains)
    }

    pub(crate) fn forward_cached(
        &self,
        norm: &StateNormalizer,
        s: &[f64],
    ) -> Result<(TwoLayerCache, Vec<f64>)> {
        let s_tilde = norm.normalize(s);
        let cache = self.spec().forward_cached(&self.store, &s_tilde)?;
        let probs = softmax(&cache.y)?;
        Ok((cache, probs))
    }

    /// Distribution over the n source domains for a raw state vector.
    pub fn forward(&self, norm: &StateNormalizer, s: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(norm, s)?.1)
    }
}

/// One stored single-step episode.
#[derive(Debug, Clone)]
pub struct RolloutRecord {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub log_prob: f64,
    pub entropy: f64,
}

/// Immediate reward of routing (x, y) through the domain-k pathway.
pub fn pathway_reward(
    model: &DmoeModel,
    k: usize,
    text: &str,
    label: usize,
    kind: RewardKind,
) -> Result<f64> {
    let logits = model.pathway_logits(k, text)?;
    reward_from_logits(&logits, label, kind)
}

pub fn reward_from_logits(logits: &[f64], label: usize, kind: RewardKind) -> Result<f64> {
    let probs = softmax(logits)?;
    match kind {
        RewardKind::NegLoss => Ok(-cross_entropy(&probs, label)?),
        RewardKind::Accuracy => Ok(if argmax_tie_low(&probs) == label {
            1.0
        } else {
            0.0
        }),
    }
}

/// Roll out all n pathways and return r_a minus the mean pathway reward.
pub fn relative_reward(
    model: &DmoeModel,
    text: &str,
    label: usize,
    action: usize,
    kind: RewardKind,
) -> Result<f64> {
    let rewards = rollout_rewards(model, text, label, kind)?;
    relative_from_rollout(&rewards, action)
}

/// Rewards of every pathway for one input; shared across the baseline and
/// the selected action.
pub fn rollout_rewards(
    model: &DmoeModel,
    text: &str,
    label: usize,
    kind: RewardKind,
) -> Result<Vec<f64>> {
    (0..model.n_domains())
        .map(|k| pathway_reward(model, k, text, label, kind))
        .collect()
}

pub fn relative_from_rollout(rewards: &[f64], action: usize) -> Result<f64> {
    if action >= rewards.len() {
        return Err(DeerError::Domain(format!(
            "action {action} out of range (n={})",
            rewards.len()
        )));
    }
    let baseline = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards[action] - baseline)
}

/// Standardize a reward batch to zero mean and unit population std.
/// Degenerate batches (std below 1e-8) are only mean-centered.
pub fn normalize_rewards(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(DeerError::Data("empty reward batch".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        Ok(rewards.iter().map(|r| r - mean).collect())
    } else {
        Ok(rewards.iter().map(|r| (r - mean) / (std + 1e-8)).collect())
    }
}

/// REINFORCE surrogate with entropy bonus over a fixed batch:
/// L = -mean[log pi(a|s) * r] - beta * mean[H(pi(.|s))].
/// Pure in the policy parameters; the finite-difference oracle probes it.
pub fn surrogate_loss(
    policy: &PolicyNetwork,
    norm: &StateNormalizer,
    states: &[Vec<f64>],
    actions: &[usize],
    rewards: &[f64],
    entropy_coef: f64,
) -> Result<f64> {
    let mut loss = 0.0;
    for ((s, &a), &r) in states.iter().zip(actions).zip(rewards) {
        let (_, probs) = policy.forward_cached(norm, s)?;
        loss += -probs[a].max(1e-12).ln() * r - entropy_coef * entropy(&probs);
    }
    Ok(loss / states.len() as f64)
}

/// Analytic gradient of [`surrogate_loss`] for the same batch.
pub fn surrogate_grads(
    policy: &PolicyNetwork,
    norm: &StateNormalizer,
    states: &[Vec<f64>],
    actions: &[usize],
    rewards: &[f64],
    entropy_coef: f64,
) -> Result<GradStore> {
    let mut grads = GradStore::new();
    let scale = 1.0 / states.len() as f64;
    let spec = policy.spec();
    for ((s, &a), &r) in states.iter().zip(actions).zip(rewards) {
        let (cache, probs) = policy.forward_cached(norm, s)?;
        let ent = entropy(&probs);
        let mut dz = vec![0.0; probs.len()];
        for j in 0..probs.len() {
            // d(-log pi(a))/dz_j = pi_j - [j==a]; d(-H)/dz_j = pi_j (ln pi_j + H)
            let pick = if j == a { 1.0 } else { 0.0 };
            dz[j] = scale
                * (r * (probs[j] - pick)
                    + entropy_coef * probs[j] * (probs[j].max(1e-300).ln() + ent));
        }
        spec.backward(&policy.store, &cache, &dz, &mut grads);
    }
    Ok(grads)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PolicyHistory {
    /// Mean relative reward of the sampled actions, per epoch.
    pub mean_reward: Vec<f64>,
    /// Fraction of samples whose sampled pathway predicted correctly.
    pub routed_acc: Vec<f64>,
}

/// Precomputed per-sample rollout over the frozen model: state vector plus
/// the reward of every pathway. The model is frozen, so both are constant
/// across policy epochs.
pub struct RolloutTable {
    pub states: Vec<Vec<f64>>,
    /// rewards[i][k]: reward of routing sample i through pathway k.
    pub rewards: Vec<Vec<f64>>,
    /// correct[i][k]: whether pathway k classifies sample i correctly.
    pub correct: Vec<Vec<bool>>,
}

pub fn build_rollout_table(
    model: &DmoeModel,
    samples: &[Sample],
    kind: RewardKind,
) -> Result<RolloutTable> {
    let mut states = Vec::with_capacity(samples.len());
    let mut rewards = Vec::with_capacity(samples.len());
    let mut correct = Vec::with_capacity(samples.len());
    for s in samples {
        let h0 = model.embed_raw(&s.text);
        states.push(model.embed_from_raw(&h0)?);
        let mut rs = Vec::with_capacity(model.n_domains());
        let mut cs = Vec::with_capacity(model.n_domains());
        for k in 0..model.n_domains() {
            let logits = model.pathway_logits_h0(k, &h0)?;
            rs.push(reward_from_logits(&logits, s.label as usize, kind)?);
            let probs = softmax(&logits)?;
            cs.push(argmax_tie_low(&probs) == s.label as usize);
        }
        rewards.push(rs);
        correct.push(cs);
    }
    Ok(RolloutTable {
        states,
        rewards,
        correct,
    })
}

/// Entropy coefficient schedule: constant, then linear decay to 0 over the
/// last 20% of epochs.
fn entropy_coef_at(cfg: &PolicyConfig, epoch: usize) -> f64 {
    let decay_start = (cfg.epochs as f64 * 0.8).floor();
    let e = epoch as f64;
    if e < decay_start || cfg.epochs == 0 {
        cfg.entropy_coef
    } else {
        let span = cfg.epochs as f64 - decay_start;
        cfg.entropy_coef * ((cfg.epochs as f64 - e) / span).max(0.0)
    }
}

/// Train the policy over a frozen detector. Errors unless every model
/// parameter is frozen; the detector is never mutated.
pub fn train_policy(
    policy: &mut PolicyNetwork,
    norm: &mut StateNormalizer,
    model: &DmoeModel,
    train: &[Sample],
    cfg: &PolicyConfig,
) -> Result<PolicyHistory> {
    if model.store.trainable_len() != 0 {
        return Err(DeerError::Contract(
            "detector must be fully frozen before policy training".into(),
        ));
    }
    if train.is_empty() {
        return Err(DeerError::Data("empty training set".into()));
    }
    if policy.n_domains != model.n_domains() {
        return Err(DeerError::Compat(format!(
            "policy covers {} domains, model has {}",
            policy.n_domains,
            model.n_domains()
        )));
    }
    let table = build_rollout_table(model, train, cfg.reward_kind)?;
    train_policy_on_table(policy, norm, &table, cfg)
}

/// Core REINFORCE loop over a precomputed rollout table. Split out so tests
/// can drive it with hand-built rewards.
pub fn train_policy_on_table(
    policy: &mut PolicyNetwork,
    norm: &mut StateNormalizer,
    table: &RolloutTable,
    cfg: &PolicyConfig,
) -> Result<PolicyHistory> {
    let n_samples = table.states.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x706f_6c69_6379);
    let mut history = PolicyHistory::default();

    for epoch in 0..cfg.epochs {
        let beta = entropy_coef_at(cfg, epoch);
        let mut order: Vec<usize> = (0..n_samples).collect();
        order.shuffle(&mut rng);
        let mut reward_sum = 0.0;
        let mut correct_sum = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut states = Vec::with_capacity(batch.len());
            let mut actions = Vec::with_capacity(batch.len());
            let mut rewards = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &table.states[i];
                norm.update(s);
                let probs = policy.forward(norm, s)?;
                let action = WeightedIndex::new(&probs)
                    .map_err(|e| DeerError::Numeric(format!("invalid policy distribution: {e}")))?
                    .sample(&mut rng);
                let r_final = relative_from_rollout(&table.rewards[i], action)?;
                reward_sum += r_final;
                if table.correct[i][action] {
                    correct_sum += 1;
                }
                states.push(s.clone());
                actions.push(action);
                rewards.push(r_final);
            }
            let rewards = normalize_rewards(&rewards)?;
            let grads = surrogate_grads(policy, norm, &states, &actions, &rewards, beta)?;
            adamw_step(&mut policy.store, &grads, &mut policy.opt)?;
        }
        history.mean_reward.push(reward_sum / n_samples as f64);
        history.routed_acc.push(correct_sum as f64 / n_samples as f64);
    }
    Ok(history)
}
