//! Modular expansion: adding one domain's expert group and gate to a trained
//! model, fine-tuning only the new group plus the shared experts while every
//! prior domain-specific parameter stays frozen.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::dmoe::{train_stage1, Ablation, DmoeModel, TrainHistory};
use crate::error::{DeerError, Result};
use crate::nnprims::{AdamWConfig, AdamWState};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpandConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Freeze the classification head too, matching the narrowest reading of
    /// "only this expert and the shared experts". Off by default: a frozen
    /// head cannot absorb shifted shared-expert representations.
    pub strict_freeze_head: bool,
    pub seed: u64,
}

impl Default for ExpandConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            strict_freeze_head: false,
            seed: 0,
        }
    }
}

/// Parameter accounting after (or before) expansion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamReport {
    pub trainable_count: usize,
    pub frozen_count: usize,
    pub total_count: usize,
    pub trainable_fraction: f64,
    /// Counts per component prefix (adapter / ds / dc / gate / head).
    pub per_component: std::collections::BTreeMap<String, ComponentCount>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ComponentCount {
    pub trainable: usize,
    pub frozen: usize,
}

pub fn param_report(model: &DmoeModel) -> ParamReport {
    let mut per_component: std::collections::BTreeMap<String, ComponentCount> =
        std::collections::BTreeMap::new();
    for (name, p) in model.store.iter() {
        let component = name.split('.').next().unwrap_or("other").to_string();
        let e = per_component.entry(component).or_default();
        if p.frozen {
            e.frozen += p.len();
        } else {
            e.trainable += p.len();
        }
    }
    let trainable_count = model.store.trainable_len();
    let total_count = model.store.total_len();
    ParamReport {
        trainable_count,
        frozen_count: total_count - trainable_count,
        total_count,
        trainable_fraction: if total_count == 0 {
            0.0
        } else {
            trainable_count as f64 / total_count as f64
        },
        per_component,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpandReport {
    pub new_domain: String,
    pub n_domains: usize,
    pub params: ParamReport,
    pub history: TrainHistory,
}

/// Append a fresh expert group + gate for `new_domain_name`, freeze all
/// prior domain-specific parameters (and the encoder adapter), and fine-tune
/// on the new domain's data only. The frozen set is bit-identical afterward.
pub fn expand_domain(
    model: &mut DmoeModel,
    new_domain_name: &str,
    new_train: &[Sample],
    new_val: &[Sample],
    cfg: &ExpandConfig,
) -> Result<ExpandReport> {
    if model.domain_names.iter().any(|d| d == new_domain_name) {
        return Err(DeerError::Config(format!(
            "domain `{new_domain_name}` already present"
        )));
    }
    if model.cfg.ablation == Ablation::Base {
        return Err(DeerError::Config(
            "base-ablation model has no expert groups to expand".into(),
        ));
    }
    for s in new_train.iter().chain(new_val) {
        if s.domain.as_deref() != Some(new_domain_name) {
            return Err(DeerError::Data(format!(
                "expansion data must be tagged `{new_domain_name}`"
            )));
        }
    }

    let k_new = model.n_domains();
    model.domain_names.push(new_domain_name.to_string());
    model.init_domain_params(k_new, cfg.seed);

    // freeze everything, then re-open the fine-tune set
    model.store.freeze_all();
    model.store.freeze_prefix(&format!("ds.{k_new}."), false);
    model.store.freeze_prefix(&format!("gate.{k_new}."), false);
    for j in 0..model.cfg.m2 {
        model.store.freeze_prefix(&format!("dc.{j}."), false);
    }
    if !cfg.strict_freeze_head {
        model.store.freeze_prefix("head.", false);
    }

    let snapshot: Vec<(String, Vec<u64>)> = model
        .store
        .iter()
        .filter(|(_, p)| p.frozen)
        .map(|(n, p)| (n.clone(), p.data.iter().map(|v| v.to_bits()).collect()))
        .collect();

    // fresh optimizer: stale moments from stage-1 must not leak into the
    // fine-tune, and the new params have no moments yet anyway
    model.opt = AdamWState::new(AdamWConfig::new(cfg.lr, model.cfg.weight_decay));
    let (epochs0, batch0, lr0) = (model.cfg.epochs, model.cfg.batch_size, model.cfg.lr);
    model.cfg.epochs = cfg.epochs;
    model.cfg.batch_size = cfg.batch_size;
    model.cfg.lr = cfg.lr;
    model.cfg.seed = cfg.seed;
    let history = train_stage1(model, new_train, new_val);
    model.cfg.epochs = epochs0;
    model.cfg.batch_size = batch0;
    model.cfg.lr = lr0;
    let history = history?;

    for (name, bits) in &snapshot {
        let now = model.store.data(name);
        if now.len() != bits.len()
            || !now.iter().zip(bits).all(|(v, b)| v.to_bits() == *b)
        {
            return Err(DeerError::Contract(format!(
                "frozen parameter `{name}` changed during expansion"
            )));
        }
    }

    Ok(ExpandReport {
        new_domain: new_domain_name.to_string(),
        n_domains: model.n_domains(),
        params: param_report(model),
        history,
    })
}
