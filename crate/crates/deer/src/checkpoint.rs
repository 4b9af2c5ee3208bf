//! Checkpoint I/O: one JSON file per artifact with an embedded sidecar
//! (configs, domain names, normalizer statistics, optimizer moments, freeze
//! flags), so an artifact is self-describing and version-checkable.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dmoe::{DmoeConfig, DmoeModel};
use crate::encoder::EncoderConfig;
use crate::error::{DeerError, Result};
use crate::nnprims::{AdamWState, ParamStore};
use crate::policy::{PolicyConfig, PolicyNetwork, StateNormalizer};

const MAGIC: &str = "DEER1";

#[derive(Debug, Serialize, Deserialize)]
struct ModelCheckpoint {
    magic: String,
    kind: String,
    enc: EncoderConfig,
    cfg: DmoeConfig,
    domain_names: Vec<String>,
    store: ParamStore,
    opt: AdamWState,
}

#[derive(Debug, Serialize, Deserialize)]
struct PolicyCheckpoint {
    magic: String,
    kind: String,
    dim: usize,
    hidden: usize,
    n_domains: usize,
    cfg: PolicyConfig,
    store: ParamStore,
    opt: AdamWState,
    normalizer: StateNormalizer,
}

fn check_header(magic: &str, kind: &str, expect: &str, path: &Path) -> Result<()> {
    if magic != MAGIC {
        return Err(DeerError::Compat(format!(
            "{}: bad magic `{magic}` (expected {MAGIC})",
            path.display()
        )));
    }
    if kind != expect {
        return Err(DeerError::Compat(format!(
            "{}: checkpoint kind `{kind}`, expected `{expect}`",
            path.display()
        )));
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| DeerError::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| DeerError::Compat(format!("{}: malformed checkpoint: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string(value)?)?;
    Ok(())
}

pub fn save_model(path: impl AsRef<Path>, model: &DmoeModel) -> Result<()> {
    write_json(
        path.as_ref(),
        &ModelCheckpoint {
            magic: MAGIC.into(),
            kind: "dmoe".into(),
            enc: model.enc.clone(),
            cfg: model.cfg.clone(),
            domain_names: model.domain_names.clone(),
            store: model.store.clone(),
            opt: model.opt.clone(),
        },
    )
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DmoeModel> {
    let path = path.as_ref();
    let ckpt: ModelCheckpoint = read_json(path)?;
    check_header(&ckpt.magic, &ckpt.kind, "dmoe", path)?;
    Ok(DmoeModel {
        enc: ckpt.enc,
        cfg: ckpt.cfg,
        domain_names: ckpt.domain_names,
        store: ckpt.store,
        opt: ckpt.opt,
    })
}

pub fn save_policy(
    path: impl AsRef<Path>,
    policy: &PolicyNetwork,
    norm: &StateNormalizer,
    cfg: &PolicyConfig,
) -> Result<()> {
    write_json(
        path.as_ref(),
        &PolicyCheckpoint {
            magic: MAGIC.into(),
            kind: "policy".into(),
            dim: policy.dim,
            hidden: policy.hidden,
            n_domains: policy.n_domains,
            cfg: cfg.clone(),
            store: policy.store.clone(),
            opt: policy.opt.clone(),
            normalizer: norm.clone(),
        },
    )
}

pub fn load_policy(path: impl AsRef<Path>) -> Result<(PolicyNetwork, StateNormalizer, PolicyConfig)> {
    let path = path.as_ref();
    let ckpt: PolicyCheckpoint = read_json(path)?;
    check_header(&ckpt.magic, &ckpt.kind, "policy", path)?;
    if ckpt.normalizer.dim() != ckpt.dim {
        return Err(DeerError::Compat(format!(
            "{}: normalizer dim {} != state dim {}",
            path.display(),
            ckpt.normalizer.dim(),
            ckpt.dim
        )));
    }
    Ok((
        PolicyNetwork {
            dim: ckpt.dim,
            hidden: ckpt.hidden,
            n_domains: ckpt.n_domains,
            store: ckpt.store,
            opt: ckpt.opt,
        },
        ckpt.normalizer,
        ckpt.cfg,
    ))
}

/// Cross-artifact compatibility: same embedding dimension, same domain count.
pub fn check_pair(model: &DmoeModel, policy: &PolicyNetwork) -> Result<()> {
    if policy.dim != model.dim() {
        return Err(DeerError::Compat(format!(
            "policy state dim {} != model dim {}",
            policy.dim,
            model.dim()
        )));
    }
    if policy.n_domains != model.n_domains() {
        return Err(DeerError::Compat(format!(
            "policy covers {} domains, model has {}",
            policy.n_domains,
            model.n_domains()
        )));
    }
    Ok(())
}
