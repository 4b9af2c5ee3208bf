//! Domain-label-free detection: top-m routing under the policy plus
//! logit-level ensemble fusion over the selected pathways.

use serde::{Deserialize, Serialize};

use crate::dmoe::DmoeModel;
use crate::error::{DeerError, Result};
use crate::nnprims::{argmax_tie_low, softmax};
use crate::policy::{PolicyNetwork, StateNormalizer};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    pub domain: String,
    pub prob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionResult {
    /// 0 human, 1 machine; argmax of `class_probs` with ties toward 0.
    pub label: usize,
    pub class_probs: Vec<f64>,
    /// Top-m domains by routing probability, descending.
    pub selected: Vec<Selection>,
    pub m_used: usize,
}

/// Rank domains by routing probability; returns min(m, n) `(index, prob)`
/// pairs sorted descending, ties broken by the smaller domain index.
pub fn route_top_m(
    policy: &PolicyNetwork,
    norm: &StateNormalizer,
    s: &[f64],
    m: usize,
) -> Result<Vec<(usize, f64)>> {
    if m < 1 {
        return Err(DeerError::Config("m must be >= 1".into()));
    }
    let probs = policy.forward(norm, s)?;
    let mut ranked: Vec<(usize, f64)> = probs.into_iter().enumerate().collect();
    // stable sort keeps the lower index first among equal probabilities
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    ranked.truncate(m);
    Ok(ranked)
}

/// Class distribution from the top-m ensemble:
/// softmax(sum_j pi(a_j) * pathway_logits(d_j, x)).
/// Raw pi values weight the logits unless `renormalize` is set.
pub fn ensemble_predict(
    model: &DmoeModel,
    policy: &PolicyNetwork,
    norm: &StateNormalizer,
    text: &str,
    m: usize,
    renormalize: bool,
) -> Result<Vec<f64>> {
    let h0 = model.embed_raw(text);
    let s = model.embed_from_raw(&h0)?;
    let selected = route_top_m(policy, norm, &s, m)?;
    ensemble_from_selection(model, &h0, &selected, renormalize)
}

pub(crate) fn ensemble_from_selection(
    model: &DmoeModel,
    h0: &[f64],
    selected: &[(usize, f64)],
    renormalize: bool,
) -> Result<Vec<f64>> {
    let mass: f64 = selected.iter().map(|(_, p)| p).sum();
    let mut z = vec![0.0; 2];
    for &(k, p) in selected {
        let w = if renormalize && mass > 0.0 { p / mass } else { p };
        let logits = model.pathway_logits_h0(k, h0)?;
        for (zi, li) in z.iter_mut().zip(&logits) {
            *zi += w * li;
        }
    }
    softmax(&z)
}

/// Full pipeline: embed, route, ensemble, argmax (ties toward human).
pub fn detect(
    model: &DmoeModel,
    policy: &PolicyNetwork,
    norm: &StateNormalizer,
    text: &str,
    m: usize,
    renormalize: bool,
) -> Result<DetectionResult> {
    if policy.n_domains != model.n_domains() {
        return Err(DeerError::Compat(format!(
            "policy covers {} domains, model has {}",
            policy.n_domains,
            model.n_domains()
        )));
    }
    let h0 = model.embed_raw(text);
    let s = model.embed_from_raw(&h0)?;
    let selected = route_top_m(policy, norm, &s, m)?;
    let class_probs = ensemble_from_selection(model, &h0, &selected, renormalize)?;
    let label = argmax_tie_low(&class_probs);
    Ok(DetectionResult {
        label,
        class_probs,
        m_used: selected.len(),
        selected: selected
            .into_iter()
            .map(|(k, p)| Selection {
                domain: model.domain_names[k].clone(),
                prob: p,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dmoe::DmoeConfig;
    use crate::encoder::EncoderConfig;
    use crate::policy::PolicyConfig;

    fn fixture(n: usize) -> (DmoeModel, PolicyNetwork, StateNormalizer) {
        let names = (0..n).map(|k| format!("d{k}")).collect();
        let model = DmoeModel::new(
            EncoderConfig::with_dim(8),
            DmoeConfig {
                m1: 1,
                m2: 1,
                expert_hidden: 4,
                head_hidden: 3,
                ..DmoeConfig::default()
            },
            names,
            7,
        )
        .unwrap();
        let policy = PolicyNetwork::new(8, 4, n, &PolicyConfig::default(), 9);
        let norm = StateNormalizer::new(8);
        (model, policy, norm)
    }

    /// Force pi to a fixed distribution by zeroing l2.w and setting biases.
    fn force_policy(policy: &mut PolicyNetwork, logits: &[f64]) {
        let len = policy.store.get("policy.l2.w").len();
        *policy.store.data_mut("policy.l2.w") = vec![0.0; len];
        *policy.store.data_mut("policy.l2.b") = logits.to_vec();
    }

    #[test]
    fn route_top_m_hand_sort() {
        // pi = [0.1, 0.6, 0.3] via log-prob biases
        let (_, mut policy, norm) = fixture(3);
        force_policy(&mut policy, &[0.1f64.ln(), 0.6f64.ln(), 0.3f64.ln()]);
        let top = route_top_m(&policy, &norm, &[0.0; 8], 2).unwrap();
        assert_eq!(top.len(), 2);
        assert_eq!(top[0].0, 1);
        assert!((top[0].1 - 0.6).abs() < 1e-9);
        assert_eq!(top[1].0, 2);
        assert!((top[1].1 - 0.3).abs() < 1e-9);
    }

    #[test]
    fn route_top_m_caps_at_n_and_tie_breaks_by_index() {
        let (_, mut policy, norm) = fixture(3);
        force_policy(&mut policy, &[0.0, 0.0, 0.0]);
        let all = route_top_m(&policy, &norm, &[0.5; 8], 10).unwrap();
        assert_eq!(all.len(), 3);
        let two = route_top_m(&policy, &norm, &[0.5; 8], 2).unwrap();
        assert_eq!((two[0].0, two[1].0), (0, 1));
        assert!(matches!(
            route_top_m(&policy, &norm, &[0.0; 8], 0),
            Err(DeerError::Config(_))
        ));
    }

    #[test]
    fn ensemble_hand_two_domain() {
        // pi=[0.75,0.25], pathway logits forced to [1,0] and [0,1] via a
        // zeroed head is impossible per-domain (shared head), so check the
        // formula against a direct recomputation instead.
        let (model, mut policy, norm) = fixture(2);
        force_policy(&mut policy, &[3.0f64.ln(), 0.0]);
        let text = "alpha beta gamma";
        let p = ensemble_predict(&model, &policy, &norm, text, 2, false).unwrap();
        let l0 = model.pathway_logits(0, text).unwrap();
        let l1 = model.pathway_logits(1, text).unwrap();
        let z = [
            0.75 * l0[0] + 0.25 * l1[0],
            0.75 * l0[1] + 0.25 * l1[1],
        ];
        let expect = softmax(&z).unwrap();
        for (a, b) in p.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ensemble_m1_label_matches_argmax_pathway() {
        let (model, policy, norm) = fixture(3);
        for text in ["one two three", "zz yy xx", "a", ""] {
            let s = model.state_of(text).unwrap();
            let top = route_top_m(&policy, &norm, &s, 1).unwrap();
            let r = detect(&model, &policy, &norm, text, 1, false).unwrap();
            let (_, label) = model.classify_pathway(top[0].0, text).unwrap();
            assert_eq!(r.label, label);
        }
    }

    #[test]
    fn ensemble_m_eq_n_is_untruncated_fusion() {
        let (model, policy, norm) = fixture(3);
        let text = "some words here now";
        let via_top = ensemble_predict(&model, &policy, &norm, text, 3, false).unwrap();
        // untruncated: weight every pathway by its full-pi probability
        let s = model.state_of(text).unwrap();
        let pi = policy.forward(&norm, &s).unwrap();
        let mut z = [0.0; 2];
        for (k, &w) in pi.iter().enumerate() {
            let l = model.pathway_logits(k, text).unwrap();
            z[0] += w * l[0];
            z[1] += w * l[1];
        }
        let full = softmax(&z).unwrap();
        for (a, b) in via_top.iter().zip(&full) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn renormalized_weights_sum_to_one_effect() {
        let (model, mut policy, norm) = fixture(2);
        force_policy(&mut policy, &[3.0f64.ln(), 0.0]);
        let text = "foo bar";
        // renormalized m=1 uses weight 1.0 on the best pathway
        let renorm = ensemble_predict(&model, &policy, &norm, text, 1, true).unwrap();
        let direct = softmax(&model.pathway_logits(0, text).unwrap()).unwrap();
        for (a, b) in renorm.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn detect_deterministic_and_empty_text_ok() {
        let (model, policy, norm) = fixture(3);
        let a = detect(&model, &policy, &norm, "repeat me", 3, false).unwrap();
        let b = detect(&model, &policy, &norm, "repeat me", 3, false).unwrap();
        assert_eq!(a.class_probs, b.class_probs);
        assert_eq!(a.label, b.label);

        let r = detect(&model, &policy, &norm, "", 3, false).unwrap();
        assert!((r.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(r.selected.len(), 3);
        assert_eq!(r.m_used, 3);
    }

    #[test]
    fn detect_rejects_domain_count_mismatch() {
        let (model, _, norm) = fixture(3);
        let policy = PolicyNetwork::new(8, 4, 2, &PolicyConfig::default(), 1);
        assert!(matches!(
            detect(&model, &policy, &norm, "x", 3, false),
            Err(DeerError::Compat(_))
        ));
    }

    // Full-chain recomputation on a tiny fixed model, independent of the
    // pipeline plumbing.
    #[test]
    fn detect_matches_manual_chain() {
        let (model, policy, norm) = fixture(2);
        let text = "a b";
        let s = model.state_of(text).unwrap();
        let pi = policy.forward(&norm, &s).unwrap();
        let mut ranked: Vec<(usize, f64)> = pi.iter().cloned().enumerate().collect();
        ranked.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap());
        let mut z = [0.0; 2];
        for &(k, w) in &ranked {
            let l = model.pathway_logits(k, text).unwrap();
            z[0] += w * l[0];
            z[1] += w * l[1];
        }
        let expect = softmax(&z).unwrap();
        let got = detect(&model, &policy, &norm, text, 2, false).unwrap();
        for (a, b) in got.class_probs.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(got.label, argmax_tie_low(&expect));
    }
}
