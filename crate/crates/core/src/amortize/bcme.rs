use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::njode::LatentState;
use crate::rng;

use super::nets::ReprNet;
use super::pem::{pem_distance, PemConfig, PolicyEnv};
use super::perm::{augment_magnitude, augment_permutation, identity_perm};

/// Floor for PEM weights that end up in a denominator.
pub const WEIGHT_FLOOR: f64 = 1e-8;

/// `exp(-d / beta)`.
pub fn pem_weight(d: f64, beta: f64) -> f64 {
    (-d / beta).exp()
}

/// Weighted two-sided InfoNCE on similarity nodes.
///
/// Magnitude term: `-log(G1 e^{sm1} / (G1 e^{sm1} + sum_k (1 - Gk) e^{smk}))`.
/// Positional term: `+log((e^{sp1}/G1) / (e^{sp1}/G1 + sum_k e^{spk}/(1 - Gk)))`.
/// `G1` and every `1 - Gk` are floored at [`WEIGHT_FLOOR`].
pub fn bcme_graph(g: &mut Graph, sm1: Var, smk: &[Var], sp1: Var, spk: &[Var], gamma_pos: f64, gamma_neg: &[f64]) -> Var {
    let g1 = gamma_pos.max(WEIGHT_FLOOR);
    let gk: Vec<f64> = gamma_neg.iter().map(|&x| (1.0 - x).max(WEIGHT_FLOOR)).collect();

    let e1 = g.exp(sm1);
    let a1 = g.scale(e1, g1);
    let mut den = a1;
    for (&s, &w) in smk.iter().zip(&gk) {
        let e = g.exp(s);
        let t = g.scale(e, w);
        den = g.add(den, t);
    }
    let ratio = g.div(a1, den);
    let l1 = g.log(ratio);
    let term1 = g.neg(l1);

    let f1 = g.exp(sp1);
    let b1 = g.scale(f1, 1.0 / g1);
    let mut den = b1;
    for (&s, &w) in spk.iter().zip(&gk) {
        let e = g.exp(s);
        let t = g.scale(e, 1.0 / w);
        den = g.add(den, t);
    }
    let ratio = g.div(b1, den);
    let term2 = g.log(ratio);
    g.add(term1, term2)
}

/// [`bcme_graph`] on plain similarities.
pub fn bcme_loss(sm1: f64, smk: &[f64], sp1: f64, spk: &[f64], gamma_pos: f64, gamma_neg: &[f64]) -> Result<f64> {
    if smk.is_empty() || smk.len() != spk.len() || smk.len() != gamma_neg.len() {
        return Err(Error::contract("need at least one negative and matching lengths"));
    }
    let mut g = Graph::new();
    let c = |g: &mut Graph, v: f64| g.scalar(v);
    let a = c(&mut g, sm1);
    let ak: Vec<Var> = smk.iter().map(|&v| c(&mut g, v)).collect();
    let b = c(&mut g, sp1);
    let bk: Vec<Var> = spk.iter().map(|&v| c(&mut g, v)).collect();
    let out = bcme_graph(&mut g, a, &ak, b, &bk, gamma_pos, gamma_neg);
    Ok(g.item(out))
}

/// Anchor, one permuted positive, magnitude-perturbed negatives, and their
/// PEM weights (treated as constants).
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveSample {
    pub anchor: Tensor,
    pub positive: Tensor,
    pub negatives: Vec<Tensor>,
    pub gamma_pos: f64,
    pub gamma_neg: Vec<f64>,
}

/// Draw augmentations of `state` and weight them by PEM under `env`.
pub fn contrastive_sample(
    state: &LatentState,
    env: &PolicyEnv<'_>,
    pem: &PemConfig,
    beta: f64,
    n_neg: usize,
    seed: u64,
) -> Result<ContrastiveSample> {
    if n_neg == 0 || !(beta > 0.0) {
        return Err(Error::contract("need at least one negative and beta > 0"));
    }
    let (positive, perm) = augment_permutation(&state.h, rng::derive(seed, 0))?;
    let d_pos = pem_distance(state, &LatentState::new(positive.clone(), state.tau), &perm, env, pem)?;
    let id = identity_perm(state.h.rows());
    let mut negatives = Vec::with_capacity(n_neg);
    let mut gamma_neg = Vec::with_capacity(n_neg);
    for k in 0..n_neg {
        let (h, _) = augment_magnitude(&state.h, rng::derive(seed, k as u64 + 1));
        let d = pem_distance(state, &LatentState::new(h.clone(), state.tau), &id, env, pem)?;
        gamma_neg.push(pem_weight(d, beta));
        negatives.push(h);
    }
    Ok(ContrastiveSample {
        anchor: state.h.clone(),
        positive,
        negatives,
        gamma_pos: pem_weight(d_pos, beta),
        gamma_neg,
    })
}

/// Loss of `sample` under the representation bound at `vars`.
pub fn sample_loss_graph(repr: &ReprNet, g: &mut Graph, vars: &[Var], sample: &ContrastiveSample) -> Var {
    let (p0, m0) = repr.forward_graph(g, vars, &sample.anchor);
    let (p1, m1) = repr.forward_graph(g, vars, &sample.positive);
    let sm1 = g.cosine(m0, m1);
    let sp1 = g.cosine(p0, p1);
    let mut smk = Vec::with_capacity(sample.negatives.len());
    let mut spk = Vec::with_capacity(sample.negatives.len());
    for h in &sample.negatives {
        let (pk, mk) = repr.forward_graph(g, vars, h);
        smk.push(g.cosine(m0, mk));
        spk.push(g.cosine(p0, pk));
    }
    bcme_graph(g, sm1, &smk, sp1, &spk, sample.gamma_pos, &sample.gamma_neg)
}

pub fn sample_loss(repr: &ReprNet, sample: &ContrastiveSample) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = repr.params.iter().map(|p| g.constant(p.clone())).collect();
    let l = sample_loss_graph(repr, &mut g, &vars, sample);
    g.item(l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_zero_case() {
        let l = bcme_loss(0.3, &[0.3], 0.3, &[0.3], 1.0, &[0.0]).unwrap();
        assert!(l.abs() <= 1e-12, "{l}");
    }

    #[test]
    fn equal_similarity_sign_follows_weights() {
        // With one negative and equal similarities the loss is log((1 - Gk) / G1).
        for (g1, gk) in [(0.2, 0.1), (0.5, 0.3), (0.9, 0.05)] {
            let l = bcme_loss(0.7, &[0.7], 0.7, &[0.7], g1, &[gk]).unwrap();
            assert!((l - ((1.0 - gk) / g1).ln()).abs() < 1e-12);
        }
        assert!(bcme_loss(0.0, &[0.0], 0.0, &[0.0], 0.4, &[0.1]).unwrap() > 0.0);
        assert!(bcme_loss(0.0, &[0.0], 0.0, &[0.0], 0.95, &[0.5]).unwrap() < 0.0);
    }

    #[test]
    fn magnitude_term_saturates() {
        // sp1 = spk and G1 = 1, Gk = 0 makes the positional term -log 2.
        let l = bcme_loss(50.0, &[-50.0], 0.0, &[0.0], 1.0, &[0.0]).unwrap();
        assert!((l + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn negatives_are_exchangeable() {
        let a = bcme_loss(0.4, &[0.1, -0.5, 0.8], 0.2, &[0.9, 0.0, -0.3], 0.6, &[0.2, 0.7, 0.4]).unwrap();
        let b = bcme_loss(0.4, &[0.8, 0.1, -0.5], 0.2, &[-0.3, 0.9, 0.0], 0.6, &[0.4, 0.2, 0.7]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_stay_finite() {
        assert!(bcme_loss(0.1, &[0.2], 0.3, &[0.4], 0.0, &[1.0]).unwrap().is_finite());
        assert!(bcme_loss(0.1, &[], 0.3, &[], 0.5, &[]).is_err());
    }
}
