use serde::{Deserialize, Serialize};

use crate::diffcore::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::njode::{Bound, LatentState, NjodeModel};

use super::constraints::{project_topk, ActionMatrix, ConstraintSpec};
use super::relax::{relax, soft_penalty_graph, Relaxation};

/// Lookahead settings. The terminal value is fixed at zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub opt_iters: usize,
    pub lr: f64,
    /// Recorded for provenance; optimisation starts from zero logits and is
    /// deterministic.
    pub seed: u64,
    pub relaxation: Relaxation,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            horizon: 5,
            gamma: 0.95,
            opt_iters: 30,
            lr: 0.1,
            seed: 0,
            relaxation: Relaxation::TopK,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::contract("horizon must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::contract(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::contract("learning rate must be positive"));
        }
        Ok(())
    }
}

/// `sum_{h<H} gamma^h (-sum_n lambda_hat_n^{i+h} - r_aug(p^h, p^{h-1}))` on
/// one mean-field rollout from `h`, with `W ⊙ (1 - p^h)` applied at step `h`.
#[allow(clippy::too_many_arguments)]
pub fn lookahead_graph(
    b: &Bound<'_>,
    g: &mut Graph,
    h: Var,
    tau: f64,
    ps: &[Var],
    gamma: f64,
    cs: &ConstraintSpec,
    p_prev: Var,
) -> Result<Var> {
    let mut h = h;
    let mut acc: Option<Var> = None;
    let mut w = 1.0;
    let mut prev = p_prev;
    let width = b.model.cfg.bin_width;
    for (i, &p) in ps.iter().enumerate() {
        let weff = b.weff(g, Some(p));
        let (lam, hn) = crate::njode::bin_step(b, g, h, tau + i as f64 * width, weff, None)?;
        let mut cost = g.sum(lam);
        if let Some(pen) = soft_penalty_graph(g, p, prev, cs) {
            cost = g.add(cost, pen);
        }
        let term = g.scale(cost, -w);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
        w *= gamma;
        prev = p;
        h = hn;
    }
    acc.ok_or_else(|| Error::contract("empty probability sequence"))
}

/// Value of [`lookahead_graph`] for explicit probabilities.
pub fn lookahead_objective(
    model: &NjodeModel,
    state: &LatentState,
    ps: &[Tensor],
    cfg: &PlanConfig,
    cs: &ConstraintSpec,
    p_prev: &Tensor,
) -> Result<f64> {
    cfg.validate()?;
    if ps.len() != cfg.horizon {
        return Err(Error::contract(format!("{} probability matrices for horizon {}", ps.len(), cfg.horizon)));
    }
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let h = g.constant(state.h.clone());
    let pv: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
    let prev = g.constant(p_prev.clone());
    let o = lookahead_graph(&b, &mut g, h, state.tau, &pv, cfg.gamma, cs, prev)?;
    Ok(g.item(o))
}

/// Objective as a function of per-step logits, with its gradient.
#[allow(clippy::too_many_arguments)]
pub fn objective_and_grad(
    model: &NjodeModel,
    state: &LatentState,
    logits: &[Tensor],
    admissible: &[Vec<bool>],
    cfg: &PlanConfig,
    cs: &ConstraintSpec,
    p_prev: &Tensor,
) -> Result<(f64, Vec<Tensor>, Tensor)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let h = g.constant(state.h.clone());
    let lv: Vec<Var> = logits.iter().map(|l| g.leaf(l.clone())).collect();
    let ps: Vec<Var> = lv.iter().map(|&l| relax(&mut g, l, admissible, cs.k, cfg.relaxation)).collect();
    let prev = g.constant(p_prev.clone());
    let o = lookahead_graph(&b, &mut g, h, state.tau, &ps, cfg.gamma, cs, prev)?;
    let grads = g.grad(o, &lv)?;
    Ok((g.item(o), grads, g.value(ps[0]).clone()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    /// Objective at every iterate, starting from zero logits.
    pub objectives: Vec<f64>,
    pub best_iter: usize,
    /// First-step relaxed probabilities of the best iterate.
    pub p_first: Tensor,
    /// Set when optimisation stopped on a non-finite value.
    pub stopped: Option<String>,
}

impl PlanDiagnostics {
    pub fn best_objective(&self) -> f64 {
        self.objectives[self.best_iter]
    }
}

/// Optimise logits from zero by gradient ascent, project the first step.
///
/// The best iterate seen is kept, so a diverging run still returns a plan no
/// worse than the zero-logit start.
pub fn plan_step(
    model: &NjodeModel,
    state: &LatentState,
    cfg: &PlanConfig,
    cs: &ConstraintSpec,
    p_prev: &ActionMatrix,
    admissible: &[Vec<bool>],
) -> Result<(ActionMatrix, PlanDiagnostics)> {
    cfg.validate()?;
    let n = model.n_nodes();
    let prev = p_prev.to_tensor();
    let mut logits = vec![Tensor::zeros(n, n); cfg.horizon];
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &logits);
    let mut objectives = Vec::with_capacity(cfg.opt_iters + 1);
    let mut best: Option<(f64, usize, Tensor)> = None;
    let mut stopped = None;
    for it in 0..=cfg.opt_iters {
        let (obj, grads, p0) = match objective_and_grad(model, state, &logits, admissible, cfg, cs, &prev) {
            Ok(r) => r,
            Err(e @ Error::NumericFault { .. }) if best.is_some() => {
                stopped = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        if !obj.is_finite() || grads.iter().any(|t| !t.is_finite()) {
            if best.is_none() {
                return Err(Error::NumericFault {
                    node: 0,
                    what: "non-finite planning objective at zero logits".into(),
                });
            }
            stopped = Some(format!("non-finite objective at iteration {it}"));
            break;
        }
        objectives.push(obj);
        if best.as_ref().is_none_or(|b| obj > b.0) {
            best = Some((obj, it, p0));
        }
        if it == cfg.opt_iters {
            break;
        }
        let neg: Vec<Tensor> = grads.iter().map(|t| t.scale(-1.0)).collect();
        adam.step(&mut logits, &neg);
    }
    let (_, best_iter, p_first) = best.expect("zero-logit iterate evaluated");
    let action = project_topk(&p_first, cs, admissible);
    Ok((
        action,
        PlanDiagnostics {
            objectives,
            best_iter,
            p_first,
            stopped,
        },
    ))
}
