use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

use super::model::{Bound, LatentState, NjodeModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    Stochastic,
    MeanField,
}

/// Bin-by-bin record of a rollout.
///
/// `latents[0]` is the starting state; `latents[i + 1]` is the post-jump
/// state after bin `i`. `counts` is present only for stochastic rollouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub mode: RolloutMode,
    pub latents: Vec<LatentState>,
    pub intensities: Vec<Vec<f64>>,
    pub counts: Option<Vec<Vec<u64>>>,
}

impl RolloutTrace {
    pub fn steps(&self) -> usize {
        self.intensities.len()
    }

    /// `sum_i gamma^i sum_n lambda_n^i`.
    pub fn discounted_intensity(&self, gamma: f64) -> f64 {
        discounted(self.intensities.iter().map(|l| l.iter().sum::<f64>()), gamma)
    }

    /// `sum_i gamma^i sum_n x_n^i`; `None` for mean-field traces.
    pub fn discounted_counts(&self, gamma: f64) -> Option<f64> {
        self.counts
            .as_ref()
            .map(|c| discounted(c.iter().map(|x| x.iter().sum::<u64>() as f64), gamma))
    }
}

pub(crate) fn discounted(per_step: impl Iterator<Item = f64>, gamma: f64) -> f64 {
    let mut w = 1.0;
    let mut acc = 0.0;
    for v in per_step {
        acc += w * v;
        w *= gamma;
    }
    acc
}

/// Flow `state` forward to `t1` (no jump).
pub fn flow(model: &NjodeModel, state: &LatentState, t1: f64) -> Result<LatentState> {
    if t1 < state.tau {
        return Err(Error::contract(format!("flow target {t1} precedes tau = {}", state.tau)));
    }
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let h = g.constant(state.h.clone());
    let out = b.flow(&mut g, h, state.tau, t1 - state.tau)?;
    Ok(LatentState::new(g.value(out).clone(), t1))
}

/// Per-node intensity at `state`.
pub fn intensity(model: &NjodeModel, state: &LatentState) -> Vec<f64> {
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let h = g.constant(state.h.clone());
    let l = b.intensity(&mut g, h);
    g.value(l).data().to_vec()
}

/// Jump `state` with (possibly real-valued) counts `x` through `weff`.
pub fn jump_update(model: &NjodeModel, state: &LatentState, x: &[f64], weff: &Tensor) -> Result<LatentState> {
    let n = model.n_nodes();
    if x.len() != n || weff.dims2() != (n, n) || state.h.dims2() != (n, model.latent_dim()) {
        return Err(Error::contract("jump_update shape mismatch"));
    }
    if x.iter().any(|&v| v < 0.0) {
        return Err(Error::contract("counts must be nonnegative"));
    }
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let h = g.constant(state.h.clone());
    let xv = g.constant(Tensor::column(x.to_vec()));
    let w = g.constant(weff.clone());
    let out = b.jump(&mut g, h, xv, w);
    Ok(LatentState::new(g.value(out).clone(), state.tau))
}

/// One bin on a graph: flow, intensity, then jump with `x` (counts or the
/// intensity itself for mean-field). Returns `(lambda, h_next)`.
pub(crate) fn bin_step(
    b: &Bound<'_>,
    g: &mut Graph,
    h: Var,
    tau: f64,
    weff: Var,
    x: Option<Var>,
) -> Result<(Var, Var)> {
    let width = b.model.cfg.bin_width;
    let hm = b.flow(g, h, tau, width)?;
    let lam = b.intensity(g, hm);
    let xin = x.unwrap_or(lam);
    let hn = b.jump(g, hm, xin, weff);
    Ok((lam, hn))
}

/// Mean-field rollout recorded on `g`; returns per-step intensity nodes
/// (`N x 1`) and the final latent node. `cuts[i]`, when present, is the
/// intervention applied at step `i`.
pub fn mean_field_graph(
    b: &Bound<'_>,
    g: &mut Graph,
    h: Var,
    tau: f64,
    steps: usize,
    cuts: &[Option<Var>],
) -> Result<(Vec<Var>, Var)> {
    let mut h = h;
    let mut lams = Vec::with_capacity(steps);
    let base = b.weff(g, None);
    for i in 0..steps {
        let weff = match cuts.get(i).copied().flatten() {
            Some(c) => b.weff(g, Some(c)),
            None => base,
        };
        let (lam, hn) = bin_step(b, g, h, tau + i as f64 * b.model.cfg.bin_width, weff, None)?;
        lams.push(lam);
        h = hn;
    }
    Ok((lams, h))
}

fn rollout(
    model: &NjodeModel,
    state: &LatentState,
    steps: usize,
    weff: Option<&Tensor>,
    mut sampler: Option<&mut rng::Rng>,
) -> Result<RolloutTrace> {
    let n = model.n_nodes();
    let weff = weff.cloned().unwrap_or_else(|| model.influence());
    if weff.dims2() != (n, n) {
        return Err(Error::contract("W_eff must be N x N"));
    }
    let mode = if sampler.is_some() { RolloutMode::Stochastic } else { RolloutMode::MeanField };
    let mut latents = vec![state.clone()];
    let mut intensities = Vec::with_capacity(steps);
    let mut counts = sampler.as_ref().map(|_| Vec::with_capacity(steps));
    let mut cur = state.clone();
    for _ in 0..steps {
        // A fresh graph per bin keeps memory flat over long rollouts.
        let mut g = Graph::new();
        let b = model.bind(&mut g);
        let h = g.constant(cur.h.clone());
        let w = g.constant(weff.clone());
        let hm = b.flow(&mut g, h, cur.tau, model.cfg.bin_width)?;
        let lam = b.intensity(&mut g, hm);
        let lam_v = g.value(lam).data().to_vec();
        let x = match sampler.as_deref_mut() {
            Some(r) => {
                let xs: Vec<u64> = lam_v.iter().map(|&l| sample_poisson(l, r)).collect();
                let xv = g.constant(Tensor::column(xs.iter().map(|&c| c as f64).collect()));
                counts.as_mut().expect("stochastic").push(xs);
                xv
            }
            None => lam,
        };
        let hn = b.jump(&mut g, hm, x, w);
        cur = LatentState::new(g.value(hn).clone(), cur.tau + model.cfg.bin_width);
        if !cur.is_finite() {
            return Err(Error::NumericFault {
                node: hn.id(),
                what: "non-finite latent state in rollout".into(),
            });
        }
        intensities.push(lam_v);
        latents.push(cur.clone());
    }
    Ok(RolloutTrace { mode, latents, intensities, counts })
}

pub(crate) fn sample_poisson(lambda: f64, rng: &mut rng::Rng) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    match Poisson::new(lambda) {
        Ok(d) => d.sample(rng) as u64,
        Err(_) => 0,
    }
}

/// Stochastic rollout: `x ~ Poisson(lambda)` each bin, fed back into the jump.
pub fn sample_rollout(
    model: &NjodeModel,
    state: &LatentState,
    steps: usize,
    weff: Option<&Tensor>,
    seed: u64,
) -> Result<RolloutTrace> {
    let mut r = rng::seeded(seed);
    rollout(model, state, steps, weff, Some(&mut r))
}

/// Mean-field rollout: the intensity itself is fed back as the count.
pub fn mean_field_rollout(
    model: &NjodeModel,
    state: &LatentState,
    steps: usize,
    weff: Option<&Tensor>,
) -> Result<RolloutTrace> {
    rollout(model, state, steps, weff, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::njode::{JumpKind, NjodeConfig};

    fn model() -> NjodeModel {
        NjodeModel::init(NjodeConfig::new(3, 2), None, 4).unwrap()
    }

    #[test]
    fn zero_drift_flow_is_identity() {
        let m = model();
        let s = m.initial_state();
        let f = flow(&m, &s, 2.5).unwrap();
        assert_eq!(f.h, s.h);
        assert_eq!(f.tau, 2.5);
    }

    #[test]
    fn zero_influence_jump_is_zero() {
        let m = model();
        let s = jump_update(&m, &m.initial_state(), &[1.0, 0.0, 2.0], &Tensor::zeros(3, 3)).unwrap();
        assert_eq!(s.h.max_abs(), 0.0);
    }

    #[test]
    fn pass_through_identity_jump() {
        let mut m = model();
        m.jump = JumpKind::PassThrough;
        let s0 = m.initial_state();
        let s = jump_update(&m, &s0, &[3.0, 1.0, 0.0], &Tensor::identity(3)).unwrap();
        assert_eq!(s.h, s0.h);
    }

    #[test]
    fn baseline_sets_intensity() {
        let mut m = model();
        let n = m.n_nodes();
        *m.param_mut("intensity.w2").unwrap() = Tensor::zeros(m.cfg.intensity_hidden, 1);
        assert!(intensity(&m, &m.initial_state()).iter().all(|&l| l == 1.0));
        *m.param_mut("intensity.base").unwrap() = Tensor::filled(n, 1, 2f64.ln());
        assert!(intensity(&m, &m.initial_state()).iter().all(|&l| (l - 2.0).abs() < 1e-15));
    }

    #[test]
    fn zero_steps_trace() {
        let m = model();
        let t = mean_field_rollout(&m, &m.initial_state(), 0, None).unwrap();
        assert_eq!((t.latents.len(), t.steps()), (1, 0));
        assert!(t.counts.is_none());
    }

    #[test]
    fn stochastic_is_seeded() {
        let m = model();
        let a = sample_rollout(&m, &m.initial_state(), 5, None, 3).unwrap();
        let b = sample_rollout(&m, &m.initial_state(), 5, None, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.counts.as_ref().unwrap().len(), 5);
    }
}
