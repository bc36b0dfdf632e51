use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::njode::{mean_field_rollout, LatentState, NjodeModel};
use crate::planner::{admissible, intervene, relax_values, ConstraintSpec, Relaxation};

use super::nets::PolicyNet;
use super::perm::{identity_perm, permute_constraints, unpermute_matrix};

/// Discounted policy distance, truncated after `horizon` terms. The base
/// distance is the Frobenius norm between edge-probability matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PemConfig {
    pub gamma: f64,
    pub horizon: usize,
}

impl Default for PemConfig {
    fn default() -> Self {
        PemConfig { gamma: 0.9, horizon: 5 }
    }
}

impl PemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) || self.horizon == 0 {
            return Err(Error::contract("PEM needs gamma in [0, 1) and horizon >= 1"));
        }
        Ok(())
    }

    /// Bound on the discarded tail when every base distance is at most `d_max`.
    pub fn truncation_bound(&self, d_max: f64) -> f64 {
        self.gamma.powi(self.horizon as i32) * d_max / (1.0 - self.gamma)
    }
}

/// A policy acting on one task: the model that moves the state and the
/// constraints that shape its probabilities.
#[derive(Clone, Copy, Debug)]
pub struct PolicyEnv<'a> {
    pub policy: &'a PolicyNet,
    pub model: &'a NjodeModel,
    pub cs: &'a ConstraintSpec,
    pub relaxation: Relaxation,
}

impl PolicyEnv<'_> {
    pub fn admissible(&self) -> Vec<Vec<bool>> {
        admissible(&self.model.adjacency, self.cs, None)
    }

    /// Relaxed edge probabilities at `h`.
    pub fn probs(&self, h: &Tensor) -> Result<Tensor> {
        let logits = self.policy.forward(h)?;
        Ok(relax_values(&logits, &self.admissible(), self.cs.k, self.relaxation))
    }

    /// One deterministic mean-field bin with the policy's relaxed cut in force.
    pub fn transition(&self, s: &LatentState) -> Result<(LatentState, Tensor)> {
        let p = self.probs(&s.h)?;
        let weff = intervene(&self.model.influence(), &p);
        let tr = mean_field_rollout(self.model, s, 1, Some(&weff))?;
        Ok((tr.latents[1].clone(), p))
    }
}

/// Per-step base distances `d(pi(x_t), Pᵀ pi(y_t) P)`, `t < horizon`.
///
/// `y` is read as a relabeled counterpart of `x`: it evolves under the model
/// and constraints permuted by `perm`.
pub fn pem_terms(x: &LatentState, y: &LatentState, perm: &[usize], env: &PolicyEnv<'_>, cfg: &PemConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = env.model.n_nodes();
    if perm.len() != n || x.h.rows() != n || y.h.rows() != n {
        return Err(Error::contract("states and permutation must cover every node"));
    }
    let (model_y, cs_y);
    let env_y = if perm == identity_perm(n).as_slice() {
        *env
    } else {
        model_y = env.model.permute_nodes(perm)?;
        cs_y = permute_constraints(env.cs, perm);
        PolicyEnv {
            model: &model_y,
            cs: &cs_y,
            ..*env
        }
    };
    let (mut sx, mut sy) = (x.clone(), y.clone());
    let mut terms = Vec::with_capacity(cfg.horizon);
    for t in 0..cfg.horizon {
        let last = t + 1 == cfg.horizon;
        let (px, py) = if last {
            (env.probs(&sx.h)?, env_y.probs(&sy.h)?)
        } else {
            let (nx, px) = env.transition(&sx)?;
            let (ny, py) = env_y.transition(&sy)?;
            sx = nx;
            sy = ny;
            (px, py)
        };
        let aligned = unpermute_matrix(&py, perm);
        terms.push(px.zip_map(&aligned, |a, b| (a - b) * (a - b)).sum().sqrt());
    }
    Ok(terms)
}

/// `d_pi(x, y) = d(pi(x), Pᵀ pi(y) P) + gamma d_pi(x', y')`, truncated.
pub fn pem_distance(x: &LatentState, y: &LatentState, perm: &[usize], env: &PolicyEnv<'_>, cfg: &PemConfig) -> Result<f64> {
    let terms = pem_terms(x, y, perm, env, cfg)?;
    // Horner from the tail mirrors the recursion.
    Ok(terms.iter().rev().fold(0.0, |acc, &d| d + cfg.gamma * acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amortize::perm::{augment_magnitude, permute_rows, random_perm};
    use crate::njode::{flow, intensity, jump_update, NjodeConfig};
    use crate::rng;

    fn setup() -> (NjodeModel, PolicyNet, ConstraintSpec) {
        let n = 5;
        let adj: Vec<Vec<bool>> = (0..n).map(|m| (0..n).map(|k| (m + k) % 2 == 1 || k == (m + 2) % n).collect()).collect();
        let mut m = NjodeModel::init(NjodeConfig::new(n, 3), Some(adj), 3).unwrap();
        let w = m.param_mut("influence").unwrap();
        *w = w.map(|v| v + 0.3);
        (m, PolicyNet::init(3, 6, 4, 7), ConstraintSpec::top_k(n, 2))
    }

    #[test]
    fn zero_for_permuted_counterpart() {
        let (m, pol, cs) = setup();
        let env = PolicyEnv { policy: &pol, model: &m, cs: &cs, relaxation: Relaxation::TopK };
        let x = m.initial_state();
        let mut r = rng::seeded(1);
        for _ in 0..5 {
            let perm = random_perm(5, &mut r).unwrap();
            let y = LatentState::new(permute_rows(&x.h, &perm), x.tau);
            let d = pem_distance(&x, &y, &perm, &env, &PemConfig::default()).unwrap();
            assert!(d.abs() <= 1e-6, "{d}");
        }
    }

    #[test]
    fn gamma_zero_is_base_distance() {
        let (m, pol, cs) = setup();
        let env = PolicyEnv { policy: &pol, model: &m, cs: &cs, relaxation: Relaxation::Independent };
        let x = m.initial_state();
        let (hy, _) = augment_magnitude(&x.h, 2);
        let y = LatentState::new(hy, 0.0);
        let cfg = PemConfig { gamma: 0.0, horizon: 4 };
        let d = pem_distance(&x, &y, &identity_perm(5), &env, &cfg).unwrap();
        let base = env.probs(&x.h).unwrap().zip_map(&env.probs(&y.h).unwrap(), |a, b| (a - b).powi(2)).sum().sqrt();
        assert_eq!(d, base);
        assert!(d > 0.0);
    }

    #[test]
    fn matches_hand_unrolled_sum() {
        let (m, pol, cs) = setup();
        let env = PolicyEnv { policy: &pol, model: &m, cs: &cs, relaxation: Relaxation::TopK };
        let perm = vec![3, 0, 4, 1, 2];
        let mp = m.permute_nodes(&perm).unwrap();
        let x = m.initial_state();
        let (hy, _) = augment_magnitude(&permute_rows(&x.h, &perm), 5);
        let y = LatentState::new(hy, 0.0);
        let cfg = PemConfig { gamma: 0.7, horizon: 5 };

        let adm_x = admissible(&m.adjacency, &cs, None);
        let adm_y = admissible(&mp.adjacency, &cs, None);
        let probs = |h: &Tensor, adm: &[Vec<bool>]| relax_values(&pol.forward(h).unwrap(), adm, 2, Relaxation::TopK);
        let step = |model: &NjodeModel, s: &LatentState, p: &Tensor| {
            let pre = flow(model, s, s.tau + model.bin_width()).unwrap();
            let lam = intensity(model, &pre);
            jump_update(model, &pre, &lam, &intervene(&model.influence(), p)).unwrap()
        };
        let (mut sx, mut sy) = (x.clone(), y.clone());
        let mut want = 0.0;
        let mut w = 1.0;
        for _ in 0..5 {
            let px = probs(&sx.h, &adm_x);
            let py = probs(&sy.h, &adm_y);
            let mut d2 = 0.0;
            for i in 0..5 {
                for j in 0..5 {
                    // (Pᵀ B P)[i][j] = B[inv[i]][inv[j]]
                    let inv = |a: usize| perm.iter().position(|&q| q == a).unwrap();
                    d2 += (px.get(i, j) - py.get(inv(i), inv(j))).powi(2);
                }
            }
            want += w * d2.sqrt();
            w *= 0.7;
            sx = step(&m, &sx, &px);
            sy = step(&mp, &sy, &py);
        }
        let got = pem_distance(&x, &y, &perm, &env, &cfg).unwrap();
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
        assert!(got > 0.0);
    }

    #[test]
    fn truncation_bound_covers_longer_horizon() {
        let (m, pol, cs) = setup();
        let env = PolicyEnv { policy: &pol, model: &m, cs: &cs, relaxation: Relaxation::TopK };
        let x = m.initial_state();
        let y = LatentState::new(augment_magnitude(&x.h, 9).0, 0.0);
        let short = PemConfig { gamma: 0.6, horizon: 3 };
        let long = PemConfig { gamma: 0.6, horizon: 12 };
        let terms = pem_terms(&x, &y, &identity_perm(5), &env, &long).unwrap();
        let d_max = terms.iter().cloned().fold(0.0, f64::max);
        let gap = pem_distance(&x, &y, &identity_perm(5), &env, &long).unwrap()
            - pem_distance(&x, &y, &identity_perm(5), &env, &short).unwrap();
        assert!(gap >= 0.0 && gap <= short.truncation_bound(d_max) + 1e-15);
    }
}
