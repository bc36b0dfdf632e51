use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diffcore::{softplus, OdeSolverConfig, Tensor};
use crate::error::{Error, Result};
use crate::njode::{DriftKind, IntensityKind, JumpKind, NjodeConfig, NjodeModel, P_H0, P_INFLUENCE};
use crate::par::ExecMode;

use super::bound::{error_bound, LipschitzProfile};
use super::cost::{mean_field_curve, monte_carlo_curve, JumpProcess};

/// Linear-jump test system.
///
/// Per node: `dh/dt = A h + b`, jump `H+ = W^T (C H + D x 1^T)`, intensity
/// `min(softplus(h . w + c0), cap)`. The flow over one bin is applied in
/// closed form, so estimator differences are purely stochastic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearJumpSystem {
    /// `d x d`.
    pub a: Tensor,
    /// Length `d`.
    pub b: Vec<f64>,
    pub c: f64,
    pub d_scale: f64,
    /// `N x N`, `w[m][n]` is the edge `m -> n`.
    pub w: Tensor,
    /// Length `d`.
    pub emission: Vec<f64>,
    pub c0: f64,
    pub cap: Option<f64>,
    pub bin_width: f64,
    /// `N x d` starting latent.
    pub h0: Tensor,
    #[serde(skip)]
    flow_cache: Option<(Vec<f64>, Vec<f64>)>,
}

impl LinearJumpSystem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: Tensor,
        b: Vec<f64>,
        c: f64,
        d_scale: f64,
        w: Tensor,
        emission: Vec<f64>,
        c0: f64,
        cap: Option<f64>,
        bin_width: f64,
        h0: Tensor,
    ) -> Result<Self> {
        let (d, d2) = a.dims2();
        let (n, n2) = w.dims2();
        if d != d2 || n != n2 || b.len() != d || emission.len() != d || h0.dims2() != (n, d) {
            return Err(Error::contract("linear system shape mismatch"));
        }
        if !(bin_width > 0.0) || cap.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::contract("bin width and cap must be positive"));
        }
        let mut s = LinearJumpSystem {
            a,
            b,
            c,
            d_scale,
            w,
            emission,
            c0,
            cap,
            bin_width,
            h0,
            flow_cache: None,
        };
        s.flow_cache = Some(s.exact_flow());
        Ok(s)
    }

    pub fn n_nodes(&self) -> usize {
        self.w.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.a.rows()
    }

    /// `(e^{A width}, int_0^width e^{A s} b ds)` via the exponential of the
    /// augmented matrix `[[A, b], [0, 0]]`; row-major.
    fn exact_flow(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.latent_dim();
        let mut m = DMatrix::<f64>::zeros(d + 1, d + 1);
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] = self.a.get(i, j) * self.bin_width;
            }
            m[(i, d)] = self.b[i] * self.bin_width;
        }
        let e = m.exp();
        let phi = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| e[(i, j)]).collect();
        let psi = (0..d).map(|i| e[(i, d)]).collect();
        (phi, psi)
    }

    fn flow_parts(&self) -> (Vec<f64>, Vec<f64>) {
        self.flow_cache.clone().unwrap_or_else(|| self.exact_flow())
    }

    fn lambda(&self, h: &[f64]) -> f64 {
        let z: f64 = h.iter().zip(&self.emission).map(|(a, b)| a * b).sum::<f64>() + self.c0;
        let l = softplus(z);
        self.cap.map_or(l, |c| l.min(c))
    }

    /// Analytic Lipschitz profile under the Frobenius norm on the latent and
    /// `||x|| / sqrt(N)` on counts; see [`LipschitzProfile`].
    ///
    /// Fails when no intensity cap is set, since `L_0` is then unbounded.
    pub fn lipschitz_profile(&self) -> Result<LipschitzProfile> {
        let l0 = self
            .cap
            .ok_or_else(|| Error::contract("analytic Lipschitz profile needs an intensity cap"))?;
        let (n, d) = (self.n_nodes(), self.latent_dim());
        let (phi, _) = self.flow_parts();
        let phi_norm = spectral_norm(&DMatrix::from_row_slice(d, d, &phi));
        let w_norm = spectral_norm(&DMatrix::from_row_slice(n, n, self.w.data()));
        let l_phi = self.c.abs().max(self.d_scale.abs() * ((d * n) as f64).sqrt());
        let l_t = phi_norm * w_norm * l_phi;
        let l_g = self.emission.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rho = crate::pointproc::spectral_radius(&self.w).unwrap_or(f64::NAN);
        Ok(LipschitzProfile::new(phi_norm, l_phi, vec![l_t; n], l0, l_g, rho))
    }

    /// Equivalent NJODE model using the affine, linear-jump and softplus hooks.
    pub fn to_njode(&self) -> Result<NjodeModel> {
        let (n, d) = (self.n_nodes(), self.latent_dim());
        let mut cfg = NjodeConfig::new(n, d);
        cfg.bin_width = self.bin_width;
        cfg.solver = OdeSolverConfig {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            ..OdeSolverConfig::evaluation()
        };
        let mut m = NjodeModel::init(cfg, Some(vec![vec![true; n]; n]), 0)?;
        m.drift = DriftKind::Affine {
            a: self.a.clone(),
            b: Tensor::row(self.b.clone()),
        };
        m.jump = JumpKind::Linear {
            c: self.c,
            d: self.d_scale,
        };
        m.intensity = IntensityKind::Softplus {
            w: Tensor::column(self.emission.clone()),
            c0: self.c0,
            cap: self.cap,
        };
        m.params[P_INFLUENCE] = self.w.clone();
        m.params[P_H0] = self.h0.clone();
        Ok(m)
    }
}

pub(crate) fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

impl JumpProcess for LinearJumpSystem {
    type State = Vec<f64>;

    fn advance(&self, s: &Vec<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, d) = (self.n_nodes(), self.latent_dim());
        let (phi, psi) = self.flow_parts();
        let mut out = vec![0.0; n * d];
        for k in 0..n {
            let h = &s[k * d..(k + 1) * d];
            for i in 0..d {
                out[k * d + i] = psi[i] + (0..d).map(|j| phi[i * d + j] * h[j]).sum::<f64>();
            }
        }
        let lam = (0..n).map(|k| self.lambda(&out[k * d..(k + 1) * d])).collect();
        Ok((out, lam))
    }

    fn jump(&self, pre: &Vec<f64>, x: &[f64]) -> Result<Vec<f64>> {
        let (n, d) = (self.n_nodes(), self.latent_dim());
        let mut out = vec![0.0; n * d];
        for m in 0..n {
            for k in 0..n {
                let wmk = self.w.get(m, k);
                if wmk == 0.0 {
                    continue;
                }
                for i in 0..d {
                    out[k * d + i] += wmk * (self.c * pre[m * d + i] + self.d_scale * x[m]);
                }
            }
        }
        Ok(out)
    }
}

/// One row of the linear mean-field experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfaRow {
    pub step: usize,
    pub j: f64,
    pub j_stderr: f64,
    pub jhat: f64,
    /// `None` when the bound does not apply (`L_T >= 1` or no cap).
    pub bound: Option<f64>,
}

/// Monte-Carlo and mean-field costs for every `t < steps`, with the error bound.
pub fn linear_mfa_experiment(
    sys: &LinearJumpSystem,
    steps: usize,
    gamma: f64,
    rollouts: usize,
    seed: u64,
    exec: ExecMode,
) -> Result<Vec<MfaRow>> {
    let s0 = sys.h0.data().to_vec();
    let mc = monte_carlo_curve(sys, &s0, steps, gamma, rollouts, seed, exec)?;
    let mf = mean_field_curve(sys, &s0, steps, gamma)?;
    let profile = sys.lipschitz_profile().ok();
    Ok((0..steps)
        .map(|t| MfaRow {
            step: t,
            j: mc[t].value,
            j_stderr: mc[t].stderr,
            jhat: mf[t],
            bound: profile.as_ref().and_then(|p| error_bound(p, sys.n_nodes(), t).ok()),
        })
        .collect())
}

/// `step,J,J_stderr,Jhat,bound`; an inapplicable bound is written as `inf`.
pub fn mfa_csv(rows: &[MfaRow]) -> String {
    let mut s = String::from("step,J,J_stderr,Jhat,bound\n");
    for r in rows {
        let b = r.bound.map_or("inf".to_string(), |b| format!("{b}"));
        let _ = writeln!(s, "{},{},{},{},{}", r.step, r.j, r.j_stderr, r.jhat, b);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meanfield::mean_field_cost;

    fn system(d_scale: f64) -> LinearJumpSystem {
        LinearJumpSystem::new(
            Tensor::from_rows(&[vec![-1.0, 0.3], vec![-0.3, -1.0]]),
            vec![0.1, -0.2],
            0.5,
            d_scale,
            Tensor::from_rows(&[vec![0.2, 0.1], vec![0.0, 0.3]]),
            vec![0.4, -0.3],
            0.2,
            Some(5.0),
            1.0,
            Tensor::from_rows(&[vec![0.5, -0.5], vec![0.2, 0.1]]),
        )
        .unwrap()
    }

    #[test]
    fn exact_flow_matches_scalar_solution() {
        let s = LinearJumpSystem::new(
            Tensor::from_rows(&[vec![-2.0]]),
            vec![1.0],
            1.0,
            0.0,
            Tensor::from_rows(&[vec![1.0]]),
            vec![1.0],
            0.0,
            None,
            0.5,
            Tensor::from_rows(&[vec![3.0]]),
        )
        .unwrap();
        let (h, _) = s.advance(&vec![3.0]).unwrap();
        // h(t) = 1/2 + (h0 - 1/2) e^{-2t}
        let want = 0.5 + 2.5 * (-1.0f64).exp();
        assert!((h[0] - want).abs() < 1e-13);
    }

    #[test]
    fn zero_count_coupling_makes_estimators_agree() {
        let s = system(0.0);
        let rows = linear_mfa_experiment(&s, 8, 1.0, 5, 2, ExecMode::Parallel).unwrap();
        for r in rows {
            assert!((r.j - r.jhat).abs() < 1e-12, "{r:?}");
            assert!(r.j_stderr < 1e-12);
        }
    }

    #[test]
    fn reset_jump_makes_estimators_agree() {
        let mut s = system(0.7);
        s.c = 0.0;
        s.w = Tensor::zeros(2, 2);
        let rows = linear_mfa_experiment(&s, 6, 1.0, 5, 4, ExecMode::Sequential).unwrap();
        assert!(rows.iter().all(|r| (r.j - r.jhat).abs() <= 1e-12 * r.jhat));
    }

    #[test]
    fn stderr_halves_with_four_times_rollouts() {
        let s = system(0.8);
        let h = s.h0.data().to_vec();
        let a = crate::meanfield::monte_carlo_cost(&s, &h, 10, 1.0, 2000, 1, ExecMode::Parallel).unwrap();
        let b = crate::meanfield::monte_carlo_cost(&s, &h, 10, 1.0, 8000, 2, ExecMode::Parallel).unwrap();
        let ratio = a.stderr / b.stderr;
        assert!((ratio / 2.0 - 1.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn njode_hooks_reproduce_fast_path() {
        let s = system(0.4);
        let m = s.to_njode().unwrap();
        let fast = mean_field_cost(&s, &s.h0.data().to_vec(), 6, 0.95).unwrap();
        let p = crate::meanfield::NjodeProcess::new(&m, None);
        let slow = mean_field_cost(&p, &m.initial_state(), 6, 0.95).unwrap();
        assert!((fast.value - slow.value).abs() < 1e-7, "{} vs {}", fast.value, slow.value);
    }

    #[test]
    fn profile_requires_cap() {
        let mut s = system(0.2);
        s.cap = None;
        assert!(s.lipschitz_profile().is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let s = system(0.1);
        let rows = linear_mfa_experiment(&s, 3, 1.0, 20, 1, ExecMode::Sequential).unwrap();
        let csv = mfa_csv(&rows);
        assert!(csv.starts_with("step,J,J_stderr,Jhat,bound\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
