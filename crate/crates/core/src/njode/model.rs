use std::sync::atomic::{AtomicU64, Ordering};

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffcore::{integrate_ode_graph, Graph, OdeSolverConfig, Tensor, Var};
use crate::error::{Error, Result};
use crate::pointproc::spectral_radius;
use crate::rng;

/// Bound on the intensity exponent; `exp(30)` is about `1e13`.
pub const EXPONENT_CLAMP: f64 = 30.0;

static CLAMP_HITS: AtomicU64 = AtomicU64::new(0);

/// Number of intensity evaluations (process-wide) that hit the upper clamp.
pub fn clamp_hits() -> u64 {
    CLAMP_HITS.load(Ordering::Relaxed)
}

/// Post-jump latent state at time `tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    /// `N x D`, one row per node.
    pub h: Tensor,
    pub tau: f64,
}

impl LatentState {
    pub fn new(h: Tensor, tau: f64) -> Self {
        LatentState { h, tau }
    }

    pub fn is_finite(&self) -> bool {
        self.h.is_finite() && self.tau.is_finite()
    }
}

/// Drift network. `Affine` is a test hook: `dh/dt = A h + b`.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum DriftKind {
    #[default]
    Mlp,
    Affine { a: Tensor, b: Tensor },
}

/// Jump kernel. `PassThrough` and `Linear` (`c h + d x`) are test hooks.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum JumpKind {
    #[default]
    Gru,
    PassThrough,
    Linear { c: f64, d: f64 },
}

/// Intensity head. `Softplus` (`min(softplus(h w + c0), cap)`) is the linear
/// emission used by the mean-field test systems.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum IntensityKind {
    #[default]
    ExpMlp,
    Softplus { w: Tensor, c0: f64, cap: Option<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NjodeConfig {
    pub n_nodes: usize,
    pub latent_dim: usize,
    pub drift_hidden: usize,
    pub intensity_hidden: usize,
    pub bin_width: f64,
    pub solver: OdeSolverConfig,
}

impl NjodeConfig {
    pub fn new(n_nodes: usize, latent_dim: usize) -> Self {
        NjodeConfig {
            n_nodes,
            latent_dim,
            drift_hidden: 16,
            intensity_hidden: 8,
            bin_width: 1.0,
            solver: OdeSolverConfig::training(),
        }
    }
}

/// Names of the parameter tensors, in the order used by
/// [`NjodeModel::params`] and the checkpoint format.
pub const PARAM_NAMES: [&str; 19] = [
    "h0",
    "drift.w1",
    "drift.b1",
    "drift.node_bias",
    "drift.w2",
    "drift.b2",
    "jump.wz",
    "jump.uz",
    "jump.bz",
    "jump.wr",
    "jump.ur",
    "jump.br",
    "jump.wc",
    "jump.uc",
    "jump.bc",
    "influence",
    "intensity.base",
    "intensity.w1",
    "intensity.w2",
];

pub(crate) const P_H0: usize = 0;
const P_W1: usize = 1;
const P_B1: usize = 2;
const P_NODE_BIAS: usize = 3;
const P_W2: usize = 4;
const P_B2: usize = 5;
const P_GRU: usize = 6;
pub(crate) const P_INFLUENCE: usize = 15;
pub(crate) const P_BASE: usize = 16;
const P_G_W1: usize = 17;
const P_G_W2: usize = 18;

/// Networked jump-ODE model.
///
/// Per node `n` with state `h_n` (a row of `H`):
///
/// * drift `f(phase, h_n) = softplus([h_n, phase] W1 + b1 + beta_n) W2 + b2`,
///   with `phase = (tau - tau_i) / bin_width` the position inside the bin;
/// * jump `H+ = W_eff^T Phi(H-, x)` where `Phi` is a GRU cell applied per
///   node with hidden state `h_m` and scalar input `x_m`;
/// * intensity `lambda_n = exp(clamp(b_n + g(h_n), -30, 30))`.
///
/// `W[m][n]` is the influence of `m` on `n`; it is masked by `adjacency`,
/// which always contains the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct NjodeModel {
    pub cfg: NjodeConfig,
    pub adjacency: Vec<Vec<bool>>,
    pub params: Vec<Tensor>,
    pub drift: DriftKind,
    pub jump: JumpKind,
    pub intensity: IntensityKind,
}

fn uniform(rng: &mut rng::Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let d = Uniform::new_inclusive(-scale, scale).expect("valid range");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| d.sample(rng)).collect())
}

pub(crate) fn mask_tensor(adjacency: &[Vec<bool>]) -> Tensor {
    let n = adjacency.len();
    let mut m = Tensor::zeros(n, n);
    for (i, row) in adjacency.iter().enumerate() {
        for (j, &a) in row.iter().enumerate() {
            if a {
                m.set(i, j, 1.0);
            }
        }
    }
    m
}

impl NjodeModel {
    /// Fresh model with zero drift output layer and influence initialised to
    /// the adjacency pattern scaled to spectral radius 0.5.
    ///
    /// `adjacency[m][n]` allows an edge `m -> n`; the diagonal is forced on.
    pub fn init(cfg: NjodeConfig, adjacency: Option<Vec<Vec<bool>>>, seed: u64) -> Result<Self> {
        let (n, d) = (cfg.n_nodes, cfg.latent_dim);
        if n == 0 || d == 0 {
            return Err(Error::contract("N and D must be at least 1"));
        }
        if !(cfg.bin_width > 0.0) {
            return Err(Error::contract("bin width must be positive"));
        }
        let mut adj = adjacency.unwrap_or_else(|| vec![vec![true; n]; n]);
        if adj.len() != n || adj.iter().any(|r| r.len() != n) {
            return Err(Error::contract("adjacency must be N x N"));
        }
        for (i, row) in adj.iter_mut().enumerate() {
            row[i] = true;
        }
        let mut rng = rng::seeded(seed);
        let (hf, hg) = (cfg.drift_hidden, cfg.intensity_hidden);
        let s_in = 1.0 / ((d + 1) as f64).sqrt();
        let s_d = 1.0 / (d as f64).sqrt();
        let s_g = 1.0 / (hg as f64).sqrt();
        let mask = mask_tensor(&adj);
        let rho = spectral_radius(&mask)?;
        let influence = mask.scale(0.5 / rho);
        let mut params = vec![
            uniform(&mut rng, n, d, 0.5),
            uniform(&mut rng, d + 1, hf, s_in),
            uniform(&mut rng, 1, hf, s_in),
            uniform(&mut rng, n, hf, 0.1),
            Tensor::zeros(hf, d),
            Tensor::zeros(1, d),
        ];
        for _ in 0..3 {
            params.push(uniform(&mut rng, d, d, s_d));
            params.push(uniform(&mut rng, 1, d, 0.5));
            params.push(uniform(&mut rng, 1, d, 0.1));
        }
        params.push(influence);
        params.push(Tensor::zeros(n, 1));
        // The hidden bias of g is folded into intensity.w1 via a constant
        // input column, so g has no free offset competing with b_n.
        params.push(uniform(&mut rng, d + 1, hg, s_d));
        params.push(uniform(&mut rng, hg, 1, s_g));
        Ok(NjodeModel {
            cfg,
            adjacency: adj,
            params,
            drift: DriftKind::Mlp,
            jump: JumpKind::Gru,
            intensity: IntensityKind::ExpMlp,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.cfg.n_nodes
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    pub fn bin_width(&self) -> f64 {
        self.cfg.bin_width
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        PARAM_NAMES.iter().position(|&n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        PARAM_NAMES.iter().position(|&n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn initial_state(&self) -> LatentState {
        LatentState::new(self.params[P_H0].clone(), 0.0)
    }

    pub fn mask(&self) -> Tensor {
        mask_tensor(&self.adjacency)
    }

    /// Masked influence matrix `W ⊙ adjacency`.
    pub fn influence(&self) -> Tensor {
        self.params[P_INFLUENCE].zip_map(&self.mask(), |w, m| w * m)
    }

    /// Check shapes against the config.
    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.cfg.n_nodes, self.cfg.latent_dim);
        let (hf, hg) = (self.cfg.drift_hidden, self.cfg.intensity_hidden);
        let expected = self.expected_shapes();
        if self.params.len() != expected.len() {
            return Err(Error::contract("wrong parameter count"));
        }
        for (i, (p, s)) in self.params.iter().zip(&expected).enumerate() {
            if p.dims2() != *s {
                return Err(Error::contract(format!(
                    "parameter {} has shape {:?}, expected {s:?}",
                    PARAM_NAMES[i],
                    p.dims2()
                )));
            }
            if !p.is_finite() {
                return Err(Error::contract(format!("parameter {} is not finite", PARAM_NAMES[i])));
            }
        }
        if self.adjacency.len() != n || self.adjacency.iter().any(|r| r.len() != n) {
            return Err(Error::contract("adjacency must be N x N"));
        }
        let _ = (d, hf, hg);
        Ok(())
    }

    pub(crate) fn expected_shapes(&self) -> Vec<(usize, usize)> {
        let (n, d) = (self.cfg.n_nodes, self.cfg.latent_dim);
        let (hf, hg) = (self.cfg.drift_hidden, self.cfg.intensity_hidden);
        let mut s = vec![(n, d), (d + 1, hf), (1, hf), (n, hf), (hf, d), (1, d)];
        for _ in 0..3 {
            s.extend([(d, d), (1, d), (1, d)]);
        }
        s.extend([(n, n), (n, 1), (d + 1, hg), (hg, 1)]);
        s
    }

    /// Relabel nodes: new node `i` is old node `perm[i]`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Result<NjodeModel> {
        let n = self.n_nodes();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::contract("perm is not a permutation of 0..N"));
        }
        let rows = |t: &Tensor| {
            let c = t.cols();
            let mut out = Vec::with_capacity(n * c);
            for &p in perm {
                out.extend_from_slice(t.row_slice(p));
            }
            Tensor::matrix(n, c, out)
        };
        let both = |t: &Tensor| {
            let mut out = Tensor::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    out.set(i, j, t.get(perm[i], perm[j]));
                }
            }
            out
        };
        let mut m = self.clone();
        m.params[P_H0] = rows(&self.params[P_H0]);
        m.params[P_NODE_BIAS] = rows(&self.params[P_NODE_BIAS]);
        m.params[P_BASE] = rows(&self.params[P_BASE]);
        m.params[P_INFLUENCE] = both(&self.params[P_INFLUENCE]);
        m.adjacency = (0..n).map(|i| (0..n).map(|j| self.adjacency[perm[i]][perm[j]]).collect()).collect();
        Ok(m)
    }

    /// Place every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound<'_> {
        let vars = self.params.iter().map(|p| g.leaf(p.clone())).collect();
        self.bind_vars(g, vars)
    }

    /// Use existing graph nodes as the parameters (e.g. to differentiate
    /// with respect to a subset, or to share them across models).
    pub fn bind_vars(&self, g: &mut Graph, vars: Vec<Var>) -> Bound<'_> {
        assert_eq!(vars.len(), self.params.len());
        let mask = g.constant(self.mask());
        Bound { model: self, vars, mask }
    }
}

/// A model whose parameters live on a [`Graph`].
pub struct Bound<'m> {
    pub model: &'m NjodeModel,
    pub vars: Vec<Var>,
    mask: Var,
}

impl Bound<'_> {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn h0(&self) -> Var {
        self.vars[P_H0]
    }

    /// `dh/dtau` for all nodes at once.
    pub fn drift(&self, g: &mut Graph, phase: f64, h: Var) -> Var {
        match &self.model.drift {
            DriftKind::Mlp => {
                let n = g.dims(h).0;
                let tcol = g.constant(Tensor::filled(n, 1, phase));
                let inp = g.concat_cols(&[h, tcol]);
                let z = g.matmul(inp, self.vars[P_W1]);
                let z = g.add(z, self.vars[P_B1]);
                let z = g.add(z, self.vars[P_NODE_BIAS]);
                let a = g.softplus(z);
                let o = g.matmul(a, self.vars[P_W2]);
                g.add(o, self.vars[P_B2])
            }
            DriftKind::Affine { a, b } => {
                let at = g.constant(a.transpose());
                let bb = g.constant(b.clone());
                let o = g.matmul(h, at);
                g.add(o, bb)
            }
        }
    }

    /// Integrate the drift from `tau0` to `tau0 + span` starting at `h`.
    pub fn flow(&self, g: &mut Graph, h: Var, tau0: f64, span: f64) -> Result<Var> {
        if span < 0.0 {
            return Err(Error::contract("flow target precedes current time"));
        }
        if span == 0.0 {
            return Ok(h);
        }
        let width = self.model.cfg.bin_width;
        let solver = self.model.cfg.solver.clone();
        integrate_ode_graph(
            g,
            |g, t, hh| self.drift(g, (t - tau0) / width, hh),
            h,
            tau0,
            tau0 + span,
            &solver,
        )
    }

    /// Per-node intensity, `N x 1`.
    pub fn intensity(&self, g: &mut Graph, h: Var) -> Var {
        match &self.model.intensity {
            IntensityKind::ExpMlp => {
                let n = g.dims(h).0;
                let one = g.constant(Tensor::filled(n, 1, 1.0));
                let inp = g.concat_cols(&[h, one]);
                let z = g.matmul(inp, self.vars[P_G_W1]);
                let a = g.tanh(z);
                let gh = g.matmul(a, self.vars[P_G_W2]);
                let e = g.add(gh, self.vars[P_BASE]);
                if g.value(e).data().iter().any(|&v| v > EXPONENT_CLAMP) {
                    CLAMP_HITS.fetch_add(1, Ordering::Relaxed);
                    log::warn!("intensity exponent clamped at {EXPONENT_CLAMP}");
                }
                let ec = g.clamp(e, -EXPONENT_CLAMP, EXPONENT_CLAMP);
                g.exp(ec)
            }
            IntensityKind::Softplus { w, c0, cap } => {
                let wv = g.constant(w.clone());
                let z = g.matmul(h, wv);
                let z = g.add_const(z, *c0);
                let lam = g.softplus(z);
                match cap {
                    Some(c) => {
                        let cv = g.scalar(*c);
                        g.min(lam, cv)
                    }
                    None => lam,
                }
            }
        }
    }

    /// Per-node jump kernel `Phi(H, x)`, `N x D`; `x` is `N x 1`.
    pub fn phi(&self, g: &mut Graph, h: Var, x: Var) -> Var {
        match &self.model.jump {
            JumpKind::Gru => {
                let p = |k: usize| self.vars[P_GRU + k];
                let gate = |g: &mut Graph, w: Var, u: Var, b: Var, inp: Var| {
                    let a = g.matmul(inp, w);
                    let c = g.matmul(x, u);
                    let s = g.add(a, c);
                    g.add(s, b)
                };
                let zp = gate(g, p(0), p(1), p(2), h);
                let z = g.sigmoid(zp);
                let rp = gate(g, p(3), p(4), p(5), h);
                let r = g.sigmoid(rp);
                let rh = g.mul(r, h);
                let cp = gate(g, p(6), p(7), p(8), rh);
                let c = g.tanh(cp);
                // (1 - z) h + z c = h + z (c - h)
                let diff = g.sub(c, h);
                let zd = g.mul(z, diff);
                g.add(h, zd)
            }
            JumpKind::PassThrough => h,
            JumpKind::Linear { c, d } => {
                let ch = g.scale(h, *c);
                let dx = g.scale(x, *d);
                g.add(ch, dx)
            }
        }
    }

    /// `W ⊙ adjacency ⊙ (1 - cut)`; `cut` uses the `m -> n` convention.
    pub fn weff(&self, g: &mut Graph, cut: Option<Var>) -> Var {
        let w = g.mul(self.vars[P_INFLUENCE], self.mask);
        match cut {
            Some(c) => {
                let keep = g.one_minus(c);
                g.mul(w, keep)
            }
            None => w,
        }
    }

    /// `H+ = W_eff^T Phi(H-, x)`.
    pub fn jump(&self, g: &mut Graph, h: Var, x: Var, weff: Var) -> Var {
        let phi = self.phi(g, h, x);
        let wt = g.transpose(weff);
        g.matmul(wt, phi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_valid() {
        let a = NjodeModel::init(NjodeConfig::new(4, 3), None, 9).unwrap();
        let b = NjodeModel::init(NjodeConfig::new(4, 3), None, 9).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert!((spectral_radius(&a.influence()).unwrap() - 0.5).abs() < 1e-9);
        assert_eq!(a.param("drift.w2").unwrap().max_abs(), 0.0);
    }

    #[test]
    fn permutation_round_trip() {
        let m = NjodeModel::init(NjodeConfig::new(4, 2), None, 1).unwrap();
        let perm = [2, 0, 3, 1];
        let mut inv = [0; 4];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let back = m.permute_nodes(&perm).unwrap().permute_nodes(&inv).unwrap();
        assert_eq!(back, m);
        assert!(m.permute_nodes(&[0, 0, 1, 2]).is_err());
    }

    #[test]
    fn diagonal_forced_into_adjacency() {
        let adj = vec![vec![false; 3]; 3];
        let m = NjodeModel::init(NjodeConfig::new(3, 2), Some(adj), 0).unwrap();
        assert!((0..3).all(|i| m.adjacency[i][i]));
    }
}
