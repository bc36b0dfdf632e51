use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

fn glorot(rows: usize, cols: usize, r: &mut rng::Rng) -> Tensor {
    let sd = (2.0 / (rows + cols) as f64).sqrt();
    let d = Normal::new(0.0, sd).expect("positive sd");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| d.sample(r)).collect())
}

fn check_h(h: &Tensor, d: usize) -> Result<()> {
    if h.cols() != d || !h.is_finite() {
        return Err(Error::contract(format!("latent must be finite with {d} columns")));
    }
    Ok(())
}

/// Edge-logit policy `pi(h) = E B Eᵀ + c` with `E = tanh(h W1 + b1) W2`.
///
/// Every node goes through the same encoder and there is no node-indexed
/// parameter, so `pi(P h) = P pi(h) Pᵀ` holds by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub latent_dim: usize,
    pub hidden: usize,
    pub embed: usize,
    /// `[W1, b1, W2, B, c]`.
    pub params: Vec<Tensor>,
}

impl PolicyNet {
    pub fn init(latent_dim: usize, hidden: usize, embed: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let params = vec![
            glorot(latent_dim, hidden, &mut r),
            Tensor::zeros(1, hidden),
            glorot(hidden, embed, &mut r),
            glorot(embed, embed, &mut r),
            Tensor::zeros(1, 1),
        ];
        PolicyNet {
            latent_dim,
            hidden,
            embed,
            params,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone())).collect()
    }

    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], h: Var) -> Var {
        let a = g.matmul(h, vars[0]);
        let a = g.add(a, vars[1]);
        let z = g.tanh(a);
        let e = g.matmul(z, vars[2]);
        let eb = g.matmul(e, vars[3]);
        let et = g.transpose(e);
        let s = g.matmul(eb, et);
        g.add(s, vars[4])
    }

    /// Edge logits, `N x N` in the edge convention.
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        check_h(h, self.latent_dim)?;
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let hv = g.constant(h.clone());
        let out = self.forward_graph(&mut g, &vars, hv);
        Ok(g.value(out).clone())
    }
}

/// Rows scaled to unit length; zero rows stay zero.
pub fn row_directions(h: &Tensor) -> Tensor {
    let c = h.cols();
    let mut out = h.clone();
    for row in out.data_mut().chunks_mut(c) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row {
                *v /= norm;
            }
        }
    }
    out
}

/// Two-headed latent projection.
///
/// The positional head sees only row directions, so positive per-node
/// rescaling leaves it unchanged; the magnitude head pools over nodes with
/// `[mean, max]`, so node relabeling leaves it unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprNet {
    pub latent_dim: usize,
    pub hidden: usize,
    pub p_dim: usize,
    pub m_dim: usize,
    /// `[A1, a1, A2, M1, m1, M2, m2]`.
    pub params: Vec<Tensor>,
}

/// Embeddings of one latent state.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    /// `N x p_dim`.
    pub p: Tensor,
    /// `1 x m_dim`.
    pub m: Tensor,
}

impl ReprNet {
    pub fn init(latent_dim: usize, hidden: usize, p_dim: usize, m_dim: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let params = vec![
            glorot(latent_dim, hidden, &mut r),
            Tensor::zeros(1, hidden),
            glorot(hidden, p_dim, &mut r),
            glorot(latent_dim, hidden, &mut r),
            Tensor::zeros(1, hidden),
            glorot(2 * hidden, m_dim, &mut r),
            Tensor::zeros(1, m_dim),
        ];
        ReprNet {
            latent_dim,
            hidden,
            p_dim,
            m_dim,
            params,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone())).collect()
    }

    /// `(p, m)` nodes for the constant latent `h`.
    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], h: &Tensor) -> (Var, Var) {
        let u = g.constant(row_directions(h));
        let a = g.matmul(u, vars[0]);
        let a = g.add(a, vars[1]);
        let z = g.tanh(a);
        let p = g.matmul(z, vars[2]);

        let hv = g.constant(h.clone());
        let b = g.matmul(hv, vars[3]);
        let b = g.add(b, vars[4]);
        let f = g.softplus(b);
        let n = h.rows();
        let sum = g.sum_rows(f);
        let mean = g.scale(sum, 1.0 / n as f64);
        // Elementwise max is exact and commutative, so the fold order does
        // not matter.
        let mut mx = g.gather_rows(f, &[0]);
        for i in 1..n {
            let r = g.gather_rows(f, &[i]);
            mx = g.max(mx, r);
        }
        let pooled = g.concat_cols(&[mean, mx]);
        let m = g.matmul(pooled, vars[5]);
        let m = g.add(m, vars[6]);
        (p, m)
    }

    pub fn forward(&self, h: &Tensor) -> Result<Embedding> {
        check_h(h, self.latent_dim)?;
        if h.rows() == 0 {
            return Err(Error::contract("latent has no nodes"));
        }
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let (p, m) = self.forward_graph(&mut g, &vars, h);
        Ok(Embedding {
            p: g.value(p).clone(),
            m: g.value(m).clone(),
        })
    }
}
