use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

use super::spectral::{spectral_radius, to_dmatrix};

/// Multivariate Hawkes process with exponential kernel `w_ij * beta * e^{-beta t}`.
///
/// `w[i][j]` is the expected number of children at node `i` per event at
/// node `j`, so stability is exactly `rho(W) < 1`. `adjacency[i][j]` permits
/// a nonzero `w[i][j]`, i.e. an edge `j -> i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HawkesModel {
    pub mu: Vec<f64>,
    pub w: Tensor,
    pub beta: f64,
    pub adjacency: Vec<Vec<bool>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub node: usize,
}

/// Events sorted by time, all within `[0, horizon]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    pub n_nodes: usize,
    pub horizon: f64,
    pub events: Vec<Event>,
}

impl EventSequence {
    pub fn validate(&self) -> Result<()> {
        let mut prev = 0.0;
        for e in &self.events {
            if e.node >= self.n_nodes || !(e.t >= prev) || e.t > self.horizon {
                return Err(Error::contract(format!("invalid event {e:?} in sequence")));
            }
            prev = e.t;
        }
        Ok(())
    }

    pub fn counts_per_node(&self) -> Vec<u64> {
        let mut c = vec![0u64; self.n_nodes];
        for e in &self.events {
            c[e.node] += 1;
        }
        c
    }
}

impl HawkesModel {
    pub fn new(mu: Vec<f64>, w: Tensor, beta: f64, adjacency: Vec<Vec<bool>>) -> Result<Self> {
        let m = HawkesModel { mu, w, beta, adjacency };
        m.validate()?;
        Ok(m)
    }

    /// Adjacency is taken as the support of `w`.
    pub fn from_weights(mu: Vec<f64>, w: Tensor, beta: f64) -> Result<Self> {
        let n = w.rows();
        let adjacency = (0..n).map(|i| (0..w.cols()).map(|j| w.get(i, j) != 0.0).collect()).collect();
        Self::new(mu, w, beta, adjacency)
    }

    pub fn n_nodes(&self) -> usize {
        self.mu.len()
    }

    /// Checks every invariant, including `rho(W) < 1`.
    pub fn validate(&self) -> Result<()> {
        let n = self.mu.len();
        if self.w.dims2() != (n, n) || self.adjacency.len() != n || self.adjacency.iter().any(|r| r.len() != n) {
            return Err(Error::contract(format!("Hawkes model shapes disagree with N = {n}")));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::contract("beta must be positive"));
        }
        if self.mu.iter().any(|&m| !(m >= 0.0 && m.is_finite())) {
            return Err(Error::contract("baseline intensities must be finite and nonnegative"));
        }
        for i in 0..n {
            for j in 0..n {
                let v = self.w.get(i, j);
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::contract(format!("w[{i}][{j}] = {v} is not a finite nonnegative weight")));
                }
                if v != 0.0 && !self.adjacency[i][j] {
                    return Err(Error::contract(format!("w[{i}][{j}] nonzero outside adjacency")));
                }
            }
        }
        let rho = spectral_radius(&self.w)?;
        if rho >= 1.0 {
            return Err(Error::Unstable { rho });
        }
        Ok(())
    }

    /// Branching matrix with edges cut: `w_ij * (1 - cut[j][i])`.
    ///
    /// `cut` uses the edge convention shared with the planner (`cut[m][n]`
    /// addresses the edge `m -> n`).
    pub fn intervened(&self, cut: Option<&Tensor>) -> Tensor {
        match cut {
            None => self.w.clone(),
            Some(a) => {
                let n = self.n_nodes();
                let mut out = self.w.clone();
                for i in 0..n {
                    for j in 0..n {
                        out.set(i, j, self.w.get(i, j) * (1.0 - a.get(j, i)));
                    }
                }
                out
            }
        }
    }

    /// Edge-convention view of the branching matrix: `E[m][n] = w[n][m]`.
    pub fn edge_weights(&self) -> Tensor {
        self.w.transpose()
    }

    /// Stationary mean intensity `(I - W)^{-1} mu`.
    pub fn stationary_intensity(&self) -> Result<Vec<f64>> {
        let n = self.n_nodes();
        let rho = spectral_radius(&self.w)?;
        if rho >= 1.0 {
            return Err(Error::Unstable { rho });
        }
        let a = DMatrix::<f64>::identity(n, n) - to_dmatrix(&self.w);
        let b = DVector::from_column_slice(&self.mu);
        match a.lu().solve(&b) {
            Some(x) => Ok(x.iter().copied().collect()),
            None => Err(Error::Unstable { rho }),
        }
    }
}

/// Per-bin result of stepping a [`HawkesEnv`].
#[derive(Clone, Debug, PartialEq)]
pub struct BinOutcome {
    pub counts: Vec<u64>,
    /// Expected counts in the bin conditional on the state at its start.
    pub expected: Vec<f64>,
    pub events: Vec<Event>,
}

/// Stateful Hawkes simulator advanced one interval at a time.
///
/// Excitation is tracked per source, `s_j = sum beta e^{-beta (t - t_k)}`
/// over past events of node `j`, so the effective branching matrix may change
/// between intervals: cutting an edge also silences excitation from events
/// that happened before the cut.
#[derive(Clone, Debug)]
pub struct HawkesEnv {
    model: HawkesModel,
    t: f64,
    s: Vec<f64>,
    rng: Rng,
}

impl HawkesEnv {
    pub fn new(model: HawkesModel, seed: u64) -> Result<Self> {
        model.validate()?;
        let n = model.n_nodes();
        Ok(HawkesEnv {
            model,
            t: 0.0,
            s: vec![0.0; n],
            rng: rng::seeded(seed),
        })
    }

    pub fn model(&self) -> &HawkesModel {
        &self.model
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn excitation(&self) -> &[f64] {
        &self.s
    }

    fn excess(&self, weff: &Tensor) -> Vec<f64> {
        let n = self.model.n_nodes();
        (0..n)
            .map(|i| weff.row_slice(i).iter().zip(&self.s).map(|(w, s)| w * s).sum())
            .collect()
    }

    /// Ogata thinning on `[t, t_end)` under branching matrix `weff`.
    ///
    /// Between events every `s_j` decays by the same factor, so the total
    /// intensity is nonincreasing and its value right after the last accepted
    /// point is a valid upper bound.
    pub fn run_until(&mut self, t_end: f64, weff: &Tensor) -> Vec<Event> {
        let n = self.model.n_nodes();
        let beta = self.model.beta;
        let mu = &self.model.mu;
        let mut ex = self.excess(weff);
        let mut events = Vec::new();
        let mut lam = vec![0.0; n];
        loop {
            let bound: f64 = mu.iter().zip(&ex).map(|(m, e)| m + e).sum();
            if bound <= 0.0 {
                break;
            }
            let wait: f64 = self.rng.sample::<f64, _>(Exp1) / bound;
            if self.t + wait >= t_end {
                break;
            }
            self.t += wait;
            let decay = (-beta * wait).exp();
            for (s, e) in self.s.iter_mut().zip(ex.iter_mut()) {
                *s *= decay;
                *e *= decay;
            }
            let mut total = 0.0;
            for i in 0..n {
                lam[i] = mu[i] + ex[i];
                total += lam[i];
            }
            let u: f64 = self.rng.random::<f64>() * bound;
            if u >= total {
                continue;
            }
            // u is uniform on [0, total): it doubles as the categorical draw.
            let mut node = n - 1;
            let mut acc = 0.0;
            for (i, &l) in lam.iter().enumerate() {
                acc += l;
                if u < acc {
                    node = i;
                    break;
                }
            }
            self.s[node] += beta;
            for (i, e) in ex.iter_mut().enumerate() {
                *e += beta * weff.get(i, node);
            }
            events.push(Event { t: self.t, node });
        }
        let decay = (-beta * (t_end - self.t)).exp();
        for s in self.s.iter_mut() {
            *s *= decay;
        }
        self.t = t_end;
        events
    }

    /// Expected counts over the next `width` time units given the current
    /// excitation, from the mean dynamics `ds/dt = beta (W s - s + mu)`.
    pub fn expected_counts(&self, width: f64, weff: &Tensor) -> Vec<f64> {
        expected_counts_from(&self.model.mu, self.model.beta, weff, &self.s, width)
    }

    /// Advance by one interval of length `width` with edges `cut` removed.
    pub fn step(&mut self, width: f64, cut: Option<&Tensor>) -> BinOutcome {
        let weff = self.model.intervened(cut);
        let expected = self.expected_counts(width, &weff);
        let t_end = self.t + width;
        let events = self.run_until(t_end, &weff);
        let mut counts = vec![0u64; self.model.n_nodes()];
        for e in &events {
            counts[e.node] += 1;
        }
        BinOutcome { counts, expected, events }
    }
}

/// Integral over `[0, width]` of `mu + W m(t)` where `m' = beta((W - I) m + mu)`,
/// `m(0) = s0`, via the exponential of the augmented linear system.
pub fn expected_counts_from(mu: &[f64], beta: f64, weff: &Tensor, s0: &[f64], width: f64) -> Vec<f64> {
    let n = mu.len();
    let dim = 2 * n + 1;
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..n {
        for j in 0..n {
            let w = weff.get(i, j);
            a[(i, j)] = beta * w;
            a[(n + i, j)] = w;
        }
        a[(i, i)] -= beta;
        a[(i, 2 * n)] = beta * mu[i];
        a[(n + i, 2 * n)] = mu[i];
    }
    let e = (a * width).exp();
    let mut z0 = DVector::<f64>::zeros(dim);
    for i in 0..n {
        z0[i] = s0[i];
    }
    z0[2 * n] = 1.0;
    let z = e * z0;
    (0..n).map(|i| z[n + i]).collect()
}

/// Sample a Hawkes path on `[0, horizon]`.
pub fn simulate_thinning(model: &HawkesModel, horizon: f64, seed: u64) -> Result<EventSequence> {
    if !(horizon > 0.0) {
        return Err(Error::contract("horizon must be positive"));
    }
    let mut env = HawkesEnv::new(model.clone(), seed)?;
    let events = env.run_until(horizon, &model.w);
    Ok(EventSequence {
        n_nodes: model.n_nodes(),
        horizon,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unstable_model_rejected() {
        let w = Tensor::from_rows(&[vec![0.0, 1.2], vec![1.0, 0.0]]);
        let r = HawkesModel::from_weights(vec![1.0, 1.0], w, 4.0);
        assert!(matches!(r, Err(Error::Unstable { .. })));
    }

    #[test]
    fn weight_outside_adjacency_rejected() {
        let w = Tensor::from_rows(&[vec![0.0, 0.3], vec![0.0, 0.0]]);
        let adj = vec![vec![false; 2]; 2];
        assert!(HawkesModel::new(vec![1.0; 2], w, 4.0, adj).is_err());
    }

    #[test]
    fn stationary_two_node() {
        let w = Tensor::from_rows(&[vec![0.0, 0.5], vec![0.0, 0.0]]);
        let m = HawkesModel::from_weights(vec![1.0, 1.0], w, 4.0).unwrap();
        let s = m.stationary_intensity().unwrap();
        assert!((s[0] - 1.5).abs() < 1e-12 && (s[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn simulation_is_seeded_and_sorted() {
        let w = Tensor::from_rows(&[vec![0.2, 0.3], vec![0.1, 0.0]]);
        let m = HawkesModel::from_weights(vec![0.5, 0.8], w, 4.0).unwrap();
        let a = simulate_thinning(&m, 50.0, 11).unwrap();
        let b = simulate_thinning(&m, 50.0, 11).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert!(!a.events.is_empty());
    }

    #[test]
    fn expected_counts_at_rest_and_at_stationarity() {
        let w = Tensor::from_rows(&[vec![0.0, 0.5], vec![0.0, 0.0]]);
        let m = HawkesModel::from_weights(vec![1.0, 1.0], w.clone(), 4.0).unwrap();
        let zero = expected_counts_from(&m.mu, 4.0, &Tensor::zeros(2, 2), &[0.0, 0.0], 2.0);
        assert!((zero[0] - 2.0).abs() < 1e-12);
        // At the stationary excitation s* = lambda*, the expected count is lambda* * width.
        let lam = m.stationary_intensity().unwrap();
        let e = expected_counts_from(&m.mu, 4.0, &w, &lam, 3.0);
        assert!((e[0] - 4.5).abs() < 1e-9 && (e[1] - 3.0).abs() < 1e-9, "{e:?}");
    }

    #[test]
    fn cutting_edge_removes_excitation() {
        let w = Tensor::from_rows(&[vec![0.0, 0.5], vec![0.0, 0.0]]);
        let m = HawkesModel::from_weights(vec![1.0, 1.0], w, 4.0).unwrap();
        let mut cut = Tensor::zeros(2, 2);
        cut.set(1, 0, 1.0);
        assert_eq!(m.intervened(Some(&cut)).max_abs(), 0.0);
    }
}
