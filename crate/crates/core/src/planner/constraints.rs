use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Per-stage action constraints and soft-penalty weights.
///
/// All matrices use the edge convention: entry `[m][n]` addresses `m -> n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    /// Intervention cost per edge, `N x N`, nonnegative.
    pub cost: Tensor,
    /// Budget per stage.
    pub budget: f64,
    /// Maximum number of edges cut per stage.
    pub k: usize,
    /// Statically forbidden edges (`true` = never cut).
    #[serde(default)]
    pub hard_mask: Option<Vec<Vec<bool>>>,
    /// Weight of the budget penalty `sum p c`.
    #[serde(default)]
    pub lambda1: f64,
    /// Weight of the smoothing penalty `||p - p_prev||_1`.
    #[serde(default)]
    pub lambda2: f64,
    /// An edge cut this many stages in a row is forbidden at the next stage.
    #[serde(default)]
    pub max_consecutive: Option<usize>,
}

impl ConstraintSpec {
    /// Unit costs, unlimited budget, no penalties or masks.
    pub fn top_k(n: usize, k: usize) -> Self {
        ConstraintSpec {
            cost: Tensor::filled(n, n, 1.0),
            budget: f64::INFINITY,
            k,
            hard_mask: None,
            lambda1: 0.0,
            lambda2: 0.0,
            max_consecutive: None,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.cost.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes();
        if self.cost.dims2() != (n, n) || self.cost.data().iter().any(|&c| !(c >= 0.0)) {
            return Err(Error::contract("cost must be a nonnegative N x N matrix"));
        }
        if !(self.budget >= 0.0) || !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(Error::contract("budget and penalty weights must be nonnegative"));
        }
        if let Some(m) = &self.hard_mask {
            if m.len() != n || m.iter().any(|r| r.len() != n) {
                return Err(Error::contract("hard mask must be N x N"));
            }
        }
        if self.max_consecutive == Some(0) {
            return Err(Error::contract("max_consecutive must be at least 1"));
        }
        Ok(())
    }
}

/// Hard k-hot intervention, `N x N` in the edge convention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionMatrix {
    n: usize,
    /// Selected edges in row-major order.
    edges: Vec<(usize, usize)>,
}

impl ActionMatrix {
    pub fn empty(n: usize) -> Self {
        ActionMatrix { n, edges: Vec::new() }
    }

    pub fn from_edges(n: usize, mut edges: Vec<(usize, usize)>) -> Result<Self> {
        if edges.iter().any(|&(m, k)| m >= n || k >= n) {
            return Err(Error::contract("edge index out of range"));
        }
        edges.sort_unstable();
        edges.dedup();
        Ok(ActionMatrix { n, edges })
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn contains(&self, m: usize, n: usize) -> bool {
        self.edges.binary_search(&(m, n)).is_ok()
    }

    /// `sum a c`, summed in row-major order.
    pub fn cost(&self, c: &Tensor) -> f64 {
        self.edges.iter().map(|&(m, n)| c.get(m, n)).sum()
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros(self.n, self.n);
        for &(m, n) in &self.edges {
            t.set(m, n, 1.0);
        }
        t
    }

    /// `m>n` pairs joined by `;`.
    pub fn format_edges(&self) -> String {
        self.edges.iter().map(|(m, n)| format!("{m}>{n}")).collect::<Vec<_>>().join(";")
    }

    /// Checks every constraint; `forbidden[m][n]` marks dynamically masked
    /// edges on top of `cs.hard_mask`.
    pub fn check(&self, cs: &ConstraintSpec, forbidden: &[Vec<bool>]) -> Result<()> {
        if self.len() > cs.k {
            return Err(Error::contract(format!("{} edges exceed K = {}", self.len(), cs.k)));
        }
        let c = self.cost(&cs.cost);
        if c > cs.budget {
            return Err(Error::contract(format!("cost {c} exceeds budget {}", cs.budget)));
        }
        let masked = |m: usize, n: usize| m == n || forbidden[m][n] || cs.hard_mask.as_ref().is_some_and(|h| h[m][n]);
        if let Some(&(m, n)) = self.edges.iter().find(|&&(m, n)| masked(m, n)) {
            return Err(Error::contract(format!("edge {m}>{n} is masked")));
        }
        Ok(())
    }
}

/// Edges that may be cut: on the adjacency, off the diagonal, not in
/// `cs.hard_mask`, and not in the dynamic `extra` mask.
pub fn admissible(adjacency: &[Vec<bool>], cs: &ConstraintSpec, extra: Option<&[Vec<bool>]>) -> Vec<Vec<bool>> {
    let n = adjacency.len();
    (0..n)
        .map(|m| {
            (0..n)
                .map(|k| {
                    m != k
                        && adjacency[m][k]
                        && !cs.hard_mask.as_ref().is_some_and(|h| h[m][k])
                        && !extra.is_some_and(|e| e[m][k])
                })
                .collect()
        })
        .collect()
}

/// Greedy projection of relaxed probabilities onto the constraint set.
///
/// Visits admissible entries with `p > 0` by descending `p` (ties: smallest
/// row-major index first), skipping any edge that would push the cost over
/// budget, and stops at `K` edges.
pub fn project_topk(p: &Tensor, cs: &ConstraintSpec, admissible: &[Vec<bool>]) -> ActionMatrix {
    let n = p.rows();
    let mut order: Vec<(usize, usize)> = (0..n)
        .flat_map(|m| (0..n).map(move |k| (m, k)))
        .filter(|&(m, k)| admissible[m][k] && p.get(m, k) > 0.0)
        .collect();
    order.sort_by(|a, b| p.get(b.0, b.1).total_cmp(&p.get(a.0, a.1)).then(a.cmp(b)));
    let mut chosen = ActionMatrix::empty(n);
    for e in order {
        if chosen.len() >= cs.k {
            break;
        }
        let mut trial = chosen.clone();
        let pos = trial.edges.binary_search(&e).unwrap_err();
        trial.edges.insert(pos, e);
        // Summed exactly as `ActionMatrix::check` sums, so acceptance here
        // cannot disagree with validation by rounding.
        if trial.cost(&cs.cost) <= cs.budget {
            chosen = trial;
        }
    }
    chosen
}

/// Consecutive-intervention counter feeding the dynamic hard mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsecutiveTracker {
    runs: Vec<Vec<usize>>,
    max: Option<usize>,
}

impl ConsecutiveTracker {
    pub fn new(n: usize, max: Option<usize>) -> Self {
        ConsecutiveTracker {
            runs: vec![vec![0; n]; n],
            max,
        }
    }

    pub fn record(&mut self, a: &ActionMatrix) {
        for (m, row) in self.runs.iter_mut().enumerate() {
            for (k, r) in row.iter_mut().enumerate() {
                *r = if a.contains(m, k) { *r + 1 } else { 0 };
            }
        }
    }

    /// Edges whose run has reached the cap.
    pub fn mask(&self) -> Vec<Vec<bool>> {
        self.runs
            .iter()
            .map(|row| row.iter().map(|&r| self.max.is_some_and(|mx| r >= mx)).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(n: usize) -> Vec<Vec<bool>> {
        vec![vec![true; n]; n]
    }

    #[test]
    fn k_zero_is_empty() {
        let p = Tensor::filled(3, 3, 0.5);
        let cs = ConstraintSpec::top_k(3, 0);
        assert!(project_topk(&p, &cs, &admissible(&full(3), &cs, None)).is_empty());
    }

    #[test]
    fn exact_k_hot_recovered() {
        let mut p = Tensor::zeros(3, 3);
        p.set(0, 1, 1.0);
        p.set(2, 0, 1.0);
        let cs = ConstraintSpec::top_k(3, 2);
        let a = project_topk(&p, &cs, &admissible(&full(3), &cs, None));
        assert_eq!(a.edges(), &[(0, 1), (2, 0)]);
    }

    #[test]
    fn greedy_skips_over_budget_edge() {
        let eps = 1e-3;
        let mut p = Tensor::zeros(3, 3);
        let mut cs = ConstraintSpec::top_k(3, 2);
        cs.budget = 1.0;
        for (&(m, n), (&pv, &cv)) in [(0, 1), (1, 2), (2, 0)].iter().zip([0.9, 0.8, 0.7].iter().zip(&[1.0 - eps, 1.0, eps])) {
            p.set(m, n, pv);
            cs.cost.set(m, n, cv);
        }
        let a = project_topk(&p, &cs, &admissible(&full(3), &cs, None));
        assert_eq!(a.edges(), &[(0, 1), (2, 0)]);
    }

    #[test]
    fn ties_break_row_major() {
        let p = Tensor::filled(3, 3, 0.5);
        let cs = ConstraintSpec::top_k(3, 2);
        let a = project_topk(&p, &cs, &admissible(&full(3), &cs, None));
        assert_eq!(a.edges(), &[(0, 1), (0, 2)]);
    }

    #[test]
    fn consecutive_cap_masks_edge() {
        let mut t = ConsecutiveTracker::new(2, Some(2));
        let a = ActionMatrix::from_edges(2, vec![(0, 1)]).unwrap();
        t.record(&a);
        assert!(!t.mask()[0][1]);
        t.record(&a);
        assert!(t.mask()[0][1]);
        let cs = ConstraintSpec::top_k(2, 1);
        let m = t.mask();
        let adm = admissible(&full(2), &cs, Some(&m));
        let p = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.3, 0.0]]);
        assert_eq!(project_topk(&p, &cs, &adm).edges(), &[(1, 0)]);
        t.record(&ActionMatrix::empty(2));
        assert!(!t.mask()[0][1]);
    }

    #[test]
    fn all_masked_forces_empty() {
        let mut cs = ConstraintSpec::top_k(3, 3);
        cs.hard_mask = Some(full(3));
        let adm = admissible(&full(3), &cs, None);
        assert!(project_topk(&Tensor::filled(3, 3, 0.9), &cs, &adm).is_empty());
    }
}
