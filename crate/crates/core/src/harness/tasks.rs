use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::planner::ConstraintSpec;
use crate::pointproc::{bin_events, rescale_to_stable, simulate_thinning, spectral_radius, HawkesModel, SpikeCountMatrix};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Each ordered pair (diagonal included) kept with probability `sparsity`.
    #[default]
    Random,
    /// Node 0 excites every other node.
    Star,
    /// Node `i` excites node `i + 1 mod N`.
    Cycle,
}

/// Synthetic Hawkes task recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub topology: Topology,
    pub n_nodes: usize,
    pub sparsity: f64,
    pub w_low: f64,
    pub w_high: f64,
    pub mu_low: f64,
    pub mu_high: f64,
    pub beta: f64,
    pub horizon: f64,
    pub bin_width: f64,
    /// Spectral radius above which the weights are rescaled down to it.
    pub max_rho: f64,
    pub k: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            topology: Topology::Random,
            n_nodes: 10,
            sparsity: 0.1,
            w_low: 0.0,
            w_high: 0.5,
            mu_low: 0.5,
            mu_high: 1.0,
            beta: 4.0,
            horizon: 100.0,
            bin_width: 1.0,
            max_rho: 0.9,
            k: 3,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 || !(0.0..=1.0).contains(&self.sparsity) {
            return Err(Error::Config("n_nodes must be positive and sparsity in [0, 1]".into()));
        }
        if !(0.0 <= self.w_low && self.w_low <= self.w_high) || !(0.0 <= self.mu_low && self.mu_low <= self.mu_high) {
            return Err(Error::Config("weight and baseline ranges must be ordered and nonnegative".into()));
        }
        if !(self.beta > 0.0 && self.horizon > 0.0 && self.bin_width > 0.0) || !(self.max_rho > 0.0 && self.max_rho < 1.0) {
            return Err(Error::Config("beta, horizon, bin_width must be positive and max_rho in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Ground truth, one simulated observation window, and default constraints.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub hawkes: HawkesModel,
    pub counts: SpikeCountMatrix,
    pub constraints: ConstraintSpec,
}

impl SyntheticTask {
    /// Adjacency in the edge convention (`[m][n]` is `m -> n`).
    pub fn edge_adjacency(&self) -> Vec<Vec<bool>> {
        let a = &self.hawkes.adjacency;
        let n = a.len();
        (0..n).map(|m| (0..n).map(|k| a[k][m]).collect()).collect()
    }
}

/// Sample a stable Hawkes model and simulate it over `spec.horizon`.
pub fn make_synthetic_task(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticTask> {
    let hawkes = synthetic_hawkes(spec, seed)?;
    let events = simulate_thinning(&hawkes, spec.horizon, rng::derive(seed, 1))?;
    let counts = bin_events(&events, spec.bin_width)?;
    let constraints = ConstraintSpec::top_k(spec.n_nodes, spec.k);
    Ok(SyntheticTask {
        hawkes,
        counts,
        constraints,
    })
}

/// The Hawkes model part of [`make_synthetic_task`].
pub fn synthetic_hawkes(spec: &SyntheticSpec, seed: u64) -> Result<HawkesModel> {
    spec.validate()?;
    let n = spec.n_nodes;
    let mut r = rng::seeded(seed);
    let mut w = Tensor::zeros(n, n);
    let weight = |r: &mut rng::Rng| spec.w_low + (spec.w_high - spec.w_low) * r.random::<f64>();
    match spec.topology {
        Topology::Random => {
            for i in 0..n {
                for j in 0..n {
                    if r.random::<f64>() < spec.sparsity {
                        w.set(i, j, weight(&mut r));
                    }
                }
            }
        }
        Topology::Star => {
            for leaf in 1..n {
                w.set(leaf, 0, weight(&mut r));
            }
        }
        Topology::Cycle => {
            if n > 1 {
                for i in 0..n {
                    w.set((i + 1) % n, i, weight(&mut r));
                }
            }
        }
    }
    let adjacency = (0..n).map(|i| (0..n).map(|j| w.get(i, j) != 0.0).collect()).collect();
    if spectral_radius(&w)? >= spec.max_rho {
        w = rescale_to_stable(&w, spec.max_rho)?;
    }
    let mu = (0..n)
        .map(|_| spec.mu_low + (spec.mu_high - spec.mu_low) * r.random::<f64>())
        .collect();
    HawkesModel::new(mu, w, spec.beta, adjacency)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn star_has_hub_edges_only() {
        let spec = SyntheticSpec {
            topology: Topology::Star,
            n_nodes: 5,
            ..SyntheticSpec::default()
        };
        let t = make_synthetic_task(&spec, 3).unwrap();
        let edges: Vec<(usize, usize)> = t
            .edge_adjacency()
            .iter()
            .enumerate()
            .flat_map(|(m, row)| row.iter().enumerate().filter(|(_, &b)| b).map(move |(n, _)| (m, n)))
            .collect();
        assert_eq!(edges, vec![(0, 1), (0, 2), (0, 3), (0, 4)]);
    }

    #[test]
    fn reference_default_is_stable_and_deterministic() {
        for seed in 0..20 {
            let t = make_synthetic_task(&SyntheticSpec::default(), seed).unwrap();
            assert!(spectral_radius(&t.hawkes.w).unwrap() < 1.0);
            assert_eq!(t.counts.n_bins, 100);
            assert_eq!(t.counts.n_nodes, 10);
            assert!(t.hawkes.w.data().iter().all(|&v| (0.0..=0.5).contains(&v)));
        }
        assert_eq!(
            make_synthetic_task(&SyntheticSpec::default(), 7).unwrap(),
            make_synthetic_task(&SyntheticSpec::default(), 7).unwrap()
        );
    }

    #[test]
    fn cycle_edges() {
        let spec = SyntheticSpec {
            topology: Topology::Cycle,
            n_nodes: 4,
            ..SyntheticSpec::default()
        };
        let h = synthetic_hawkes(&spec, 1).unwrap();
        for i in 0..4 {
            assert!(h.adjacency[(i + 1) % 4][i]);
            assert_eq!(h.adjacency.iter().flatten().filter(|&&b| b).count(), 4);
        }
    }
}
