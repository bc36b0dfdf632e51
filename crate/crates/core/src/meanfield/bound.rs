use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Per-node Lipschitz constants entering the mean-field error bound.
///
/// `l_t[n]` bounds the one-bin transition map (flow after jump) in the norm
/// `||dH||_F + ||dx||_2 / sqrt(N)`. With that count scaling
/// `E||x - lambda_hat|| / sqrt(N) <= sqrt(L_0) + L_0` whenever intensities
/// lie in `[0, L_0]`, so `m[n] = l_t[n] (sqrt(L_0) + L_0)` is a valid
/// per-step error injection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzProfile {
    /// Drift flow over one bin.
    pub l_f: f64,
    /// Jump kernel.
    pub l_phi: f64,
    /// Per-node composite transition.
    pub l_t: Vec<f64>,
    /// Intensity upper bound.
    pub l0: f64,
    /// Intensity head.
    pub l_g: f64,
    /// Spectral radius of the influence matrix.
    pub lambda_w: f64,
    /// Per-node error injection `L_T (sqrt(L_0) + L_0)`.
    pub m: Vec<f64>,
}

impl LipschitzProfile {
    pub fn new(l_f: f64, l_phi: f64, l_t: Vec<f64>, l0: f64, l_g: f64, lambda_w: f64) -> Self {
        let m = l_t.iter().map(|t| t * (l0.sqrt() + l0)).collect();
        LipschitzProfile {
            l_f,
            l_phi,
            l_t,
            l0,
            l_g,
            lambda_w,
            m,
        }
    }

    pub fn max_l_t(&self) -> f64 {
        self.l_t.iter().cloned().fold(0.0, f64::max)
    }
}

/// `|J(t) - J_hat(t)| <= N (t + 1) L_g max_n M_n / (1 - max_n L_{T_n})`.
///
/// Undefined unless every `L_T < 1`.
pub fn error_bound(p: &LipschitzProfile, n: usize, t: usize) -> Result<f64> {
    if p.l_t.is_empty() || p.l_t.len() != p.m.len() {
        return Err(Error::contract("Lipschitz profile vectors must be nonempty and aligned"));
    }
    let l_t = p.max_l_t();
    if !(l_t < 1.0) {
        return Err(Error::BoundInapplicable { l_t });
    }
    let m = p.m.iter().cloned().fold(0.0, f64::max);
    Ok(n as f64 * (t as f64 + 1.0) * p.l_g * m / (1.0 - l_t))
}

/// Empirical Lipschitz estimate: the largest `|f(a) - f(b)| / |a - b|` over
/// `pairs` random pairs drawn by `sample`. A lower bound on the true constant.
pub fn estimate_lipschitz(
    f: impl Fn(&[f64]) -> Vec<f64>,
    mut sample: impl FnMut(&mut rng::Rng) -> Vec<f64>,
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    if pairs == 0 {
        return Err(Error::contract("at least one pair is required"));
    }
    let mut r = rng::seeded(seed);
    let mut best = 0.0f64;
    for _ in 0..pairs {
        let a = sample(&mut r);
        let b: Vec<f64> = if r.random_bool(0.5) {
            sample(&mut r)
        } else {
            // Local pairs probe the derivative rather than chords.
            a.iter().map(|v| v + 1e-4 * (r.random::<f64>() - 0.5)).collect()
        };
        let dx = dist(&a, &b);
        if dx > 0.0 {
            best = best.max(dist(&f(&a), &f(&b)) / dx);
        }
    }
    Ok(best)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(l_t: f64, m: f64, l_g: f64) -> LipschitzProfile {
        LipschitzProfile {
            l_f: 0.0,
            l_phi: 0.0,
            l_t: vec![l_t; 2],
            l0: 0.0,
            l_g,
            lambda_w: 0.0,
            m: vec![m; 2],
        }
    }

    #[test]
    fn worked_example() {
        assert!((error_bound(&profile(0.5, 0.1, 1.0), 2, 4).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_intensity_bound_vanishes() {
        let p = LipschitzProfile::new(0.5, 0.5, vec![0.5, 0.3], 0.0, 1.0, 0.2);
        assert_eq!(error_bound(&p, 2, 10).unwrap(), 0.0);
    }

    #[test]
    fn linear_in_horizon_and_monotone_in_l0() {
        let p = LipschitzProfile::new(0.5, 0.5, vec![0.5], 1.0, 1.0, 0.2);
        let b1 = error_bound(&p, 3, 1).unwrap();
        assert!((error_bound(&p, 3, 3).unwrap() - 2.0 * b1).abs() < 1e-12);
        let q = LipschitzProfile::new(0.5, 0.5, vec![0.5], 2.0, 1.0, 0.2);
        assert!(error_bound(&q, 3, 1).unwrap() > b1);
        assert!(error_bound(&p, 4, 1).unwrap() > b1);
    }

    #[test]
    fn expansive_map_rejected() {
        assert!(matches!(
            error_bound(&profile(1.0, 1.0, 1.0), 2, 1),
            Err(Error::BoundInapplicable { .. })
        ));
    }

    #[test]
    fn injection_term() {
        let p = LipschitzProfile::new(0.0, 0.0, vec![0.5], 4.0, 1.0, 0.0);
        assert_eq!(p.m[0], 0.5 * 6.0);
    }

    #[test]
    fn contraction_estimate_is_exact() {
        let l = estimate_lipschitz(
            |x| x.iter().map(|v| 0.5 * v).collect(),
            |r| (0..3).map(|_| r.random::<f64>()).collect(),
            200,
            1,
        )
        .unwrap();
        assert!((l - 0.5).abs() < 1e-12);
    }

    #[test]
    fn linear_map_estimate_below_operator_norm() {
        // Operator norm of diag(3, 1) is 3.
        let l = estimate_lipschitz(
            |x| vec![3.0 * x[0], x[1]],
            |r| (0..2).map(|_| r.random::<f64>() - 0.5).collect(),
            2000,
            2,
        )
        .unwrap();
        assert!(l <= 3.0 + 1e-9 && l > 2.5, "{l}");
    }

    #[test]
    fn tanh_network_below_layer_norm_product() {
        let w1 = [[1.2, -0.4], [0.3, 0.9]];
        let w2 = [0.7, -1.1];
        let f = |x: &[f64]| {
            let a: Vec<f64> = (0..2).map(|j| (x[0] * w1[0][j] + x[1] * w1[1][j]).tanh()).collect();
            vec![a[0] * w2[0] + a[1] * w2[1]]
        };
        let n1 = crate::meanfield::linear::spectral_norm(&nalgebra::DMatrix::from_row_slice(2, 2, &[1.2, -0.4, 0.3, 0.9]));
        let n2 = (0.7f64 * 0.7 + 1.1 * 1.1).sqrt();
        let l = estimate_lipschitz(f, |r| (0..2).map(|_| 4.0 * r.random::<f64>() - 2.0).collect(), 2000, 3).unwrap();
        assert!(l > 0.0 && l <= n1 * n2, "{l} vs {}", n1 * n2);
    }

    #[test]
    fn zero_pairs_rejected() {
        assert!(estimate_lipschitz(|x| x.to_vec(), |_| vec![0.0], 0, 0).is_err());
    }
}
