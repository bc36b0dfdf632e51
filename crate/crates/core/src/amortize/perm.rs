use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::planner::ConstraintSpec;
use crate::rng;

/// Node relabeling: row `i` of `P h` is row `perm[i]` of `h`.
pub type Perm = Vec<usize>;

pub fn identity_perm(n: usize) -> Perm {
    (0..n).collect()
}

pub fn inverse_perm(perm: &[usize]) -> Perm {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `P h`.
pub fn permute_rows(h: &Tensor, perm: &[usize]) -> Tensor {
    let c = h.cols();
    let mut out = Vec::with_capacity(h.numel());
    for &p in perm {
        out.extend_from_slice(h.row_slice(p));
    }
    Tensor::matrix(perm.len(), c, out)
}

/// `P a Pᵀ`: entry `(i, j)` is `a[perm[i]][perm[j]]`.
pub fn permute_matrix(a: &Tensor, perm: &[usize]) -> Tensor {
    let n = perm.len();
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, a.get(perm[i], perm[j]));
        }
    }
    out
}

/// `Pᵀ a P`, the inverse of [`permute_matrix`].
pub fn unpermute_matrix(a: &Tensor, perm: &[usize]) -> Tensor {
    permute_matrix(a, &inverse_perm(perm))
}

pub fn permute_mask(m: &[Vec<bool>], perm: &[usize]) -> Vec<Vec<bool>> {
    perm.iter().map(|&p| perm.iter().map(|&q| m[p][q]).collect()).collect()
}

/// Constraints relabeled to follow the nodes.
pub fn permute_constraints(cs: &ConstraintSpec, perm: &[usize]) -> ConstraintSpec {
    ConstraintSpec {
        cost: permute_matrix(&cs.cost, perm),
        hard_mask: cs.hard_mask.as_ref().map(|m| permute_mask(m, perm)),
        ..cs.clone()
    }
}

/// Uniform draw among the `N! - 1` non-identity permutations (rejection).
pub fn random_perm(n: usize, r: &mut rng::Rng) -> Result<Perm> {
    if n < 2 {
        return Err(Error::contract("a non-identity permutation needs N >= 2"));
    }
    let id = identity_perm(n);
    loop {
        let mut p = id.clone();
        p.shuffle(r);
        if p != id {
            return Ok(p);
        }
    }
}

/// Positive-group augmentation: `(P h, perm)`.
pub fn augment_permutation(h: &Tensor, seed: u64) -> Result<(Tensor, Perm)> {
    let perm = random_perm(h.rows(), &mut rng::seeded(seed))?;
    Ok((permute_rows(h, &perm), perm))
}

pub const MAGNITUDE_RANGE: (f64, f64) = (0.5, 2.0);

/// Negative-group augmentation: every node row scaled by an independent
/// `LogUniform[0.5, 2]` factor. Returns the scaled state and the factors.
pub fn augment_magnitude(h: &Tensor, seed: u64) -> (Tensor, Vec<f64>) {
    let mut r = rng::seeded(seed);
    let (lo, hi) = (MAGNITUDE_RANGE.0.ln(), MAGNITUDE_RANGE.1.ln());
    let factors: Vec<f64> = (0..h.rows()).map(|_| r.random_range(lo..hi).exp()).collect();
    (scale_rows(h, &factors), factors)
}

pub fn scale_rows(h: &Tensor, factors: &[f64]) -> Tensor {
    let c = h.cols();
    let mut out = h.clone();
    for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
        for v in row {
            *v *= factors[i];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h() -> Tensor {
        Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.0], vec![3.0, 4.0], vec![-1.0, 1.0]])
    }

    #[test]
    fn permutation_is_reproducible_non_identity_and_row_multiset_preserving() {
        let (a, pa) = augment_permutation(&h(), 9).unwrap();
        let (b, pb) = augment_permutation(&h(), 9).unwrap();
        assert_eq!((a.clone(), pa.clone()), (b, pb));
        assert_ne!(pa, identity_perm(4));
        let key = |t: &Tensor| {
            let mut rows: Vec<Vec<u64>> = (0..t.rows()).map(|i| t.row_slice(i).iter().map(|v| v.to_bits()).collect()).collect();
            rows.sort();
            rows
        };
        assert_eq!(key(&a), key(&h()));
    }

    #[test]
    fn two_node_perm_is_the_swap() {
        let mut r = rng::seeded(0);
        for _ in 0..10 {
            assert_eq!(random_perm(2, &mut r).unwrap(), vec![1, 0]);
        }
        assert!(random_perm(1, &mut r).is_err());
    }

    #[test]
    fn magnitude_factors_recount() {
        let (s, f) = augment_magnitude(&h(), 3);
        assert_eq!(augment_magnitude(&h(), 3).0, s);
        for (i, &fi) in f.iter().enumerate() {
            assert!((0.5..=2.0).contains(&fi));
            let n0: f64 = h().row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let n1: f64 = s.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n1 - fi * n0).abs() <= 1e-12 * n1.max(1.0));
        }
    }

    #[test]
    fn matrix_permutation_round_trips() {
        let a = Tensor::matrix(3, 3, (0..9).map(f64::from).collect());
        let p = vec![2, 0, 1];
        assert_eq!(unpermute_matrix(&permute_matrix(&a, &p), &p), a);
        assert_eq!(permute_matrix(&a, &p).get(0, 1), a.get(2, 0));
    }
}
