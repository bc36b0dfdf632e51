use nalgebra::DMatrix;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

const POWER_MAX_ITERS: usize = 20_000;
const POWER_GAP_TOL: f64 = 1e-12;

pub(crate) fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = t.dims2();
    DMatrix::from_row_slice(r, c, t.data())
}

fn check_square(w: &Tensor) -> Result<usize> {
    let (r, c) = w.dims2();
    if r != c {
        return Err(Error::contract(format!("expected a square matrix, got {r}x{c}")));
    }
    Ok(r)
}

/// Dominant eigenvalue modulus from a dense eigensolve.
pub fn spectral_radius_dense(w: &Tensor) -> Result<f64> {
    let n = check_square(w)?;
    if n == 0 {
        return Ok(0.0);
    }
    let eig = to_dmatrix(w).complex_eigenvalues();
    Ok(eig.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Power iteration on `W + I` for a nonnegative matrix.
///
/// The shift makes the iteration aperiodic (cycles would otherwise
/// oscillate) without changing the Perron vector. Convergence is declared
/// when the Collatz–Wielandt bounds `min (Ax)_i/x_i <= rho + 1 <= max
/// (Ax)_i/x_i` close to within `POWER_GAP_TOL`. Returns `None` if they do not.
fn power_radius(w: &Tensor) -> Option<f64> {
    let n = w.rows();
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    let mut y = vec![0.0; n];
    for _ in 0..POWER_MAX_ITERS {
        for i in 0..n {
            let row = w.row_slice(i);
            y[i] = x[i] + row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
        }
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            if x[i] <= 1e-150 {
                return None;
            }
            let ratio = y[i] / x[i];
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
        if hi - lo <= POWER_GAP_TOL * hi {
            return Some(0.5 * (hi + lo) - 1.0);
        }
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / norm;
        }
    }
    None
}

/// Spectral radius `rho(W)`.
///
/// Nonnegative matrices go through power iteration; if it fails to certify
/// convergence (reducible structure, near-degenerate moduli) or `W` has
/// negative entries, a dense eigensolve is used instead.
pub fn spectral_radius(w: &Tensor) -> Result<f64> {
    let n = check_square(w)?;
    if n == 0 || w.data().iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    if w.data().iter().all(|&v| v >= 0.0) {
        if let Some(rho) = power_radius(w) {
            return Ok(rho.max(0.0));
        }
    }
    spectral_radius_dense(w)
}

/// `W * target_rho / rho(W)`; the zero matrix is returned unchanged.
pub fn rescale_to_stable(w: &Tensor, target_rho: f64) -> Result<Tensor> {
    if !(target_rho > 0.0 && target_rho < 1.0) {
        return Err(Error::contract(format!("target spectral radius {target_rho} outside (0, 1)")));
    }
    let rho = spectral_radius(w)?;
    if rho == 0.0 {
        return Ok(w.clone());
    }
    Ok(w.scale(target_rho / rho))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_two_by_two() {
        let w = Tensor::from_rows(&[vec![0.0, 0.5], vec![0.5, 0.0]]);
        assert!((spectral_radius(&w).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix() {
        let w = Tensor::zeros(3, 3);
        assert_eq!(spectral_radius(&w).unwrap(), 0.0);
        assert_eq!(rescale_to_stable(&w, 0.5).unwrap(), w);
    }

    #[test]
    fn cycle_converges() {
        let n = 10;
        let mut w = Tensor::zeros(n, n);
        for i in 0..n {
            w.set((i + 1) % n, i, 0.7);
        }
        assert!((spectral_radius(&w).unwrap() - 0.7).abs() < 1e-9);
    }

    #[test]
    fn nilpotent_falls_back() {
        let w = Tensor::from_rows(&[vec![0.0, 0.5], vec![0.0, 0.0]]);
        assert!(spectral_radius(&w).unwrap().abs() < 1e-8);
    }

    #[test]
    fn rescale_hits_target() {
        let w = Tensor::from_rows(&[vec![0.2, 0.9, 0.0], vec![0.4, 0.1, 0.3], vec![0.8, 0.0, 0.5]]);
        let s = rescale_to_stable(&w, 0.6).unwrap();
        assert!((spectral_radius(&s).unwrap() - 0.6).abs() < 1e-8);
        assert!(rescale_to_stable(&w, 1.0).is_err());
    }
}
