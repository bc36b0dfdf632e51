use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    /// `max |AD - FD| / (|FD| + 1e-12)` over resolved, kink-free entries.
    pub max_rel_error: f64,
    /// `(param, flat index)` of the entry attaining `max_rel_error`.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Entries whose derivative is smaller than the finite-difference
    /// resolution. Their relative error is meaningless; they are instead held
    /// to `|AD - FD| <= resolution` and tallied in `max_abs_unresolved`.
    pub below_resolution: usize,
    pub max_abs_unresolved: f64,
    /// Entries where the one-sided differences disagree, i.e. the objective
    /// has a kink within one step. Excluded from both error figures.
    pub kinks: Vec<(usize, usize)>,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error <= rel_tol && self.max_abs_unresolved.is_finite()
    }
}

// Rounding noise of a central difference is about eps * |f| / h; the factor
// keeps comfortable headroom above it.
const RESOLUTION_FACTOR: f64 = 1e4;
const KINK_REL: f64 = 1e-2;

fn eval<F>(objective: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = objective(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::contract("gradient objective must be scalar"));
    }
    Ok(v.item())
}

/// Differentiate `objective` at `params` and compare every entry against a
/// central difference with step `fd_step`.
pub fn check_gradient<F>(objective: F, params: &[Tensor], fd_step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(fd_step > 0.0) {
        return Err(Error::contract("fd_step must be positive"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = objective(&mut g, &vars)?;
    let f0 = g.value(out).item();
    let ad = g.grad(out, &vars)?;
    drop(g);

    let mut report = GradCheck::default();
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.numel() {
            let x = p.data()[k];
            work[pi].data_mut()[k] = x + fd_step;
            let fp = eval(&objective, &work)?;
            work[pi].data_mut()[k] = x - fd_step;
            let fm = eval(&objective, &work)?;
            work[pi].data_mut()[k] = x;

            let fd = (fp - fm) / (2.0 * fd_step);
            let fwd = (fp - f0) / fd_step;
            let bwd = (f0 - fm) / fd_step;
            let scale = f0.abs().max(fp.abs()).max(fm.abs()).max(1.0);
            let resolution = RESOLUTION_FACTOR * f64::EPSILON * scale / fd_step;
            if (fwd - bwd).abs() > KINK_REL * (fwd.abs() + bwd.abs()) + resolution {
                report.kinks.push((pi, k));
                continue;
            }
            let a = ad[pi].data()[k];
            if fd.abs() < resolution && a.abs() < resolution {
                report.below_resolution += 1;
                let abs = (a - fd).abs();
                if abs > report.max_abs_unresolved {
                    report.max_abs_unresolved = abs;
                }
                continue;
            }
            let rel = (a - fd).abs() / (fd.abs() + 1e-12);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let r = check_gradient(
            |g, p| {
                let x2 = g.mul(p[0], p[0]);
                let x3 = g.mul(x2, p[0]);
                let t = g.scale(x3, 0.5);
                let s = g.add(t, x2);
                Ok(g.sum(s))
            },
            &[Tensor::row(vec![0.7, -1.3, 2.0])],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
        assert_eq!(r.checked, 3);
        assert!(r.kinks.is_empty());
    }

    #[test]
    fn kink_is_flagged_and_excluded() {
        let r = check_gradient(
            |g, p| {
                let a = g.abs(p[0]);
                Ok(g.sum(a))
            },
            &[Tensor::row(vec![0.0, 2.0])],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.kinks, vec![(0, 0)]);
        assert_eq!(r.checked, 1);
        assert!(r.max_rel_error < 1e-9);
    }
}
