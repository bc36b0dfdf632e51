use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};

use super::constraints::ConstraintSpec;

/// Logit assigned to masked entries; `exp` of it underflows to exactly zero.
pub const MASK_SENTINEL: f64 = -1e30;

const LOG_FLOOR: f64 = 1e-12;

/// Map from logits to edge probabilities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relaxation {
    /// Deterministic relaxed top-k: `K` successive softmaxes over the
    /// admissible entries, each round discounting mass already taken by
    /// `log(1 - alpha)`. The accumulated mass is clipped at 1 per entry, so
    /// probabilities sum to at most `min(K, #admissible)`.
    #[default]
    TopK,
    /// Independent `sigmoid(logit)` per edge.
    Independent,
}

/// Logits with masked (inadmissible) entries replaced by the sentinel.
pub fn apply_hard_mask(logits: &Tensor, admissible: &[Vec<bool>]) -> Tensor {
    let mut out = logits.clone();
    for (m, row) in admissible.iter().enumerate() {
        for (n, &ok) in row.iter().enumerate() {
            if !ok {
                out.set(m, n, MASK_SENTINEL);
            }
        }
    }
    out
}

fn keep_tensor(admissible: &[Vec<bool>]) -> Tensor {
    let n = admissible.len();
    let data = admissible.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![n, n], data).expect("square mask")
}

/// Masked logits on the graph. Inadmissible entries are a constant sentinel,
/// so their logits receive exactly zero gradient.
pub fn masked_logits(g: &mut Graph, logits: Var, admissible: &[Vec<bool>]) -> Var {
    let keep = keep_tensor(admissible);
    let sentinel = keep.map(|k| (1.0 - k) * MASK_SENTINEL);
    let kv = g.constant(keep);
    let sv = g.constant(sentinel);
    let l = g.mul(logits, kv);
    g.add(l, sv)
}

fn softmax_all(g: &mut Graph, s: Var) -> Var {
    // Shift by the current maximum; softmax is shift-invariant so treating
    // the shift as a constant leaves gradients exact.
    let mx = g.value(s).data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = g.add_const(s, -mx);
    let e = g.exp(z);
    let tot = g.sum(e);
    g.div(e, tot)
}

/// Edge probabilities from logits under the chosen relaxation.
pub fn relax(g: &mut Graph, logits: Var, admissible: &[Vec<bool>], k: usize, kind: Relaxation) -> Var {
    let keep = keep_tensor(admissible);
    let n_ok = keep.sum() as usize;
    match kind {
        Relaxation::Independent => {
            let kv = g.constant(keep);
            let p = g.sigmoid(logits);
            g.mul(p, kv)
        }
        Relaxation::TopK if k == 0 || n_ok == 0 => g.constant(Tensor::zeros(admissible.len(), admissible.len())),
        Relaxation::TopK if k >= n_ok => g.constant(keep),
        Relaxation::TopK => {
            let mut s = masked_logits(g, logits, admissible);
            let floor = g.scalar(LOG_FLOOR);
            let mut p: Option<Var> = None;
            for round in 0..k {
                let alpha = softmax_all(g, s);
                p = Some(match p {
                    Some(acc) => g.add(acc, alpha),
                    None => alpha,
                });
                if round + 1 < k {
                    let rest = g.one_minus(alpha);
                    let rest = g.max(rest, floor);
                    let lr = g.log(rest);
                    s = g.add(s, lr);
                }
            }
            // A dominant entry can collect more than one unit across rounds.
            let one = g.scalar(1.0);
            let p = p.expect("k >= 1");
            g.min(p, one)
        }
    }
}

/// Plain-value version of [`relax`].
pub fn relax_values(logits: &Tensor, admissible: &[Vec<bool>], k: usize, kind: Relaxation) -> Tensor {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let p = relax(&mut g, l, admissible, k, kind);
    g.value(p).clone()
}

/// `W ⊙ (1 - p)`.
pub fn intervene(w: &Tensor, p: &Tensor) -> Tensor {
    w.zip_map(p, |a, b| a * (1.0 - b))
}

/// `lambda1 sum p c + lambda2 ||p - p_prev||_1`.
pub fn soft_penalty(p: &Tensor, p_prev: &Tensor, cs: &ConstraintSpec) -> f64 {
    let mut out = 0.0;
    if cs.lambda1 != 0.0 {
        out += cs.lambda1 * p.zip_map(&cs.cost, |a, c| a * c).sum();
    }
    if cs.lambda2 != 0.0 {
        out += cs.lambda2 * p.zip_map(p_prev, |a, b| (a - b).abs()).sum();
    }
    out
}

/// Graph version of [`soft_penalty`]; `None` when both weights are zero.
pub fn soft_penalty_graph(g: &mut Graph, p: Var, p_prev: Var, cs: &ConstraintSpec) -> Option<Var> {
    let mut out = None;
    if cs.lambda1 != 0.0 {
        let c = g.constant(cs.cost.clone());
        let pc = g.mul(p, c);
        let s = g.sum(pc);
        out = Some(g.scale(s, cs.lambda1));
    }
    if cs.lambda2 != 0.0 {
        let d = g.sub(p, p_prev);
        let a = g.abs(d);
        let s = g.sum(a);
        let t = g.scale(s, cs.lambda2);
        out = Some(match out {
            Some(o) => g.add(o, t),
            None => t,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::admissible;

    fn adm(n: usize) -> Vec<Vec<bool>> {
        admissible(&vec![vec![true; n]; n], &ConstraintSpec::top_k(n, 1), None)
    }

    #[test]
    fn topk_mass_equals_k() {
        let logits = Tensor::from_rows(&[vec![0.0, 1.0, -2.0], vec![0.5, 0.0, 3.0], vec![-1.0, 0.2, 0.0]]);
        let p = relax_values(&logits, &adm(3), 2, Relaxation::TopK);
        // Unclipped mass is exactly 2; entry (1,2) would collect 1.22 and is clipped.
        assert!(p.sum() <= 2.0 + 1e-12 && p.sum() > 1.7);
        assert_eq!(p.get(1, 2), 1.0);
        assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for i in 0..3 {
            assert_eq!(p.get(i, i), 0.0);
        }
    }

    #[test]
    fn mild_logits_keep_full_mass() {
        let l = Tensor::from_rows(&[vec![0.0, 0.3, -0.2], vec![0.1, 0.0, 0.2], vec![-0.1, 0.0, 0.0]]);
        let p = relax_values(&l, &adm(3), 2, Relaxation::TopK);
        assert!((p.sum() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_logits_symmetric() {
        let p = relax_values(&Tensor::zeros(3, 3), &adm(3), 2, Relaxation::TopK);
        for (m, n) in [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)] {
            assert!((p.get(m, n) - 2.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sharp_logits_approach_k_hot() {
        let mut l = Tensor::zeros(3, 3);
        l.set(0, 1, 40.0);
        l.set(2, 1, 40.0);
        let p = relax_values(&l, &adm(3), 2, Relaxation::TopK);
        assert!(p.get(0, 1) > 1.0 - 1e-9 && p.get(2, 1) > 1.0 - 1e-9);
    }

    #[test]
    fn masked_entries_zero_prob_and_gradient() {
        let mut a = adm(3);
        a[0][1] = false;
        for kind in [Relaxation::TopK, Relaxation::Independent] {
            let mut g = Graph::new();
            let l = g.leaf(Tensor::from_rows(&[vec![0.0, 9.0, 1.0], vec![0.3, 0.0, -1.0], vec![2.0, 0.1, 0.0]]));
            let p = relax(&mut g, l, &a, 2, kind);
            assert_eq!(g.value(p).get(0, 1), 0.0);
            let w = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]]));
            let pw = g.mul(p, w);
            let o = g.sum(pw);
            let gr = g.grad(o, &[l]).unwrap();
            assert_eq!(gr[0].get(0, 1), 0.0);
            assert_eq!(gr[0].get(1, 1), 0.0);
            assert!(gr[0].get(0, 2) != 0.0);
        }
    }

    #[test]
    fn sentinel_mask_on_values() {
        let a = vec![vec![true, false], vec![true, true]];
        let m = apply_hard_mask(&Tensor::filled(2, 2, 0.3), &a);
        assert_eq!(m.get(0, 1), MASK_SENTINEL);
        assert_eq!(m.get(1, 0), 0.3);
    }

    #[test]
    fn intervene_extremes() {
        let w = Tensor::from_rows(&[vec![0.5, 0.2], vec![0.1, 0.4]]);
        assert_eq!(intervene(&w, &Tensor::zeros(2, 2)), w);
        let p = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(intervene(&w, &p), Tensor::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.4]]));
    }

    #[test]
    fn penalty_cases() {
        let mut cs = ConstraintSpec::top_k(3, 2);
        let a = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 0.0]]);
        assert_eq!(soft_penalty(&a, &Tensor::zeros(3, 3), &cs), 0.0);
        cs.lambda1 = 1.0;
        assert_eq!(soft_penalty(&a, &Tensor::zeros(3, 3), &cs), 2.0);
        cs.lambda1 = 0.0;
        cs.lambda2 = 1.0;
        assert_eq!(soft_penalty(&a, &a, &cs), 0.0);
        assert_eq!(soft_penalty(&a, &Tensor::zeros(3, 3), &cs), 2.0);
    }
}
