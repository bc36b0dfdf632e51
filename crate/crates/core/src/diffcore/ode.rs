use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeMethod {
    Rk4,
    DormandPrince,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeSolverConfig {
    pub method: OdeMethod,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
    /// Step size for [`OdeMethod::Rk4`]; ignored by the adaptive method.
    pub fixed_dt: f64,
}

impl OdeSolverConfig {
    /// Adaptive solver at tolerance 1e-4, used during training.
    pub fn training() -> Self {
        OdeSolverConfig {
            method: OdeMethod::DormandPrince,
            rel_tol: 1e-4,
            abs_tol: 1e-4,
            max_steps: 10_000,
            fixed_dt: 0.1,
        }
    }

    /// Adaptive solver at tolerance 1e-6, used for evaluation.
    pub fn evaluation() -> Self {
        OdeSolverConfig {
            rel_tol: 1e-6,
            abs_tol: 1e-6,
            ..Self::training()
        }
    }

    pub fn rk4(dt: f64) -> Self {
        OdeSolverConfig {
            method: OdeMethod::Rk4,
            fixed_dt: dt,
            max_steps: usize::MAX,
            ..Self::training()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rel_tol > 0.0
            && self.abs_tol > 0.0
            && self.max_steps > 0
            && (self.method != OdeMethod::Rk4 || self.fixed_dt > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid ODE solver config {self:?}")))
        }
    }
}

impl Default for OdeSolverConfig {
    fn default() -> Self {
        Self::training()
    }
}

/// State representation the integrator is generic over.
///
/// The plain backend works on owned tensors; the graph backend records every
/// stage on a [`Graph`] so the final state is differentiable with respect to
/// anything the drift reads. Step-size control only ever looks at
/// [`OdeSystem::values`], so accepted step sizes are constants of the
/// computed trajectory.
pub trait OdeSystem {
    type State: Clone;

    fn eval(&mut self, t: f64, h: &Self::State) -> Self::State;

    /// `base + sum(c * k)`.
    fn lincomb(&mut self, base: &Self::State, terms: &[(f64, &Self::State)]) -> Self::State;

    fn values<'a>(&'a self, s: &'a Self::State) -> &'a [f64];

    /// Node id reported when a NaN shows up in this state.
    fn node_id(&self, _s: &Self::State) -> usize {
        0
    }
}

struct PlainSystem<F> {
    drift: F,
}

impl<F: FnMut(f64, &Tensor) -> Tensor> OdeSystem for PlainSystem<F> {
    type State = Tensor;

    fn eval(&mut self, t: f64, h: &Tensor) -> Tensor {
        (self.drift)(t, h)
    }

    fn lincomb(&mut self, base: &Tensor, terms: &[(f64, &Tensor)]) -> Tensor {
        let mut out = base.clone();
        for (c, k) in terms {
            if *c == 0.0 {
                continue;
            }
            for (o, x) in out.data_mut().iter_mut().zip(k.data()) {
                *o += c * x;
            }
        }
        out
    }

    fn values<'a>(&'a self, s: &'a Tensor) -> &'a [f64] {
        s.data()
    }
}

struct GraphSystem<'g, F> {
    graph: &'g mut Graph,
    drift: F,
}

impl<F: FnMut(&mut Graph, f64, Var) -> Var> OdeSystem for GraphSystem<'_, F> {
    type State = Var;

    fn eval(&mut self, t: f64, h: &Var) -> Var {
        (self.drift)(self.graph, t, *h)
    }

    fn lincomb(&mut self, base: &Var, terms: &[(f64, &Var)]) -> Var {
        let mut acc = *base;
        for (c, k) in terms {
            if *c == 0.0 {
                continue;
            }
            let scaled = self.graph.scale(**k, *c);
            acc = self.graph.add(acc, scaled);
        }
        acc
    }

    fn values<'a>(&'a self, s: &'a Var) -> &'a [f64] {
        self.graph.value(*s).data()
    }

    fn node_id(&self, s: &Var) -> usize {
        s.id()
    }
}

/// Integrate `dh/dt = drift(t, h)` from `t0` to `t1` on plain tensors.
pub fn integrate_ode<F>(drift: F, h0: &Tensor, t0: f64, t1: f64, cfg: &OdeSolverConfig) -> Result<Tensor>
where
    F: FnMut(f64, &Tensor) -> Tensor,
{
    let mut sys = PlainSystem { drift };
    integrate(&mut sys, h0.clone(), t0, t1, cfg)
}

/// Integrate on a [`Graph`]; the returned node is differentiable.
pub fn integrate_ode_graph<F>(
    graph: &mut Graph,
    drift: F,
    h0: Var,
    t0: f64,
    t1: f64,
    cfg: &OdeSolverConfig,
) -> Result<Var>
where
    F: FnMut(&mut Graph, f64, Var) -> Var,
{
    let mut sys = GraphSystem { graph, drift };
    integrate(&mut sys, h0, t0, t1, cfg)
}

/// Integrate any [`OdeSystem`].
pub fn integrate<S: OdeSystem>(
    sys: &mut S,
    h0: S::State,
    t0: f64,
    t1: f64,
    cfg: &OdeSolverConfig,
) -> Result<S::State> {
    cfg.validate()?;
    if !(t1 >= t0) {
        return Err(Error::contract(format!("integration interval [{t0}, {t1}] is reversed")));
    }
    if t1 == t0 {
        return Ok(h0);
    }
    match cfg.method {
        OdeMethod::Rk4 => rk4(sys, h0, t0, t1, cfg),
        OdeMethod::DormandPrince => dopri5(sys, h0, t0, t1, cfg),
    }
}

fn check_finite<S: OdeSystem>(sys: &S, s: &S::State, t: f64) -> Result<()> {
    if sys.values(s).iter().any(|v| v.is_nan()) {
        return Err(Error::NumericFault {
            node: sys.node_id(s),
            what: format!("NaN state in ODE integration at t = {t}"),
        });
    }
    Ok(())
}

fn rk4<S: OdeSystem>(sys: &mut S, h0: S::State, t0: f64, t1: f64, cfg: &OdeSolverConfig) -> Result<S::State> {
    let span = t1 - t0;
    // Equal steps that land exactly on t1; the epsilon absorbs span/dt round-off.
    let n = ((span / cfg.fixed_dt) - 1e-9).ceil().max(1.0) as usize;
    if n > cfg.max_steps {
        return Err(Error::Divergence {
            max_steps: cfg.max_steps,
            t: t0,
        });
    }
    let dt = span / n as f64;
    let mut y = h0;
    for i in 0..n {
        let t = t0 + i as f64 * dt;
        let k1 = sys.eval(t, &y);
        let y2 = sys.lincomb(&y, &[(0.5 * dt, &k1)]);
        let k2 = sys.eval(t + 0.5 * dt, &y2);
        let y3 = sys.lincomb(&y, &[(0.5 * dt, &k2)]);
        let k3 = sys.eval(t + 0.5 * dt, &y3);
        let y4 = sys.lincomb(&y, &[(dt, &k3)]);
        let k4 = sys.eval(t + dt, &y4);
        y = sys.lincomb(
            &y,
            &[(dt / 6.0, &k1), (dt / 3.0, &k2), (dt / 3.0, &k3), (dt / 6.0, &k4)],
        );
        check_finite(sys, &y, t + dt)?;
    }
    Ok(y)
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

// 5th-order minus embedded 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;

fn rms_scaled(err: impl Iterator<Item = (f64, f64)>, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let s: f64 = err.map(|(e, sc)| (e / sc) * (e / sc)).sum();
    (s / n as f64).sqrt()
}

fn initial_step<S: OdeSystem>(
    sys: &mut S,
    y0: &S::State,
    f0: &S::State,
    t0: f64,
    cfg: &OdeSolverConfig,
) -> f64 {
    let yv = sys.values(y0).to_vec();
    let fv = sys.values(f0).to_vec();
    let n = yv.len();
    let sc: Vec<f64> = yv.iter().map(|y| cfg.abs_tol + cfg.rel_tol * y.abs()).collect();
    let d0 = rms_scaled(yv.iter().copied().zip(sc.iter().copied()), n);
    let d1 = rms_scaled(fv.iter().copied().zip(sc.iter().copied()), n);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1 = sys.lincomb(y0, &[(h0, f0)]);
    let f1 = sys.eval(t0 + h0, &y1);
    let f1v = sys.values(&f1);
    let d2 = rms_scaled(
        f1v.iter().zip(&fv).map(|(a, b)| a - b).zip(sc.iter().copied()),
        n,
    ) / h0;
    let dmax = d1.max(d2);
    let h1 = if dmax <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / dmax).powf(1.0 / 5.0)
    };
    (100.0 * h0).min(h1)
}

fn dopri5<S: OdeSystem>(sys: &mut S, h0: S::State, t0: f64, t1: f64, cfg: &OdeSolverConfig) -> Result<S::State> {
    let mut t = t0;
    let mut y = h0;
    let mut k1 = sys.eval(t, &y);
    check_finite(sys, &k1, t)?;
    let mut dt = initial_step(sys, &y, &k1, t, cfg).min(t1 - t0);
    if !(dt > 0.0) || !dt.is_finite() {
        dt = (t1 - t0) * 1e-3;
    }
    let mut steps = 0usize;
    let mut last_rejected = false;
    while t < t1 {
        if steps >= cfg.max_steps {
            return Err(Error::Divergence {
                max_steps: cfg.max_steps,
                t,
            });
        }
        steps += 1;
        // Snap the final step onto t1 rather than leaving a sliver.
        let mut h = dt;
        let last = t + h >= t1 || (t1 - (t + h)) < 1e-12 * (t1 - t0).max(1.0);
        if last {
            h = t1 - t;
        }
        let y2 = sys.lincomb(&y, &[(h * A21, &k1)]);
        let k2 = sys.eval(t + C2 * h, &y2);
        let y3 = sys.lincomb(&y, &[(h * A31, &k1), (h * A32, &k2)]);
        let k3 = sys.eval(t + C3 * h, &y3);
        let y4 = sys.lincomb(&y, &[(h * A41, &k1), (h * A42, &k2), (h * A43, &k3)]);
        let k4 = sys.eval(t + C4 * h, &y4);
        let y5 = sys.lincomb(
            &y,
            &[(h * A51, &k1), (h * A52, &k2), (h * A53, &k3), (h * A54, &k4)],
        );
        let k5 = sys.eval(t + C5 * h, &y5);
        let y6 = sys.lincomb(
            &y,
            &[
                (h * A61, &k1),
                (h * A62, &k2),
                (h * A63, &k3),
                (h * A64, &k4),
                (h * A65, &k5),
            ],
        );
        let k6 = sys.eval(t + h, &y6);
        let y_new = sys.lincomb(
            &y,
            &[
                (h * A71, &k1),
                (h * A73, &k3),
                (h * A74, &k4),
                (h * A75, &k5),
                (h * A76, &k6),
            ],
        );
        let k7 = sys.eval(t + h, &y_new);

        let err = {
            let (v1, v3, v4) = (sys.values(&k1), sys.values(&k3), sys.values(&k4));
            let (v5, v6, v7) = (sys.values(&k5), sys.values(&k6), sys.values(&k7));
            let (vy, vn) = (sys.values(&y), sys.values(&y_new));
            let n = vy.len();
            let mut acc = 0.0;
            for i in 0..n {
                let e = h * (E1 * v1[i] + E3 * v3[i] + E4 * v4[i] + E5 * v5[i] + E6 * v6[i] + E7 * v7[i]);
                let sc = cfg.abs_tol + cfg.rel_tol * vy[i].abs().max(vn[i].abs());
                acc += (e / sc) * (e / sc);
            }
            if n == 0 { 0.0 } else { (acc / n as f64).sqrt() }
        };
        if err.is_nan() {
            check_finite(sys, &y_new, t + h)?;
            return Err(Error::NumericFault {
                node: sys.node_id(&y_new),
                what: format!("NaN error estimate at t = {t}"),
            });
        }
        let mut factor = if err == 0.0 {
            FAC_MAX
        } else {
            (SAFETY * err.powf(-0.2)).clamp(FAC_MIN, FAC_MAX)
        };
        if err <= 1.0 {
            check_finite(sys, &y_new, t + h)?;
            t = if last { t1 } else { t + h };
            y = y_new;
            k1 = k7;
            if last_rejected {
                factor = factor.min(1.0);
            }
            last_rejected = false;
            dt = h * factor;
        } else {
            last_rejected = true;
            dt = h * factor.min(1.0);
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn rotation(_t: f64, h: &Tensor) -> Tensor {
        let d = h.data();
        Tensor::row(vec![d[1], -d[0]])
    }

    #[test]
    fn exponential_decay() {
        for cfg in [OdeSolverConfig::evaluation(), OdeSolverConfig::rk4(1e-2)] {
            let y = integrate_ode(|_, h| h.scale(-1.0), &Tensor::scalar(1.0), 0.0, 1.0, &cfg).unwrap();
            assert!((y.item() - (-1.0f64).exp()).abs() < 1e-6, "{cfg:?} -> {y:?}");
        }
    }

    #[test]
    fn rotation_quarter_turn() {
        let y = integrate_ode(rotation, &Tensor::row(vec![1.0, 0.0]), 0.0, FRAC_PI_2, &OdeSolverConfig::evaluation()).unwrap();
        assert!(y.data()[0].abs() < 1e-6);
        assert!((y.data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_length_interval_is_identity() {
        let h = Tensor::row(vec![0.3, -0.2]);
        let y = integrate_ode(rotation, &h, 2.0, 2.0, &OdeSolverConfig::default()).unwrap();
        assert_eq!(y, h);
    }

    #[test]
    fn step_budget_exhaustion_is_divergence() {
        let cfg = OdeSolverConfig {
            max_steps: 3,
            ..OdeSolverConfig::evaluation()
        };
        let r = integrate_ode(rotation, &Tensor::row(vec![1.0, 0.0]), 0.0, 100.0, &cfg);
        assert!(matches!(r, Err(Error::Divergence { .. })));
    }

    #[test]
    fn nan_state_is_numeric_fault() {
        let r = integrate_ode(
            |_, h| h.map(|_| f64::NAN),
            &Tensor::scalar(1.0),
            0.0,
            1.0,
            &OdeSolverConfig::rk4(0.1),
        );
        assert!(matches!(r, Err(Error::NumericFault { .. })));
    }

    #[test]
    fn graph_backend_matches_plain_and_differentiates() {
        let cfg = OdeSolverConfig::evaluation();
        let mut g = Graph::new();
        let a = g.scalar(-0.7);
        let h0 = g.scalar(2.0);
        let y = integrate_ode_graph(&mut g, |g, _, h| g.mul(h, a), h0, 0.0, 1.5, &cfg).unwrap();
        let plain = integrate_ode(|_, h| h.scale(-0.7), &Tensor::scalar(2.0), 0.0, 1.5, &cfg).unwrap();
        assert_eq!(g.item(y), plain.item());
        let grads = g.grad(y, &[a, h0]).unwrap();
        // y = h0 e^{a t}: dy/da = t y, dy/dh0 = e^{a t}
        let exact = 2.0 * (-0.7f64 * 1.5).exp();
        assert!((grads[0].item() - 1.5 * exact).abs() < 1e-5);
        assert!((grads[1].item() - exact / 2.0).abs() < 1e-5);
    }

    #[test]
    fn reversed_interval_rejected() {
        let r = integrate_ode(rotation, &Tensor::row(vec![1.0, 0.0]), 1.0, 0.0, &OdeSolverConfig::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
