use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::njode::{sample_poisson, LatentState, NjodeModel};
use crate::par::{self, ExecMode};
use crate::rng;

/// Expected discounted cumulative count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub value: f64,
    /// Monte-Carlo standard error; zero for mean-field estimates.
    pub stderr: f64,
    pub rollouts: usize,
    pub gamma: f64,
}

/// A bin-stepped jump process: both estimators drive it the same way and
/// differ only in what they feed to [`JumpProcess::jump`].
pub trait JumpProcess: Sync {
    type State: Clone + Send;

    /// Flow through one bin; returns the pre-jump state and intensities.
    fn advance(&self, s: &Self::State) -> Result<(Self::State, Vec<f64>)>;

    fn jump(&self, pre: &Self::State, x: &[f64]) -> Result<Self::State>;
}

/// NJODE model with a fixed effective influence matrix.
pub struct NjodeProcess<'m> {
    pub model: &'m NjodeModel,
    pub weff: Tensor,
}

impl<'m> NjodeProcess<'m> {
    pub fn new(model: &'m NjodeModel, weff: Option<Tensor>) -> Self {
        NjodeProcess {
            weff: weff.unwrap_or_else(|| model.influence()),
            model,
        }
    }
}

impl JumpProcess for NjodeProcess<'_> {
    type State = LatentState;

    fn advance(&self, s: &LatentState) -> Result<(LatentState, Vec<f64>)> {
        let mut g = Graph::new();
        let b = self.model.bind(&mut g);
        let h = g.constant(s.h.clone());
        let width = self.model.bin_width();
        let hm = b.flow(&mut g, h, s.tau, width)?;
        let lam = b.intensity(&mut g, hm);
        Ok((
            LatentState::new(g.value(hm).clone(), s.tau + width),
            g.value(lam).data().to_vec(),
        ))
    }

    fn jump(&self, pre: &LatentState, x: &[f64]) -> Result<LatentState> {
        crate::njode::jump_update(self.model, pre, x, &self.weff)
    }
}

/// Cumulative discounted cost of one rollout after each step.
///
/// The cost accumulates the conditional intensity `E[x | history]` rather
/// than the sampled count: same expectation, less variance, and exactly the
/// mean-field value whenever counts do not feed back into the latent.
fn run<P: JumpProcess>(p: &P, s0: &P::State, steps: usize, gamma: f64, mut rng: Option<rng::Rng>) -> Result<Vec<f64>> {
    let mut s = s0.clone();
    let mut out = Vec::with_capacity(steps);
    let (mut acc, mut w) = (0.0, 1.0);
    for _ in 0..steps {
        let (pre, lam) = p.advance(&s)?;
        acc += w * lam.iter().sum::<f64>();
        let x: Vec<f64> = match rng.as_mut() {
            Some(r) => lam.iter().map(|&l| sample_poisson(l, r) as f64).collect(),
            None => lam,
        };
        w *= gamma;
        out.push(acc);
        s = p.jump(&pre, &x)?;
    }
    Ok(out)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::contract(format!("discount {gamma} outside [0, 1]")));
    }
    Ok(())
}

/// Monte-Carlo estimate of `J(i)` for every `i < steps`.
///
/// Rollout `k` draws from `rng::stream(seed, k)` and the reduction runs in
/// index order, so the result is identical in both execution modes.
pub fn monte_carlo_curve<P: JumpProcess>(
    p: &P,
    s0: &P::State,
    steps: usize,
    gamma: f64,
    rollouts: usize,
    seed: u64,
    exec: ExecMode,
) -> Result<Vec<CostEstimate>>
where
    P::State: Sync,
{
    check_gamma(gamma)?;
    if rollouts == 0 {
        return Err(Error::contract("at least one rollout is required"));
    }
    let runs = par::try_map_indexed(rollouts, exec, |k| run(p, s0, steps, gamma, Some(rng::stream(seed, k as u64))))?;
    let r = rollouts as f64;
    Ok((0..steps)
        .map(|i| {
            let mean = runs.iter().map(|c| c[i]).sum::<f64>() / r;
            let var = if rollouts > 1 {
                runs.iter().map(|c| (c[i] - mean).powi(2)).sum::<f64>() / (r - 1.0)
            } else {
                0.0
            };
            CostEstimate {
                value: mean,
                stderr: (var / r).sqrt(),
                rollouts,
                gamma,
            }
        })
        .collect())
}

/// `J(t) = sum_{i=0}^{t} gamma^i sum_n E[x_n^i]` by Monte Carlo.
pub fn monte_carlo_cost<P: JumpProcess>(
    p: &P,
    s0: &P::State,
    t: usize,
    gamma: f64,
    rollouts: usize,
    seed: u64,
    exec: ExecMode,
) -> Result<CostEstimate>
where
    P::State: Sync,
{
    let curve = monte_carlo_curve(p, s0, t + 1, gamma, rollouts, seed, exec)?;
    Ok(*curve.last().expect("t + 1 >= 1 steps"))
}

/// Mean-field `J_hat(i)` for every `i < steps`, from one deterministic rollout.
pub fn mean_field_curve<P: JumpProcess>(p: &P, s0: &P::State, steps: usize, gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    run(p, s0, steps, gamma, None)
}

/// `J_hat(t) = sum_{i=0}^{t} gamma^i sum_n lambda_hat_n^i`.
pub fn mean_field_cost<P: JumpProcess>(p: &P, s0: &P::State, t: usize, gamma: f64) -> Result<CostEstimate> {
    let curve = mean_field_curve(p, s0, t + 1, gamma)?;
    Ok(CostEstimate {
        value: *curve.last().expect("nonempty"),
        stderr: 0.0,
        rollouts: 1,
        gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::njode::NjodeConfig;

    fn decoupled(mu: f64) -> NjodeModel {
        let mut m = NjodeModel::init(NjodeConfig::new(3, 2), None, 5).unwrap();
        *m.param_mut("intensity.w2").unwrap() = Tensor::zeros(m.cfg.intensity_hidden, 1);
        *m.param_mut("intensity.base").unwrap() = Tensor::filled(3, 1, mu.ln());
        m
    }

    #[test]
    fn homogeneous_mean_field_is_exact() {
        let m = decoupled(0.7);
        let p = NjodeProcess::new(&m, Some(Tensor::zeros(3, 3)));
        let c = mean_field_cost(&p, &m.initial_state(), 9, 1.0).unwrap();
        assert!((c.value - 3.0 * 0.7 * 10.0).abs() < 1e-12);
        assert_eq!(c.stderr, 0.0);
    }

    #[test]
    fn monte_carlo_within_three_stderr_of_exact_mean() {
        // Self-exciting decoupled chain: dh/dt = 0, h+ = w h + x, lambda = softplus(h).
        // Oracle: exact expectation by enumerating Poisson counts to high order.
        use crate::meanfield::LinearJumpSystem;
        let s = LinearJumpSystem::new(
            Tensor::zeros(1, 1),
            vec![0.0],
            0.0,
            0.3,
            Tensor::from_rows(&[vec![1.0]]),
            vec![1.0],
            -0.5,
            None,
            1.0,
            Tensor::zeros(1, 1),
        )
        .unwrap();
        let sp = |z: f64| (1.0 + z.exp()).ln();
        let pois = |l: f64, k: u32| (-l).exp() * l.powi(k as i32) / (1..=k).map(f64::from).product::<f64>();
        let l0 = sp(-0.5);
        let exact: f64 = l0 + (0..40).map(|k| pois(l0, k) * sp(0.3 * k as f64 - 0.5)).sum::<f64>();
        let c = monte_carlo_cost(&s, &vec![0.0], 1, 1.0, 4000, 1, ExecMode::Parallel).unwrap();
        assert!(c.stderr > 0.0);
        assert!((c.value - exact).abs() <= 3.0 * c.stderr, "{c:?} vs {exact}");
    }

    #[test]
    fn gamma_zero_collapses_to_first_bin() {
        let m = decoupled(1.3);
        let p = NjodeProcess::new(&m, None);
        let c = mean_field_cost(&p, &m.initial_state(), 6, 0.0).unwrap();
        assert!((c.value - 3.0 * 1.3).abs() < 1e-12);
    }

    #[test]
    fn exec_modes_agree_bitwise() {
        let m = decoupled(0.5);
        let p = NjodeProcess::new(&m, None);
        let s = m.initial_state();
        let a = monte_carlo_curve(&p, &s, 3, 0.9, 50, 8, ExecMode::Sequential).unwrap();
        let b = monte_carlo_curve(&p, &s, 3, 0.9, 50, 8, ExecMode::Parallel).unwrap();
        assert_eq!(a, b);
    }
}
