use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::diffcore::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::par::{self, ExecMode};
use crate::pointproc::SpikeCountMatrix;

use super::model::{Bound, LatentState, NjodeModel, P_BASE};
use super::rollout::bin_step;

/// Poisson log-likelihood `sum_n -lambda_n + x_n ln lambda_n - ln x_n!`.
pub fn emission_loglik(lambda: &[f64], x: &[u64]) -> f64 {
    lambda
        .iter()
        .zip(x)
        .map(|(&l, &c)| {
            let c = c as f64;
            -l + c * l.ln() - ln_gamma(c + 1.0)
        })
        .sum()
}

fn log_factorial_sum(counts: &SpikeCountMatrix) -> f64 {
    counts.counts.iter().map(|&c| ln_gamma(c as f64 + 1.0)).sum()
}

/// One observed sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FitData {
    pub counts: SpikeCountMatrix,
    /// Starting latent state; `None` starts from the model's `h0` at `tau = 0`.
    pub start: Option<LatentState>,
    /// Per-bin interventions (`m -> n` convention) in force while the data
    /// was generated.
    pub cuts: Option<Vec<Tensor>>,
}

impl FitData {
    pub fn new(counts: SpikeCountMatrix) -> Self {
        FitData { counts, start: None, cuts: None }
    }
}

fn check_data(model: &NjodeModel, d: &FitData) -> Result<()> {
    let n = model.n_nodes();
    if d.counts.n_nodes != n {
        return Err(Error::contract(format!("data has {} nodes, model has {n}", d.counts.n_nodes)));
    }
    if let Some(c) = &d.cuts {
        if c.len() != d.counts.n_bins || c.iter().any(|t| t.dims2() != (n, n)) {
            return Err(Error::contract("cuts must be one N x N matrix per bin"));
        }
    }
    Ok(())
}

/// Log-likelihood of `data` on `g`, rolling flow, intensity, emission, jump
/// per bin. Also returns each bin's intensity node.
pub fn sequence_loglik_graph(b: &Bound<'_>, g: &mut Graph, data: &FitData) -> Result<(Var, Vec<Var>)> {
    check_data(b.model, data)?;
    let (mut h, tau0) = match &data.start {
        Some(s) => (g.constant(s.h.clone()), s.tau),
        None => (b.h0(), 0.0),
    };
    let width = b.model.cfg.bin_width;
    let base = b.weff(g, None);
    let mut terms = Vec::with_capacity(data.counts.n_bins);
    let mut lams = Vec::with_capacity(data.counts.n_bins);
    for i in 0..data.counts.n_bins {
        let weff = match &data.cuts {
            Some(c) => {
                let cv = g.constant(c[i].clone());
                b.weff(g, Some(cv))
            }
            None => base,
        };
        let x = g.constant(data.counts.bin_column(i));
        let (lam, hn) = bin_step(b, g, h, tau0 + i as f64 * width, weff, Some(x))?;
        let loglam = g.log(lam);
        let xl = g.mul(x, loglam);
        let t = g.sub(xl, lam);
        terms.push(g.sum(t));
        lams.push(lam);
        h = hn;
    }
    let mut acc = match terms.first() {
        Some(&t) => t,
        None => g.scalar(0.0),
    };
    for &t in terms.iter().skip(1) {
        acc = g.add(acc, t);
    }
    let total = g.add_const(acc, -log_factorial_sum(&data.counts));
    Ok((total, lams))
}

/// Total log-likelihood of one sequence and the per-bin intensities used.
pub fn sequence_loglik_trace(model: &NjodeModel, data: &FitData) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let (ll, lams) = sequence_loglik_graph(&b, &mut g, data)?;
    let lv = lams.iter().map(|&l| g.value(l).data().to_vec()).collect();
    Ok((g.item(ll), lv))
}

pub fn sequence_loglik(model: &NjodeModel, data: &FitData) -> Result<f64> {
    sequence_loglik_trace(model, data).map(|(ll, _)| ll)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub clip_norm: Option<f64>,
    /// Set `b_n = ln(mean count of node n)` before the first step.
    pub warm_start_baseline: bool,
    /// Recorded in the run manifest. Fitting is full-batch and therefore
    /// deterministic; the seed does not influence it.
    pub seed: u64,
    #[serde(skip)]
    pub exec: ExecMode,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 100,
            lr: 1e-3,
            lr_decay: 0.0,
            clip_norm: Some(10.0),
            warm_start_baseline: true,
            seed: 0,
            exec: ExecMode::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters with the lowest training NLL seen.
    pub model: NjodeModel,
    /// Training NLL of every evaluated parameter set; entry 0 is the start.
    pub losses: Vec<f64>,
    pub best_epoch: usize,
    /// Diagnostic when training stopped early on a non-finite loss.
    pub aborted: Option<String>,
}

impl FitResult {
    pub fn final_nll(&self) -> f64 {
        self.losses[self.best_epoch]
    }
}

/// Negative log-likelihood over all sequences and its gradient.
pub fn nll_and_grad(model: &NjodeModel, data: &[FitData], exec: ExecMode) -> Result<(f64, Vec<Tensor>)> {
    let parts = par::try_map_indexed(data.len(), exec, |k| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let b = model.bind(&mut g);
        let (ll, _) = sequence_loglik_graph(&b, &mut g, &data[k])?;
        let nll = g.scale(ll, -1.0);
        let grads = g.grad(nll, &b.vars)?;
        Ok((g.item(nll), grads))
    })?;
    let mut total = 0.0;
    let mut grads: Vec<Tensor> = model.params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
    for (v, gs) in parts {
        total += v;
        for (acc, g) in grads.iter_mut().zip(&gs) {
            for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += x;
            }
        }
    }
    Ok((total, grads))
}

/// Maximum-likelihood fit by Adam on the mean per-entry NLL.
///
/// A non-finite loss or gradient stops training; the best parameters seen so
/// far are returned together with the diagnostic.
pub fn fit_mle(model: &NjodeModel, data: &[FitData], cfg: &FitConfig) -> Result<FitResult> {
    if data.is_empty() || data.iter().all(|d| d.counts.n_bins == 0) {
        return Err(Error::contract("fit_mle needs at least one nonempty sequence"));
    }
    for d in data {
        check_data(model, d)?;
    }
    let mut cur = model.clone();
    if cfg.warm_start_baseline {
        let n = cur.n_nodes();
        let mut sums = vec![0.0; n];
        let mut bins = 0usize;
        for d in data {
            for (i, s) in sums.iter_mut().enumerate() {
                *s += (0..d.counts.n_bins).map(|t| d.counts.get(i, t) as f64).sum::<f64>();
            }
            bins += d.counts.n_bins;
        }
        cur.params[P_BASE] = Tensor::column(sums.iter().map(|s| (s / bins as f64).max(1e-3).ln()).collect());
    }
    let entries: f64 = data.iter().map(|d| (d.counts.n_bins * d.counts.n_nodes) as f64).sum();
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            decay: cfg.lr_decay,
            clip_norm: cfg.clip_norm,
            ..AdamConfig::default()
        },
        &cur.params,
    );
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    let mut best = cur.clone();
    let mut best_epoch = 0;
    let mut aborted = None;
    for epoch in 0..=cfg.epochs {
        let (nll, grads) = match nll_and_grad(&cur, data, cfg.exec) {
            Ok(v) if v.0.is_finite() => v,
            Ok((v, _)) => {
                aborted = Some(format!("non-finite NLL {v} at epoch {epoch}"));
                break;
            }
            Err(e @ Error::NumericFault { .. }) => {
                aborted = Some(format!("epoch {epoch}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        losses.push(nll);
        if nll < losses[best_epoch] || epoch == 0 {
            best = cur.clone();
            best_epoch = epoch;
        }
        if epoch == cfg.epochs {
            break;
        }
        if grads.iter().any(|g| !g.is_finite()) {
            aborted = Some(format!("non-finite gradient at epoch {epoch}"));
            break;
        }
        let scaled: Vec<Tensor> = grads.iter().map(|g| g.scale(1.0 / entries)).collect();
        opt.step(&mut cur.params, &scaled);
    }
    if let Some(msg) = &aborted {
        log::warn!("fit_mle aborted: {msg}; keeping best parameters from epoch {best_epoch}");
    }
    if losses.is_empty() {
        return Err(Error::Training(aborted.unwrap_or_default()));
    }
    Ok(FitResult { model: best, losses, best_epoch, aborted })
}

/// Homogeneous Poisson baseline: per-node mean count per bin.
pub fn fit_poisson_baseline(data: &[FitData]) -> Vec<f64> {
    let n = data.first().map_or(0, |d| d.counts.n_nodes);
    let mut sums = vec![0.0; n];
    let mut bins = 0usize;
    for d in data {
        for (i, s) in sums.iter_mut().enumerate() {
            *s += (0..d.counts.n_bins).map(|t| d.counts.get(i, t) as f64).sum::<f64>();
        }
        bins += d.counts.n_bins;
    }
    sums.iter().map(|s| s / bins.max(1) as f64).collect()
}

/// NLL of `data` under constant per-node rates.
pub fn poisson_baseline_nll(rates: &[f64], data: &[FitData]) -> f64 {
    let mut nll = 0.0;
    for d in data {
        for t in 0..d.counts.n_bins {
            nll -= emission_loglik(rates, &d.counts.bin(t));
        }
    }
    nll
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::njode::{sample_rollout, NjodeConfig};

    #[test]
    fn emission_values() {
        assert!((emission_loglik(&[1.0], &[0]) + 1.0).abs() < 1e-14);
        let v = emission_loglik(&[2.0], &[3]);
        assert!((v - (-2.0 + 3.0 * 2f64.ln() - 6f64.ln())).abs() < 1e-12);
        assert!((v + 1.71231).abs() < 1e-5);
    }

    fn data_from(model: &NjodeModel, steps: usize, seed: u64) -> FitData {
        let tr = sample_rollout(model, &model.initial_state(), steps, None, seed).unwrap();
        FitData::new(SpikeCountMatrix::from_bins(tr.counts.as_ref().unwrap(), model.bin_width()).unwrap())
    }

    #[test]
    fn loglik_decomposes_into_emissions() {
        let m = NjodeModel::init(NjodeConfig::new(3, 2), None, 2).unwrap();
        let d = data_from(&m, 6, 1);
        let (ll, lams) = sequence_loglik_trace(&m, &d).unwrap();
        let recount: f64 = (0..6).map(|i| emission_loglik(&lams[i], &d.counts.bin(i))).sum();
        assert!((ll - recount).abs() < 1e-10);
        assert_eq!(ll, sequence_loglik(&m, &d).unwrap());
    }

    #[test]
    fn constant_rate_fit_matches_empirical_mean() {
        let mut cfg = NjodeConfig::new(2, 2);
        cfg.solver = crate::diffcore::OdeSolverConfig::rk4(0.5);
        let m = NjodeModel::init(cfg, None, 3).unwrap();
        let mut counts = SpikeCountMatrix::zeros(2, 40, 1.0);
        for t in 0..40 {
            counts.set(0, t, 2 + (t % 3) as u64);
            counts.set(1, t, (t % 2) as u64);
        }
        let fc = FitConfig { epochs: 150, lr: 0.03, ..FitConfig::default() };
        let r = fit_mle(&m, &[FitData::new(counts.clone())], &fc).unwrap();
        assert!(r.final_nll() <= r.losses[0]);
        let (_, lams) = sequence_loglik_trace(&r.model, &FitData::new(counts.clone())).unwrap();
        let means = counts.mean_rate_per_bin();
        for n in 0..2 {
            let avg: f64 = lams.iter().map(|l| l[n]).sum::<f64>() / 40.0;
            assert!((avg - means[n]).abs() <= 0.05 * means[n], "node {n}: {avg} vs {}", means[n]);
        }
    }

    #[test]
    fn empty_data_rejected() {
        let m = NjodeModel::init(NjodeConfig::new(2, 2), None, 3).unwrap();
        assert!(fit_mle(&m, &[], &FitConfig::default()).is_err());
    }
}
