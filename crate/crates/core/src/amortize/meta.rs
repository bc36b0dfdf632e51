use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::njode::{bin_step, fit_mle, mean_field_rollout, sample_rollout, FitConfig, FitData, LatentState, NjodeModel};
use crate::planner::{
    admissible, filter_state, intervene, project_topk, relax, relax_values, soft_penalty_graph, ActionMatrix, ConsecutiveTracker,
    ConstraintSpec, Relaxation,
};
use crate::pointproc::SpikeCountMatrix;
use crate::rng;

use super::bcme::{contrastive_sample, sample_loss, sample_loss_graph, ContrastiveSample};
use super::nets::{PolicyNet, ReprNet};
use super::pem::{PemConfig, PolicyEnv};
use super::perm::{augment_magnitude, augment_permutation, permute_constraints, permute_rows};

/// One control problem in the pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub name: String,
    pub model: NjodeModel,
    pub constraints: ConstraintSpec,
    /// Empirical initial-state distribution, sampled uniformly.
    pub starts: Vec<LatentState>,
    pub region: Option<String>,
    pub split: Option<String>,
}

impl Task {
    /// Starts are the filtered latent states after every `every` bins of
    /// `history` (the model's `h0` included).
    pub fn from_history(
        name: impl Into<String>,
        model: NjodeModel,
        constraints: ConstraintSpec,
        history: &SpikeCountMatrix,
        every: usize,
    ) -> Result<Self> {
        if every == 0 {
            return Err(Error::contract("start spacing must be positive"));
        }
        let mut starts = vec![model.initial_state()];
        let mut s = model.initial_state();
        let mut from = 0;
        while from + every <= history.n_bins {
            let bins: Vec<Vec<u64>> = (from..from + every).map(|i| history.bin(i)).collect();
            s = filter_state(&model, &s, &SpikeCountMatrix::from_bins(&bins, history.bin_width)?, None)?;
            starts.push(s.clone());
            from += every;
        }
        Ok(Task {
            name: name.into(),
            model,
            constraints,
            starts,
            region: None,
            split: None,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.model.n_nodes()
    }

    pub fn env<'a>(&'a self, policy: &'a PolicyNet, relaxation: Relaxation) -> PolicyEnv<'a> {
        PolicyEnv {
            policy,
            model: &self.model,
            cs: &self.constraints,
            relaxation,
        }
    }

    /// The same task with nodes relabeled: new node `i` is old `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Task> {
        Ok(Task {
            name: format!("{}-perm", self.name),
            model: self.model.permute_nodes(perm)?,
            constraints: permute_constraints(&self.constraints, perm),
            starts: self.starts.iter().map(|s| LatentState::new(permute_rows(&s.h, perm), s.tau)).collect(),
            ..self.clone()
        })
    }

    /// Start states with every node row rescaled by a `LogUniform[0.5, 2]` factor.
    pub fn rescaled(&self, seed: u64) -> Task {
        Task {
            name: format!("{}-mag", self.name),
            starts: self
                .starts
                .iter()
                .enumerate()
                .map(|(i, s)| LatentState::new(augment_magnitude(&s.h, rng::derive(seed, i as u64)).0, s.tau))
                .collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.constraints.validate()?;
        let n = self.n_nodes();
        if self.constraints.n_nodes() != n {
            return Err(Error::contract(format!("task {}: constraints disagree on N", self.name)));
        }
        if self.starts.is_empty() || self.starts.iter().any(|s| s.h.dims2() != (n, self.model.latent_dim()) || !s.is_finite()) {
            return Err(Error::contract(format!("task {}: bad start states", self.name)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskPool {
    pub tasks: Vec<Task>,
}

impl TaskPool {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::contract("task pool is empty"));
        }
        let d = self.tasks[0].model.latent_dim();
        for t in &self.tasks {
            t.validate()?;
            if t.model.latent_dim() != d {
                return Err(Error::contract("every task must share the latent width"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub iters: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub relaxation: Relaxation,
    pub policy_lr: f64,
    pub repr_lr: f64,
    pub dynamics_lr: f64,
    /// Weight of the contrastive loss in the joint step.
    pub bcme_weight: f64,
    /// Temperature of the PEM weights `exp(-d / beta)`.
    pub beta: f64,
    pub n_negatives: usize,
    pub pem: PemConfig,
    /// Bins simulated under the chosen intervention before each refit.
    pub collect_bins: usize,
    /// Refit epochs per iteration; 0 disables the model update.
    pub refit_epochs: usize,
    pub policy_hidden: usize,
    pub policy_embed: usize,
    pub repr_hidden: usize,
    pub p_dim: usize,
    pub m_dim: usize,
    /// Bins in the hard-action evaluation rollout.
    pub eval_horizon: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            iters: 200,
            horizon: 5,
            gamma: 0.95,
            relaxation: Relaxation::TopK,
            policy_lr: 1e-4,
            repr_lr: 1e-4,
            dynamics_lr: 1e-3,
            bcme_weight: 1.0,
            beta: 1.0,
            n_negatives: 2,
            pem: PemConfig::default(),
            collect_bins: 10,
            refit_epochs: 1,
            policy_hidden: 16,
            policy_embed: 8,
            repr_hidden: 16,
            p_dim: 4,
            m_dim: 4,
            eval_horizon: 10,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.eval_horizon == 0 || !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::contract("horizons must be positive and gamma in [0, 1)"));
        }
        if !(self.policy_lr > 0.0 && self.repr_lr > 0.0 && self.dynamics_lr > 0.0 && self.beta > 0.0) {
            return Err(Error::contract("learning rates and beta must be positive"));
        }
        if self.bcme_weight > 0.0 && self.n_negatives == 0 {
            return Err(Error::contract("the contrastive term needs at least one negative"));
        }
        self.pem.validate()
    }

    pub fn init_policy(&self, latent_dim: usize, seed: u64) -> PolicyNet {
        PolicyNet::init(latent_dim, self.policy_hidden, self.policy_embed, seed)
    }

    pub fn init_repr(&self, latent_dim: usize, seed: u64) -> ReprNet {
        ReprNet::init(latent_dim, self.repr_hidden, self.p_dim, self.m_dim, seed)
    }
}

/// Lookahead objective with the policy closing the loop inside the
/// horizon: `p^h = relax(pi(h^{i+h}))`. Larger is better.
#[allow(clippy::too_many_arguments)]
fn policy_lookahead_graph(
    policy: &PolicyNet,
    pvars: &[Var],
    g: &mut Graph,
    task: &Task,
    start: &LatentState,
    horizon: usize,
    gamma: f64,
    relaxation: Relaxation,
) -> Result<Var> {
    let n = task.n_nodes();
    let cs = &task.constraints;
    let adm = admissible(&task.model.adjacency, cs, None);
    let b = task.model.bind(g);
    let mut h = g.constant(start.h.clone());
    let mut prev = g.constant(Tensor::zeros(n, n));
    let mut acc: Option<Var> = None;
    let mut w = 1.0;
    let width = task.model.bin_width();
    for i in 0..horizon {
        let logits = policy.forward_graph(g, pvars, h);
        let p = relax(g, logits, &adm, cs.k, relaxation);
        let weff = b.weff(g, Some(p));
        let (lam, hn) = bin_step(&b, g, h, start.tau + i as f64 * width, weff, None)?;
        let mut cost = g.sum(lam);
        if let Some(pen) = soft_penalty_graph(g, p, prev, cs) {
            cost = g.add(cost, pen);
        }
        let term = g.scale(cost, -w);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
        w *= gamma;
        prev = p;
        h = hn;
    }
    acc.ok_or_else(|| Error::contract("horizon must be at least 1"))
}

/// Mean lookahead objective over the task's starts and its policy gradient.
fn policy_objective_and_grad(policy: &PolicyNet, task: &Task, cfg: &MetaConfig) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let pv = policy.bind(&mut g);
    let mut total: Option<Var> = None;
    for s in &task.starts {
        let o = policy_lookahead_graph(policy, &pv, &mut g, task, s, cfg.horizon, cfg.gamma, cfg.relaxation)?;
        total = Some(match total {
            Some(t) => g.add(t, o),
            None => o,
        });
    }
    let mean = g.scale(total.expect("starts checked"), 1.0 / task.starts.len() as f64);
    let grads = g.grad(mean, &pv)?;
    Ok((g.item(mean), grads))
}

/// Hard action the policy takes at `h`.
pub fn policy_action(policy: &PolicyNet, task: &Task, h: &Tensor, relaxation: Relaxation, forbidden: Option<&[Vec<bool>]>) -> Result<ActionMatrix> {
    let adm = admissible(&task.model.adjacency, &task.constraints, forbidden);
    let p = relax_values(&policy.forward(h)?, &adm, task.constraints.k, relaxation);
    Ok(project_topk(&p, &task.constraints, &adm))
}

/// Expected events per node per unit time, summed over a deterministic
/// mean-field rollout of `bins` bins and averaged over the task's starts.
/// With `policy = None` no edge is cut.
pub fn policy_cost(policy: Option<&PolicyNet>, task: &Task, bins: usize, relaxation: Relaxation) -> Result<f64> {
    let n = task.n_nodes();
    let width = task.model.bin_width();
    let w = task.model.influence();
    let mut total = 0.0;
    for s0 in &task.starts {
        let mut s = s0.clone();
        let mut tracker = ConsecutiveTracker::new(n, task.constraints.max_consecutive);
        for _ in 0..bins {
            let a = match policy {
                Some(p) => policy_action(p, task, &s.h, relaxation, Some(&tracker.mask()))?,
                None => ActionMatrix::empty(n),
            };
            let tr = mean_field_rollout(&task.model, &s, 1, Some(&intervene(&w, &a.to_tensor())))?;
            total += tr.intensities[0].iter().sum::<f64>() / (n as f64 * width);
            tracker.record(&a);
            s = tr.latents[1].clone();
        }
    }
    Ok(total / task.starts.len() as f64)
}

/// One meta-training iteration's record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub iter: usize,
    pub task: usize,
    /// Lookahead objective (larger is better) at the sampled start.
    pub objective: f64,
    pub bcme: f64,
    /// `-objective + bcme_weight * bcme`, the minimized quantity.
    pub loss: f64,
    pub action_edges: Vec<(usize, usize)>,
    /// Training NLL after the refit, when one ran.
    pub refit_nll: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct MetaResult {
    pub policy: PolicyNet,
    pub repr: ReprNet,
    pub pool: TaskPool,
    pub records: Vec<MetaRecord>,
    /// `(iteration, task, message)` for every skipped task iteration.
    pub failures: Vec<(usize, usize, String)>,
}

impl MetaResult {
    /// `iter,task,objective,bcme,loss,action_edges,refit_nll`.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("iter,task,objective,bcme,loss,action_edges,refit_nll\n");
        for r in &self.records {
            let edges = r.action_edges.iter().map(|(m, n)| format!("{m}>{n}")).collect::<Vec<_>>().join(";");
            let nll = r.refit_nll.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.iter, r.task, r.objective, r.bcme, r.loss, edges, nll);
        }
        s
    }
}

fn meta_iteration(
    policy: &mut PolicyNet,
    repr: &mut ReprNet,
    opt_p: &mut Adam,
    opt_r: &mut Adam,
    task: &mut Task,
    cfg: &MetaConfig,
    seed: u64,
) -> Result<(f64, f64, ActionMatrix, Option<f64>)> {
    let mut r = rng::seeded(seed);
    let start = task.starts[r.random_range(0..task.starts.len())].clone();

    let sample = if cfg.bcme_weight > 0.0 {
        let env = task.env(policy, cfg.relaxation);
        Some(contrastive_sample(&start, &env, &cfg.pem, cfg.beta, cfg.n_negatives, rng::derive(seed, 1))?)
    } else {
        None
    };

    let mut g = Graph::new();
    let pv = policy.bind(&mut g);
    let rv = repr.bind(&mut g);
    let obj = policy_lookahead_graph(policy, &pv, &mut g, task, &start, cfg.horizon, cfg.gamma, cfg.relaxation)?;
    let mut loss = g.neg(obj);
    let mut bcme = None;
    if let Some(s) = &sample {
        let b = sample_loss_graph(repr, &mut g, &rv, s);
        bcme = Some(b);
        let wb = g.scale(b, cfg.bcme_weight);
        loss = g.add(loss, wb);
    }
    let mut wrt = pv.clone();
    wrt.extend_from_slice(&rv);
    let grads = g.grad(loss, &wrt)?;
    if grads.iter().any(|t| !t.is_finite()) {
        return Err(Error::NumericFault {
            node: loss.id(),
            what: "non-finite meta gradient".into(),
        });
    }
    let (gp, gr) = grads.split_at(pv.len());
    let objective = g.item(obj);
    let bcme_v = bcme.map(|b| g.item(b)).unwrap_or(0.0);
    opt_p.step(&mut policy.params, gp);
    if sample.is_some() {
        opt_r.step(&mut repr.params, gr);
    }

    let action = policy_action(policy, task, &start.h, cfg.relaxation, None)?;
    let mut refit_nll = None;
    if cfg.refit_epochs > 0 && cfg.collect_bins > 0 {
        let cut = action.to_tensor();
        let weff = intervene(&task.model.influence(), &cut);
        let tr = sample_rollout(&task.model, &start, cfg.collect_bins, Some(&weff), rng::derive(seed, 2))?;
        let counts = tr.counts.expect("stochastic rollout records counts");
        let data = FitData {
            counts: SpikeCountMatrix::from_bins(&counts, task.model.bin_width())?,
            start: Some(start),
            cuts: Some(vec![cut; cfg.collect_bins]),
        };
        let fc = FitConfig {
            epochs: cfg.refit_epochs,
            lr: cfg.dynamics_lr,
            warm_start_baseline: false,
            ..FitConfig::default()
        };
        let fit = fit_mle(&task.model, std::slice::from_ref(&data), &fc)?;
        refit_nll = Some(fit.final_nll());
        task.model = fit.model;
    }
    Ok((objective, bcme_v, action, refit_nll))
}

/// Joint policy/representation training across the pool with per-task
/// model updates.
///
/// Each iteration samples a task and a start state, takes one joint step on
/// `-lookahead + bcme_weight * bcme`, executes the policy's hard action on
/// the task's own model to collect `collect_bins` bins, and refits that
/// model on them. A failing task iteration is logged and skipped; the run
/// aborts once more than half of the tasks have failed.
pub fn meta_train(pool: &TaskPool, cfg: &MetaConfig, seed: u64) -> Result<MetaResult> {
    pool.validate()?;
    cfg.validate()?;
    let d = pool.tasks[0].model.latent_dim();
    let mut policy = cfg.init_policy(d, rng::derive(seed, 10));
    let mut repr = cfg.init_repr(d, rng::derive(seed, 11));
    let mut opt_p = Adam::new(AdamConfig::with_lr(cfg.policy_lr), &policy.params);
    let mut opt_r = Adam::new(AdamConfig::with_lr(cfg.repr_lr), &repr.params);
    let mut pool = pool.clone();
    let mut failed = vec![false; pool.tasks.len()];
    let mut records = Vec::with_capacity(cfg.iters);
    let mut failures = Vec::new();
    let mut r = rng::seeded(seed);
    for iter in 0..cfg.iters {
        let live: Vec<usize> = (0..pool.tasks.len()).filter(|&j| !failed[j]).collect();
        let j = live[r.random_range(0..live.len())];
        let it_seed = rng::derive(seed, 1000 + iter as u64);
        match meta_iteration(&mut policy, &mut repr, &mut opt_p, &mut opt_r, &mut pool.tasks[j], cfg, it_seed) {
            Ok((objective, bcme, action, refit_nll)) => records.push(MetaRecord {
                iter,
                task: j,
                objective,
                bcme,
                loss: -objective + cfg.bcme_weight * bcme,
                action_edges: action.edges().to_vec(),
                refit_nll,
            }),
            Err(e) => {
                log::warn!("meta-train iteration {iter}: task {} failed: {e}", pool.tasks[j].name);
                failures.push((iter, j, e.to_string()));
                failed[j] = true;
                if 2 * failed.iter().filter(|&&f| f).count() > pool.tasks.len() {
                    return Err(Error::Training(format!("more than half of the tasks failed; last: {e}")));
                }
            }
        }
    }
    Ok(MetaResult {
        policy,
        repr,
        pool,
        records,
        failures,
    })
}

#[derive(Clone, Debug)]
pub struct AdaptResult {
    pub policy: PolicyNet,
    /// [`policy_cost`] before each step and after the last: `n_steps + 1` entries.
    pub costs: Vec<f64>,
    /// Mean lookahead objective at each of the same points.
    pub objectives: Vec<f64>,
}

/// Fine-tune the policy on one task's lookahead objective (Adam at
/// `lr`, averaged over the task's starts). Deterministic.
pub fn adapt(policy: &PolicyNet, task: &Task, n_steps: usize, lr: f64, cfg: &MetaConfig) -> Result<AdaptResult> {
    task.validate()?;
    cfg.validate()?;
    if !(lr > 0.0) {
        return Err(Error::contract("adaptation learning rate must be positive"));
    }
    let mut policy = policy.clone();
    let mut opt = Adam::new(AdamConfig::with_lr(lr), &policy.params);
    let mut costs = Vec::with_capacity(n_steps + 1);
    let mut objectives = Vec::with_capacity(n_steps + 1);
    for step in 0..=n_steps {
        costs.push(policy_cost(Some(&policy), task, cfg.eval_horizon, cfg.relaxation)?);
        let (obj, grads) = policy_objective_and_grad(&policy, task, cfg)?;
        objectives.push(obj);
        if step == n_steps {
            break;
        }
        let neg: Vec<Tensor> = grads.iter().map(|t| t.scale(-1.0)).collect();
        opt.step(&mut policy.params, &neg);
    }
    Ok(AdaptResult { policy, costs, objectives })
}

/// Contrastive loss of the representation on fresh augmentations of every
/// task start, averaged.
pub fn heldout_bcme(repr: &ReprNet, policy: &PolicyNet, pool: &TaskPool, cfg: &MetaConfig, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for (j, t) in pool.tasks.iter().enumerate() {
        for (i, s) in t.starts.iter().enumerate() {
            let sd = rng::derive(seed, (j * 1000 + i) as u64);
            let sample: ContrastiveSample = contrastive_sample(s, &t.env(policy, cfg.relaxation), &cfg.pem, cfg.beta, cfg.n_negatives.max(1), sd)?;
            total += sample_loss(repr, &sample);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Embedding dump `task,aug_type,emb_kind,dim0..dimk` for every task's first
/// start: the anchor, one permuted and one magnitude-perturbed copy, each
/// with its flattened `p` and its `m` embedding. Short rows are padded with
/// empty cells.
pub fn embedding_csv(repr: &ReprNet, pool: &TaskPool, seed: u64) -> Result<String> {
    let mut rows: Vec<(String, &str, &str, Vec<f64>)> = Vec::new();
    for (j, t) in pool.tasks.iter().enumerate() {
        let h = &t.starts[0].h;
        let (hp, _) = augment_permutation(h, rng::derive(seed, 2 * j as u64))?;
        let (hm, _) = augment_magnitude(h, rng::derive(seed, 2 * j as u64 + 1));
        for (aug, x) in [("anchor", h), ("perm", &hp), ("magnitude", &hm)] {
            let e = repr.forward(x)?;
            rows.push((t.name.clone(), aug, "p", e.p.data().to_vec()));
            rows.push((t.name.clone(), aug, "m", e.m.data().to_vec()));
        }
    }
    let width = rows.iter().map(|r| r.3.len()).max().unwrap_or(0);
    let mut s = String::from("task,aug_type,emb_kind");
    for k in 0..width {
        let _ = write!(s, ",dim{k}");
    }
    s.push('\n');
    for (task, aug, kind, v) in rows {
        let _ = write!(s, "{task},{aug},{kind}");
        for k in 0..width {
            match v.get(k) {
                Some(x) => {
                    let _ = write!(s, ",{x}");
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::njode::NjodeConfig;

    fn task(seed: u64) -> Task {
        let n = 4;
        let adj: Vec<Vec<bool>> = (0..n).map(|m| (0..n).map(|k| m != k && !(m + k + seed as usize).is_multiple_of(3)).collect()).collect();
        let mut cfg = NjodeConfig::new(n, 3);
        cfg.bin_width = 1.0;
        let mut m = NjodeModel::init(cfg, Some(adj), seed).unwrap();
        let w = m.param_mut("influence").unwrap();
        *w = w.map(|v| v.abs() + 0.4);
        // Distinct rows: with identical rows every logit ties, and ties
        // break by index, which no relabeling preserves.
        let h = Tensor::matrix(n, 3, (0..3 * n).map(|i| 0.3 + 0.1 * ((i * 7 + seed as usize) % 11) as f64).collect());
        *m.param_mut("h0").unwrap() = h;
        let hist = SpikeCountMatrix::from_bins(&[vec![1, 0, 2, 1], vec![0, 1, 1, 3]], 1.0).unwrap();
        Task::from_history(format!("t{seed}"), m, ConstraintSpec::top_k(n, 2), &hist, 1).unwrap()
    }

    fn small_cfg() -> MetaConfig {
        MetaConfig {
            iters: 6,
            horizon: 3,
            policy_lr: 1e-2,
            repr_lr: 1e-2,
            pem: PemConfig { gamma: 0.5, horizon: 2 },
            collect_bins: 3,
            eval_horizon: 3,
            policy_hidden: 6,
            policy_embed: 4,
            repr_hidden: 6,
            ..MetaConfig::default()
        }
    }

    #[test]
    fn starts_follow_history() {
        let t = task(1);
        assert_eq!(t.starts.len(), 3);
        assert_eq!(t.starts[0], t.model.initial_state());
        assert_eq!(t.starts[2].tau, 2.0);
    }

    #[test]
    fn zero_steps_returns_policy_unchanged() {
        let t = task(0);
        let cfg = small_cfg();
        let pol = cfg.init_policy(3, 0);
        let a = adapt(&pol, &t, 0, 1e-2, &cfg).unwrap();
        assert_eq!(a.policy, pol);
        assert_eq!(a.costs.len(), 1);
    }

    #[test]
    fn permuted_task_has_identical_cost() {
        let mut t = task(2);
        // Filtered starts here give nodes 0 and 3 identical rows; exact ties
        // resolve by index, which relabeling does not preserve.
        t.starts.truncate(1);
        let cfg = small_cfg();
        let pol = cfg.init_policy(3, 5);
        let tp = t.permuted(&[2, 0, 3, 1]).unwrap();
        let a = policy_cost(Some(&pol), &t, 4, cfg.relaxation).unwrap();
        let b = policy_cost(Some(&pol), &tp, 4, cfg.relaxation).unwrap();
        assert!((a - b).abs() <= 1e-9 * a, "{a} vs {b}");
    }

    #[test]
    fn adaptation_improves_objective() {
        let t = task(3);
        let cfg = small_cfg();
        let a = adapt(&cfg.init_policy(3, 1), &t, 15, 5e-2, &cfg).unwrap();
        assert_eq!(a.costs.len(), 16);
        assert!(a.objectives.last().unwrap() > &a.objectives[0]);
    }

    #[test]
    fn meta_train_runs_and_is_deterministic() {
        let pool = TaskPool { tasks: vec![task(0), task(1)] };
        let cfg = small_cfg();
        let a = meta_train(&pool, &cfg, 4).unwrap();
        let b = meta_train(&pool, &cfg, 4).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.records.len(), 6);
        assert!(a.failures.is_empty());
        assert!(a.records.iter().all(|r| r.refit_nll.is_some() && r.action_edges.len() <= 2));
        assert_ne!(a.pool.tasks[a.records[0].task].model, pool.tasks[a.records[0].task].model);
    }

    #[test]
    fn empty_pool_rejected() {
        assert!(meta_train(&TaskPool { tasks: vec![] }, &small_cfg(), 0).is_err());
    }

    #[test]
    fn embedding_csv_layout() {
        let pool = TaskPool { tasks: vec![task(0)] };
        let cfg = small_cfg();
        let csv = embedding_csv(&cfg.init_repr(3, 0), &pool, 1).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("task,aug_type,emb_kind,dim0,"));
        assert_eq!(lines.len(), 7);
        let cols = lines[0].split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == cols));
    }
}
