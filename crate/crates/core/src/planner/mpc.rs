use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::njode::{
    fit_mle, flow, intensity, jump_update, sample_poisson, FitConfig, FitData, LatentState, NjodeModel,
};
use crate::pointproc::{HawkesEnv, SpikeCountMatrix};
use crate::rng;

use super::constraints::{admissible, project_topk, ActionMatrix, ConsecutiveTracker, ConstraintSpec};
use super::objective::{plan_step, PlanConfig};
use super::relax::{intervene, soft_penalty};

/// What one executed bin produced.
#[derive(Clone, Debug, PartialEq)]
pub struct StageObservation {
    pub counts: Vec<u64>,
    /// Expected counts in the bin, conditional on the state at its start and
    /// on the action in force.
    pub expected: Vec<f64>,
}

/// A system the controller acts on, one bin per stage.
pub trait Environment {
    fn n_nodes(&self) -> usize;
    fn bin_width(&self) -> f64;
    /// Run one bin with `cut` (edge convention) in force.
    fn step(&mut self, cut: Option<&Tensor>) -> Result<StageObservation>;
}

/// Ground-truth Hawkes process; the cut acts in continuous time.
#[derive(Clone, Debug)]
pub struct HawkesEnvironment {
    pub env: HawkesEnv,
    pub width: f64,
}

impl Environment for HawkesEnvironment {
    fn n_nodes(&self) -> usize {
        self.env.model().n_nodes()
    }

    fn bin_width(&self) -> f64 {
        self.width
    }

    fn step(&mut self, cut: Option<&Tensor>) -> Result<StageObservation> {
        let o = self.env.step(self.width, cut);
        Ok(StageObservation {
            counts: o.counts,
            expected: o.expected,
        })
    }
}

/// NJODE simulator: counts are sampled from the model's own intensity.
#[derive(Clone, Debug)]
pub struct NjodeEnvironment {
    pub model: NjodeModel,
    pub state: LatentState,
    rng: rng::Rng,
}

impl NjodeEnvironment {
    pub fn new(model: NjodeModel, seed: u64) -> Self {
        let state = model.initial_state();
        NjodeEnvironment {
            model,
            state,
            rng: rng::seeded(seed),
        }
    }
}

impl Environment for NjodeEnvironment {
    fn n_nodes(&self) -> usize {
        self.model.n_nodes()
    }

    fn bin_width(&self) -> f64 {
        self.model.bin_width()
    }

    fn step(&mut self, cut: Option<&Tensor>) -> Result<StageObservation> {
        let pre = flow(&self.model, &self.state, self.state.tau + self.model.bin_width())?;
        let lam = intensity(&self.model, &pre);
        let counts: Vec<u64> = lam.iter().map(|&l| sample_poisson(l, &mut self.rng)).collect();
        let x: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let w = self.model.influence();
        let weff = match cut {
            Some(c) => intervene(&w, c),
            None => w,
        };
        self.state = jump_update(&self.model, &pre, &x, &weff)?;
        Ok(StageObservation { counts, expected: lam })
    }
}

/// Action source for a receding-horizon run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Controller {
    #[default]
    Planner,
    NoIntervention,
    /// Uniformly random admissible edges, projected under the same constraints.
    RandomK { seed: u64 },
}

/// Periodic refit on all data collected so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefitConfig {
    pub every: usize,
    pub fit: FitConfig,
}

#[derive(Clone, Debug, Default)]
pub struct MpcOptions {
    pub controller: Controller,
    /// Uncontrolled counts observed before the first stage; the model's
    /// latent state is filtered through them.
    pub history: Option<SpikeCountMatrix>,
    pub refit: Option<RefitConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub action_edges: Vec<(usize, usize)>,
    /// Expected events per node per unit time.
    pub intensity_cost: f64,
    /// Uncontrolled minus controlled intensity cost.
    pub reduced_intensity: f64,
    pub penalties: f64,
    pub counts: Vec<u64>,
    /// Best lookahead objective, when the planner chose the action.
    pub plan_objective: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcTrajectory {
    pub stages: Vec<StageRecord>,
    pub total_intensity_cost: f64,
    pub total_reduced_intensity: f64,
    pub refits: usize,
}

impl MpcTrajectory {
    /// `stage,action_edges,intensity_cost,reduced_intensity,penalties`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,action_edges,intensity_cost,reduced_intensity,penalties\n");
        for r in &self.stages {
            let edges = r.action_edges.iter().map(|(m, n)| format!("{m}>{n}")).collect::<Vec<_>>().join(";");
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.stage, edges, r.intensity_cost, r.reduced_intensity, r.penalties
            );
        }
        s
    }
}

/// Latent state after absorbing `counts` (bin by bin) from `start`.
pub fn filter_state(
    model: &NjodeModel,
    start: &LatentState,
    counts: &SpikeCountMatrix,
    cuts: Option<&[Tensor]>,
) -> Result<LatentState> {
    let w = model.influence();
    let mut s = start.clone();
    for i in 0..counts.n_bins {
        let pre = flow(model, &s, s.tau + model.bin_width())?;
        let x: Vec<f64> = counts.bin(i).iter().map(|&c| c as f64).collect();
        let weff = match cuts {
            Some(c) => intervene(&w, &c[i]),
            None => w.clone(),
        };
        s = jump_update(model, &pre, &x, &weff)?;
    }
    Ok(s)
}

fn per_node_rate(expected: &[f64], width: f64) -> f64 {
    expected.iter().sum::<f64>() / (expected.len() as f64 * width)
}

/// Receding-horizon control: plan, execute the first action, observe, and
/// update the latent state with the observed counts.
///
/// `reduced_intensity` compares against a clone of `env` run uncontrolled
/// from the same starting state and seed.
pub fn mpc_run<E: Environment + Clone>(
    model: &NjodeModel,
    env: &mut E,
    stages: usize,
    cfg: &PlanConfig,
    cs: &ConstraintSpec,
    opts: &MpcOptions,
) -> Result<MpcTrajectory> {
    if stages == 0 {
        return Err(Error::contract("at least one stage is required"));
    }
    cfg.validate()?;
    cs.validate()?;
    let n = model.n_nodes();
    if env.n_nodes() != n || cs.n_nodes() != n {
        return Err(Error::contract("model, environment and constraints disagree on N"));
    }
    let width = env.bin_width();

    let mut reference = env.clone();
    let mut uncontrolled = Vec::with_capacity(stages);
    for _ in 0..stages {
        uncontrolled.push(per_node_rate(&reference.step(None)?.expected, width));
    }

    let mut model = model.clone();
    let history = opts.history.clone().unwrap_or_else(|| SpikeCountMatrix::zeros(n, 0, width));
    let mut state = filter_state(&model, &model.initial_state(), &history, None)?;
    let mut collected: Vec<Vec<u64>> = Vec::with_capacity(stages);
    let mut cuts: Vec<Tensor> = Vec::with_capacity(stages);
    let mut tracker = ConsecutiveTracker::new(n, cs.max_consecutive);
    let mut prev = ActionMatrix::empty(n);
    let mut records = Vec::with_capacity(stages);
    let mut refits = 0;

    for (stage, &baseline) in uncontrolled.iter().enumerate() {
        let mask = tracker.mask();
        let adm = admissible(&model.adjacency, cs, Some(&mask));
        let (action, plan_objective) = match opts.controller {
            Controller::Planner => {
                let (a, d) = plan_step(&model, &state, cfg, cs, &prev, &adm)?;
                (a, Some(d.best_objective()))
            }
            Controller::NoIntervention => (ActionMatrix::empty(n), None),
            Controller::RandomK { seed } => {
                let mut r = rng::stream(seed, stage as u64);
                let p = Tensor::new(vec![n, n], (0..n * n).map(|_| r.random::<f64>() + f64::MIN_POSITIVE).collect())?;
                (project_topk(&p, cs, &adm), None)
            }
        };
        action.check(cs, &mask)?;
        let a = action.to_tensor();
        let obs = env.step(Some(&a))?;
        let cost = per_node_rate(&obs.expected, width);
        let penalties = soft_penalty(&a, &prev.to_tensor(), cs);

        let pre = flow(&model, &state, state.tau + model.bin_width())?;
        let x: Vec<f64> = obs.counts.iter().map(|&c| c as f64).collect();
        state = jump_update(&model, &pre, &x, &intervene(&model.influence(), &a))?;

        records.push(StageRecord {
            stage,
            action_edges: action.edges().to_vec(),
            intensity_cost: cost,
            reduced_intensity: baseline - cost,
            penalties,
            counts: obs.counts.clone(),
            plan_objective,
        });
        collected.push(obs.counts);
        cuts.push(a);
        tracker.record(&action);
        prev = action;

        if let Some(rf) = &opts.refit {
            if rf.every > 0 && (stage + 1) % rf.every == 0 && stage + 1 < stages {
                let mut bins: Vec<Vec<u64>> = (0..history.n_bins).map(|i| history.bin(i)).collect();
                bins.extend(collected.iter().cloned());
                let mut all_cuts = vec![Tensor::zeros(n, n); history.n_bins];
                all_cuts.extend(cuts.iter().cloned());
                let data = FitData {
                    counts: SpikeCountMatrix::from_bins(&bins, width)?,
                    start: None,
                    cuts: Some(all_cuts.clone()),
                };
                model = fit_mle(&model, std::slice::from_ref(&data), &rf.fit)?.model;
                state = filter_state(&model, &model.initial_state(), &data.counts, Some(&all_cuts))?;
                refits += 1;
            }
        }
    }
    Ok(MpcTrajectory {
        total_intensity_cost: records.iter().map(|r| r.intensity_cost).sum(),
        total_reduced_intensity: records.iter().map(|r| r.reduced_intensity).sum(),
        stages: records,
        refits,
    })
}
