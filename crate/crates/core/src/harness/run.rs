use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::amortize::{adapt, embedding_csv, heldout_bcme, meta_train, policy_cost, random_perm, PolicyNet, Task, TaskPool};
use crate::error::{Error, Result};
use crate::meanfield::{linear_mfa_experiment, mfa_csv};
use crate::njode::{fit_mle, fit_poisson_baseline, poisson_baseline_nll, sequence_loglik, FitData, NjodeConfig, NjodeModel};
use crate::planner::{mpc_run, Controller, ConstraintSpec, HawkesEnvironment, MpcOptions, MpcTrajectory};
use crate::pointproc::io::{counts_from_csv, counts_to_csv, events_to_csv};
use crate::pointproc::{bin_events, simulate_thinning, HawkesEnv, HawkesModel};
use crate::rng;
use crate::ExecMode;

use super::config::{FloatFormat, RunConfig};
use super::ingest::{ingest_cases_csv, ingest_report_csv, split_communities, splits_csv};
use super::tasks::{make_synthetic_task, synthetic_hawkes, SyntheticSpec};

/// Environment variable that overrides the configured output directory.
pub const OUT_ENV: &str = "NETSTEER_OUT";

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    Fit,
    Plan,
    MetaTrain,
    Adapt,
    MfaEval,
    Ingest,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Simulate,
        Command::Fit,
        Command::Plan,
        Command::MetaTrain,
        Command::Adapt,
        Command::MfaEval,
        Command::Ingest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Plan => "plan",
            Command::MetaTrain => "meta-train",
            Command::Adapt => "adapt",
            Command::MfaEval => "mfa-eval",
            Command::Ingest => "ingest",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown command {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub file: String,
    pub sha256: String,
}

/// Everything needed to rerun a command and check its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: Command,
    pub version: String,
    pub seed: u64,
    /// Named sub-seeds handed to the stochastic steps.
    pub seeds: BTreeMap<String, u64>,
    /// Fully resolved configuration.
    pub config_toml: String,
    pub config_sha256: String,
    pub outputs: Vec<OutputRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn config(&self) -> Result<RunConfig> {
        if sha256_hex(self.config_toml.as_bytes()) != self.config_sha256 {
            return Err(Error::Config("manifest config does not match its hash".into()));
        }
        RunConfig::from_toml(&self.config_toml)
    }
}

pub fn version_string() -> String {
    format!("netsteer v{}", env!("CARGO_PKG_VERSION"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `--out`, then [`OUT_ENV`], then the config, then `out`.
pub fn resolve_output_dir(cli: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    if let Some(p) = cli {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

/// Write through a temporary sibling and rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Machine-readable error report `{module, kind, message}`.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({
        "module": e.module(),
        "kind": e.kind(),
        "message": e.to_string(),
    })
    .to_string()
}

/// Re-render every float cell of a CSV. Integers and text pass through.
pub fn reformat_csv(text: &str, fmt: FloatFormat) -> String {
    if fmt == FloatFormat::Shortest {
        return text.to_string();
    }
    let mut out = String::with_capacity(text.len());
    for (i, line) in text.lines().enumerate() {
        if i > 0 {
            let cells: Vec<String> = line
                .split(',')
                .map(|c| {
                    let numeric = c.contains(['.', 'e', 'E']) || matches!(c, "inf" | "-inf" | "nan" | "NaN");
                    match c.parse::<f64>() {
                        Ok(v) if numeric => fmt.render(v),
                        _ => c.to_string(),
                    }
                })
                .collect();
            out.push_str(&cells.join(","));
        } else {
            out.push_str(line);
        }
        out.push('\n');
    }
    out
}

struct Outputs {
    dir: PathBuf,
    fmt: FloatFormat,
    records: Vec<OutputRecord>,
}

impl Outputs {
    fn new(dir: &Path, fmt: FloatFormat) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            fmt,
            records: Vec::new(),
        })
    }

    fn raw(&mut self, file: &str, text: &str) -> Result<()> {
        write_atomic(&self.dir.join(file), text.as_bytes())?;
        self.records.push(OutputRecord {
            file: file.to_string(),
            sha256: sha256_hex(text.as_bytes()),
        });
        Ok(())
    }

    /// Metric CSV, floats rendered in the configured format.
    fn metric(&mut self, file: &str, csv: &str) -> Result<()> {
        let text = reformat_csv(csv, self.fmt);
        self.raw(file, &text)
    }

    fn json<T: Serialize>(&mut self, file: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.raw(file, &text)
    }
}

/// Two-column `metric,value` table.
fn summary_csv(rows: &[(&str, String)]) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in rows {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    out: Outputs,
    seeds: BTreeMap<String, u64>,
}

impl Ctx<'_> {
    fn seed(&mut self, name: &str, tag: u64) -> u64 {
        let s = rng::derive(self.cfg.seed, tag);
        self.seeds.insert(name.to_string(), s);
        s
    }
}

/// Execute `command` and write its outputs plus `manifest.json` into `out_dir`.
pub fn run(command: Command, cfg: &RunConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut ctx = Ctx {
        cfg,
        out: Outputs::new(out_dir, cfg.float_format)?,
        seeds: BTreeMap::new(),
    };
    log::info!("{} seed {} -> {}", command.name(), cfg.seed, out_dir.display());
    match command {
        Command::Simulate => simulate(&mut ctx)?,
        Command::Fit => fit(&mut ctx)?,
        Command::Plan => plan(&mut ctx)?,
        Command::MetaTrain => meta(&mut ctx)?,
        Command::Adapt => adapt_cmd(&mut ctx)?,
        Command::MfaEval => mfa_eval(&mut ctx)?,
        Command::Ingest => ingest(&mut ctx)?,
    }
    finish(command, ctx, out_dir)
}

/// Outcome of rerunning a manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplayReport {
    pub checked: usize,
    /// Files whose bytes differ from the recorded hash.
    pub mismatches: Vec<String>,
}

impl ReplayReport {
    pub fn is_identical(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Rerun the command recorded in `manifest_path` into `out_dir` and compare
/// every output's hash against the manifest.
pub fn replay(manifest_path: &Path, out_dir: &Path) -> Result<ReplayReport> {
    let recorded = Manifest::load(manifest_path)?;
    let cfg = recorded.config()?;
    let rerun = run(recorded.command, &cfg, out_dir)?;
    let fresh: BTreeMap<&str, &str> = rerun.outputs.iter().map(|o| (o.file.as_str(), o.sha256.as_str())).collect();
    let mut mismatches: Vec<String> = recorded
        .outputs
        .iter()
        .filter(|o| fresh.get(o.file.as_str()) != Some(&o.sha256.as_str()))
        .map(|o| o.file.clone())
        .collect();
    mismatches.extend(
        rerun
            .outputs
            .iter()
            .filter(|o| !recorded.outputs.iter().any(|r| r.file == o.file))
            .map(|o| o.file.clone()),
    );
    Ok(ReplayReport {
        checked: recorded.outputs.len(),
        mismatches,
    })
}

fn events_per_node_time(total: u64, n: usize, span: f64) -> f64 {
    total as f64 / (n as f64 * span)
}

fn simulate(ctx: &mut Ctx<'_>) -> Result<()> {
    let sc = ctx.cfg.simulate.clone();
    let hawkes = synthetic_hawkes(&sc.task, ctx.seed("task", 1))?;
    ctx.out.json("hawkes.json", &hawkes)?;
    let stationary = hawkes.stationary_intensity()?;
    let mut s = String::from("sequence,n_events,events_per_node_time,stationary_per_node\n");
    let stat_mean = stationary.iter().sum::<f64>() / stationary.len() as f64;
    for k in 0..sc.n_sequences {
        let seed = ctx.seed(&format!("sequence{k}"), 100 + k as u64);
        let ev = simulate_thinning(&hawkes, sc.task.horizon, seed)?;
        let counts = bin_events(&ev, sc.task.bin_width)?;
        ctx.out.raw(&format!("events_{k}.csv"), &events_to_csv(&ev)?)?;
        let (csv, meta) = counts_to_csv(&counts)?;
        ctx.out.raw(&format!("counts_{k}.csv"), &csv)?;
        ctx.out.raw(&format!("counts_{k}.meta.json"), &meta)?;
        let n_ev = ev.events.len() as u64;
        let _ = writeln!(
            s,
            "{k},{n_ev},{},{stat_mean}",
            events_per_node_time(n_ev, hawkes.n_nodes(), sc.task.horizon)
        );
    }
    ctx.out.metric("simulate_summary.csv", &s)
}

/// Edge-convention adjacency (`[m][n]` is `m -> n`) of a Hawkes model.
fn edge_adjacency(h: &HawkesModel) -> Vec<Vec<bool>> {
    let n = h.n_nodes();
    (0..n).map(|m| (0..n).map(|k| h.adjacency[k][m]).collect()).collect()
}

fn simulate_sequences(h: &HawkesModel, spec: &SyntheticSpec, seeds: &[u64]) -> Result<Vec<FitData>> {
    seeds
        .iter()
        .map(|&s| Ok(FitData::new(bin_events(&simulate_thinning(h, spec.horizon, s)?, spec.bin_width)?)))
        .collect()
}

fn njode_config(n: usize, d: usize, width: f64) -> NjodeConfig {
    let mut c = NjodeConfig::new(n, d);
    c.bin_width = width;
    c
}

fn nll(model: &NjodeModel, data: &[FitData]) -> Result<f64> {
    data.iter().map(|d| sequence_loglik(model, d).map(|l| -l)).sum()
}

fn fit(ctx: &mut Ctx<'_>) -> Result<()> {
    let fc = ctx.cfg.fit.clone();
    let (train, heldout, adjacency, width) = match &fc.counts {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let meta_path = path.with_extension("meta.json");
            let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            let counts = counts_from_csv(&text, &meta, path)?;
            let n_train = ((counts.n_bins as f64) * (1.0 - fc.holdout_fraction)).round() as usize;
            if n_train == 0 || n_train >= counts.n_bins {
                return Err(Error::Config("holdout_fraction leaves an empty train or held-out window".into()));
            }
            let width = counts.bin_width;
            (vec![FitData::new(counts.window(0, n_train))], vec![FitData::new(counts)], None, width)
        }
        None => {
            let hawkes = synthetic_hawkes(&fc.task, ctx.seed("task", 1))?;
            let tr: Vec<u64> = (0..fc.n_sequences).map(|k| ctx.seed(&format!("train{k}"), 100 + k as u64)).collect();
            let ho: Vec<u64> = (0..fc.heldout_sequences).map(|k| ctx.seed(&format!("heldout{k}"), 200 + k as u64)).collect();
            let train = simulate_sequences(&hawkes, &fc.task, &tr)?;
            let heldout = simulate_sequences(&hawkes, &fc.task, &ho)?;
            (train, heldout, Some(edge_adjacency(&hawkes)), fc.task.bin_width)
        }
    };
    let n = train[0].counts.n_nodes;
    let m0 = NjodeModel::init(njode_config(n, fc.latent_dim, width), adjacency, ctx.seed("init", 2))?;
    let res = fit_mle(&m0, &train, &fc.fit)?;
    if let Some(why) = &res.aborted {
        log::warn!("fit stopped early: {why}");
    }
    ctx.out.raw("model.json", &res.model.to_json()?)?;
    let mut curve = String::from("epoch,nll\n");
    for (i, l) in res.losses.iter().enumerate() {
        let _ = writeln!(curve, "{i},{l}");
    }
    ctx.out.metric("fit_curve.csv", &curve)?;

    let rates = fit_poisson_baseline(&train);
    let train_nll = nll(&res.model, &train)?;
    let (heldout_nll, poisson_heldout, heldout_bins) = if fc.counts.is_some() {
        // Conditional likelihood of the trailing window given the prefix.
        let full = &heldout[0];
        let tail = FitData::new(full.counts.window(train[0].counts.n_bins, full.counts.n_bins));
        let cond = nll(&res.model, std::slice::from_ref(full))? - train_nll;
        (cond, poisson_baseline_nll(&rates, std::slice::from_ref(&tail)), tail.counts.n_bins)
    } else {
        let bins = heldout.iter().map(|d| d.counts.n_bins).sum();
        (nll(&res.model, &heldout)?, poisson_baseline_nll(&rates, &heldout), bins)
    };
    let f = |v: f64| v.to_string();
    let rows = [
        ("train_nll", f(train_nll)),
        ("heldout_nll", f(heldout_nll)),
        ("poisson_train_nll", f(poisson_baseline_nll(&rates, &train))),
        ("poisson_heldout_nll", f(poisson_heldout)),
        ("heldout_bins", heldout_bins.to_string()),
        ("best_epoch", res.best_epoch.to_string()),
    ];
    ctx.out.metric("fit_summary.csv", &summary_csv(&rows))
}

/// Fitted model, ground truth, and the first observed sequence used as history.
struct PlanSetup {
    hawkes: HawkesModel,
    model: NjodeModel,
    history: FitData,
}

fn plan_setup(ctx: &mut Ctx<'_>) -> Result<PlanSetup> {
    let pc = ctx.cfg.plan.clone();
    let hawkes = synthetic_hawkes(&pc.task, ctx.seed("task", 1))?;
    let seeds: Vec<u64> = (0..pc.n_sequences).map(|k| ctx.seed(&format!("train{k}"), 100 + k as u64)).collect();
    let data = simulate_sequences(&hawkes, &pc.task, &seeds)?;
    let model = match &pc.model {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let m = NjodeModel::from_json(&text)?;
            if m.n_nodes() != hawkes.n_nodes() {
                return Err(Error::Config("checkpoint node count does not match plan.task".into()));
            }
            m
        }
        None => {
            let cfg = njode_config(hawkes.n_nodes(), pc.latent_dim, pc.task.bin_width);
            let m0 = NjodeModel::init(cfg, Some(edge_adjacency(&hawkes)), ctx.seed("init", 2))?;
            fit_mle(&m0, &data, &pc.fit)?.model
        }
    };
    let history = data.into_iter().next().expect("n_sequences >= 1");
    Ok(PlanSetup { hawkes, model, history })
}

fn controller_label(c: &Controller) -> String {
    match c {
        Controller::Planner => "planner".into(),
        Controller::NoIntervention => "no_intervention".into(),
        Controller::RandomK { seed } => format!("random_k_{seed}"),
    }
}

fn stages_csv(tr: &MpcTrajectory) -> String {
    let mut s = String::from("stage,action_edges,intensity_cost,reduced_intensity,penalties,plan_objective\n");
    for r in &tr.stages {
        let edges = r.action_edges.iter().map(|(m, n)| format!("{m}>{n}")).collect::<Vec<_>>().join(";");
        let obj = r.plan_objective.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.stage, edges, r.intensity_cost, r.reduced_intensity, r.penalties, obj
        );
    }
    s
}

/// Per-controller trajectories of a `plan` run, in config order.
pub struct PlanOutcome {
    pub labels: Vec<String>,
    pub trajectories: Vec<MpcTrajectory>,
}

fn plan(ctx: &mut Ctx<'_>) -> Result<()> {
    plan_inner(ctx).map(|_| ())
}

fn plan_inner(ctx: &mut Ctx<'_>) -> Result<PlanOutcome> {
    let pc = ctx.cfg.plan.clone();
    let setup = plan_setup(ctx)?;
    let n = setup.hawkes.n_nodes();
    let cs = pc.constraints.apply(&ConstraintSpec::top_k(n, pc.task.k));
    cs.validate()?;
    let env = HawkesEnvironment {
        env: HawkesEnv::new(setup.hawkes.clone(), ctx.seed("environment", 7))?,
        width: pc.task.bin_width,
    };
    let mut out = PlanOutcome {
        labels: Vec::new(),
        trajectories: Vec::new(),
    };
    let mut summary =
        String::from("controller,total_intensity_cost,mean_intensity_cost,total_reduced_intensity,mean_reduced_intensity,refits\n");
    for (i, ctl) in pc.controllers.iter().enumerate() {
        // Random controllers mix their configured seed with the run seed.
        let ctl = match *ctl {
            Controller::RandomK { seed } => Controller::RandomK {
                seed: ctx.seed(&format!("random_k{i}"), 8 + 1000 * seed),
            },
            c => c,
        };
        let mut label = controller_label(&pc.controllers[i]);
        if out.labels.contains(&label) {
            label = format!("{label}_{i}");
        }
        let mut e = env.clone();
        let opts = MpcOptions {
            controller: ctl,
            history: Some(setup.history.counts.clone()),
            refit: pc.refit.clone(),
        };
        let tr = mpc_run(&setup.model, &mut e, pc.stages, &pc.plan, &cs, &opts)?;
        ctx.out.metric(&format!("stages_{label}.csv"), &stages_csv(&tr))?;
        let k = tr.stages.len() as f64;
        let _ = writeln!(
            summary,
            "{label},{},{},{},{},{}",
            tr.total_intensity_cost,
            tr.total_intensity_cost / k,
            tr.total_reduced_intensity,
            tr.total_reduced_intensity / k,
            tr.refits
        );
        out.labels.push(label);
        out.trajectories.push(tr);
    }
    ctx.out.metric("plan_summary.csv", &summary)?;
    Ok(out)
}

/// Run the `plan` pipeline and return the trajectories as well as the manifest.
pub fn run_plan(cfg: &RunConfig, out_dir: &Path) -> Result<(Manifest, PlanOutcome)> {
    cfg.validate()?;
    let mut ctx = Ctx {
        cfg,
        out: Outputs::new(out_dir, cfg.float_format)?,
        seeds: BTreeMap::new(),
    };
    let outcome = plan_inner(&mut ctx)?;
    let manifest = finish(Command::Plan, ctx, out_dir)?;
    Ok((manifest, outcome))
}

fn build_pool(ctx: &mut Ctx<'_>) -> Result<TaskPool> {
    let mc = ctx.cfg.meta.clone();
    let mut tasks = Vec::with_capacity(mc.n_tasks);
    for t in 0..mc.n_tasks {
        let st = make_synthetic_task(&mc.task, ctx.seed(&format!("task{t}"), 100 + t as u64))?;
        let cfg = njode_config(mc.task.n_nodes, mc.latent_dim, mc.task.bin_width);
        let m0 = NjodeModel::init(cfg, Some(st.edge_adjacency()), ctx.seed(&format!("init{t}"), 200 + t as u64))?;
        let fit = fit_mle(&m0, &[FitData::new(st.counts.clone())], &mc.fit)?;
        tasks.push(Task::from_history(
            format!("task{t}"),
            fit.model,
            st.constraints.clone(),
            &st.counts,
            mc.start_every,
        )?);
    }
    let pool = TaskPool { tasks };
    pool.validate()?;
    Ok(pool)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn meta(ctx: &mut Ctx<'_>) -> Result<()> {
    let mc = ctx.cfg.meta.clone();
    let pool = build_pool(ctx)?;
    let meta_seed = ctx.seed("meta", 3);
    let res = meta_train(&pool, &mc.meta, meta_seed)?;
    ctx.out.metric("meta_curve.csv", &res.curve_csv())?;
    ctx.out.json("policy.json", &res.policy)?;
    ctx.out.json("repr.json", &res.repr)?;
    let emb_seed = ctx.seed("embeddings", 4);
    ctx.out.metric("embeddings.csv", &embedding_csv(&res.repr, &res.pool, emb_seed)?)?;
    for t in &res.pool.tasks {
        ctx.out.raw(&format!("{}_model.json", t.name), &t.model.to_json()?)?;
    }

    // Contrastive loss before and after training, on fresh augmentations.
    let d = mc.latent_dim;
    let init_policy = mc.meta.init_policy(d, rng::derive(meta_seed, 10));
    let init_repr = mc.meta.init_repr(d, rng::derive(meta_seed, 11));
    let eval_seed = ctx.seed("bcme_eval", 5);
    let before = heldout_bcme(&init_repr, &init_policy, &res.pool, &mc.meta, eval_seed)?;
    let after = heldout_bcme(&res.repr, &res.policy, &res.pool, &mc.meta, eval_seed)?;
    let losses: Vec<f64> = res.records.iter().map(|r| r.loss).collect();
    let w = (losses.len() / 4).max(1);
    let f = |v: f64| v.to_string();
    let rows = [
        ("iterations", res.records.len().to_string()),
        ("failures", res.failures.len().to_string()),
        ("loss_first_quarter", f(mean(&losses[..w.min(losses.len())]))),
        ("loss_last_quarter", f(mean(&losses[losses.len().saturating_sub(w)..]))),
        ("bcme_init", f(before)),
        ("bcme_trained", f(after)),
    ];
    ctx.out.metric("meta_summary.csv", &summary_csv(&rows))
}

/// One held-out comparison of the `adapt` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptRow {
    pub task: String,
    pub none_cost: f64,
    pub meta_cost: f64,
    pub scratch_cost: f64,
    pub meta_reduction: f64,
    pub scratch_reduction: f64,
    /// Meta reduction reaches 80% of the from-scratch reduction.
    pub meets_target: bool,
}

fn adapt_cmd(ctx: &mut Ctx<'_>) -> Result<()> {
    adapt_inner(ctx).map(|_| ())
}

fn adapt_inner(ctx: &mut Ctx<'_>) -> Result<Vec<AdaptRow>> {
    let ac = ctx.cfg.adapt.clone();
    let mc = ctx.cfg.meta.clone();
    let pool = build_pool(ctx)?;
    let meta_seed = ctx.seed("meta", 3);
    let (policy, pool) = match &ac.policy {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let p: PolicyNet = serde_json::from_str(&text)?;
            (p, pool)
        }
        None => {
            let res = meta_train(&pool, &mc.meta, meta_seed)?;
            (res.policy, res.pool)
        }
    };
    if policy.latent_dim != mc.latent_dim {
        return Err(Error::Config("policy latent width does not match meta.latent_dim".into()));
    }
    let n = mc.task.n_nodes;
    let mut rows = Vec::with_capacity(ac.n_heldout);
    let mut curve = String::from("task,policy,step,cost,objective\n");
    for k in 0..ac.n_heldout {
        let base = &pool.tasks[k % pool.tasks.len()];
        let perm_seed = ctx.seed(&format!("heldout_perm{k}"), 500 + k as u64);
        let mut held = base.permuted(&random_perm(n, &mut rng::seeded(perm_seed))?)?;
        if k >= ac.n_heldout - ac.n_rescaled {
            held = held.rescaled(ctx.seed(&format!("heldout_scale{k}"), 600 + k as u64));
        }
        held.name = format!("heldout{k}-{}", held.name);
        let none = policy_cost(None, &held, mc.meta.eval_horizon, mc.meta.relaxation)?;
        let scratch_init = mc.meta.init_policy(mc.latent_dim, ctx.seed(&format!("scratch{k}"), 900 + k as u64));
        let meta_run = adapt(&policy, &held, ac.adapt_steps, ac.lr, &mc.meta)?;
        let scratch_run = adapt(&scratch_init, &held, ac.scratch_steps, ac.lr, &mc.meta)?;
        for (label, r) in [("meta", &meta_run), ("scratch", &scratch_run)] {
            for (step, cost) in r.costs.iter().enumerate() {
                let obj = r.objectives.get(step).map_or(String::new(), |v| v.to_string());
                let _ = writeln!(curve, "{},{label},{step},{cost},{obj}", held.name);
            }
        }
        let meta_cost = *meta_run.costs.last().expect("costs include step 0");
        let scratch_cost = *scratch_run.costs.last().expect("costs include step 0");
        let (rm, rs) = (none - meta_cost, none - scratch_cost);
        rows.push(AdaptRow {
            task: held.name.clone(),
            none_cost: none,
            meta_cost,
            scratch_cost,
            meta_reduction: rm,
            scratch_reduction: rs,
            meets_target: rm >= 0.8 * rs,
        });
    }
    ctx.out.metric("adapt_curve.csv", &curve)?;
    let mut s = String::from("task,none_cost,meta_cost,scratch_cost,meta_reduction,scratch_reduction,meets_target\n");
    for r in &rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.task, r.none_cost, r.meta_cost, r.scratch_cost, r.meta_reduction, r.scratch_reduction, r.meets_target
        );
    }
    ctx.out.metric("adapt_summary.csv", &s)?;
    Ok(rows)
}

/// Run the `adapt` pipeline and return the per-task comparison as well as the manifest.
pub fn run_adapt(cfg: &RunConfig, out_dir: &Path) -> Result<(Manifest, Vec<AdaptRow>)> {
    cfg.validate()?;
    let mut ctx = Ctx {
        cfg,
        out: Outputs::new(out_dir, cfg.float_format)?,
        seeds: BTreeMap::new(),
    };
    let rows = adapt_inner(&mut ctx)?;
    let manifest = finish(Command::Adapt, ctx, out_dir)?;
    Ok((manifest, rows))
}

fn finish(command: Command, ctx: Ctx<'_>, out_dir: &Path) -> Result<Manifest> {
    let config_toml = ctx.cfg.to_toml()?;
    let manifest = Manifest {
        command,
        version: version_string(),
        seed: ctx.cfg.seed,
        seeds: ctx.seeds,
        config_sha256: sha256_hex(config_toml.as_bytes()),
        config_toml,
        outputs: ctx.out.records,
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    write_atomic(&out_dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

fn mfa_eval(ctx: &mut Ctx<'_>) -> Result<()> {
    let mc = ctx.cfg.mfa_eval.clone();
    let sys = mc.system.build()?;
    let seed = ctx.seed("rollouts", 1);
    let rows = linear_mfa_experiment(&sys, mc.steps, mc.gamma, mc.rollouts, seed, ExecMode::default())?;
    ctx.out.metric("mfa.csv", &mfa_csv(&rows))?;
    let (worst_t, worst) = rows
        .iter()
        .map(|r| (r.step, (r.j - r.jhat).abs() / r.j))
        .fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let covered = rows
        .iter()
        .filter(|r| r.bound.is_some_and(|b| (r.j - r.jhat).abs() - 3.0 * r.j_stderr <= b))
        .count();
    let f = |v: f64| v.to_string();
    let summary = [
        ("steps", rows.len().to_string()),
        ("max_relative_error", f(worst)),
        ("worst_step", worst_t.to_string()),
        ("bound_covered_steps", covered.to_string()),
    ];
    ctx.out.metric("mfa_summary.csv", &summary_csv(&summary))
}

fn ingest(ctx: &mut Ctx<'_>) -> Result<()> {
    let ic = ctx.cfg.ingest.clone();
    let path = ic
        .path
        .as_ref()
        .ok_or_else(|| Error::Config("ingest.path is required".into()))?;
    let table = ingest_cases_csv(path)?;
    let splits = split_communities(&table, &ic.state, ic.max_nodes, ic.scheme)?;
    ctx.out.raw("splits.csv", &splits_csv(&splits))?;
    for sp in &splits {
        let (csv, meta) = counts_to_csv(&sp.counts)?;
        ctx.out.raw(&format!("counts_{}.csv", sp.id), &csv)?;
        ctx.out.raw(&format!("counts_{}.meta.json", sp.id), &meta)?;
    }
    ctx.out.metric("ingest_report.csv", &ingest_report_csv(&splits))?;
    let counties: Vec<_> = splits.iter().flat_map(|s| &s.counties).collect();
    let summary = [
        ("rows", table.rows.len().to_string()),
        ("dropped_missing_fips", table.dropped_missing_fips.to_string()),
        ("counties", counties.len().to_string()),
        ("splits", splits.len().to_string()),
        ("days", splits[0].counts.n_bins.to_string()),
        ("start", splits[0].start.to_string()),
        ("clipped_cells", counties.iter().map(|c| c.clipped_cells).sum::<usize>().to_string()),
        ("clipped_mass", counties.iter().map(|c| c.clipped_mass).sum::<i64>().to_string()),
    ];
    ctx.out.metric("ingest_summary.csv", &summary_csv(&summary))
}
