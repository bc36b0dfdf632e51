use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::amortize::MetaConfig;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::meanfield::LinearJumpSystem;
use crate::njode::FitConfig;
use crate::planner::{ConstraintSpec, Controller, PlanConfig, RefitConfig};

use super::tasks::SyntheticSpec;

/// JSON-schema document for [`RunConfig`].
pub const CONFIG_SCHEMA: &str = include_str!("config.schema.json");

/// How floats are rendered in metric files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FloatFormat {
    /// Shortest representation that parses back to the same value.
    #[default]
    Shortest,
    /// Fixed number of digits after the decimal point.
    Fixed(usize),
    /// Scientific notation with this many digits after the point.
    Sci(usize),
}

impl FloatFormat {
    pub fn render(self, v: f64) -> String {
        if !v.is_finite() {
            return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
        }
        match self {
            FloatFormat::Shortest => format!("{v}"),
            FloatFormat::Fixed(d) => format!("{v:.d$}"),
            FloatFormat::Sci(d) => format!("{v:.d$e}"),
        }
    }
}

impl fmt::Display for FloatFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FloatFormat::Shortest => write!(f, "shortest"),
            FloatFormat::Fixed(d) => write!(f, "fixed:{d}"),
            FloatFormat::Sci(d) => write!(f, "sci:{d}"),
        }
    }
}

impl std::str::FromStr for FloatFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let digits = |d: &str| {
            d.parse::<usize>()
                .ok()
                .filter(|&n| n <= 17)
                .ok_or_else(|| Error::Config(format!("bad float format digits in {s:?}")))
        };
        match s.split_once(':') {
            None if s == "shortest" => Ok(FloatFormat::Shortest),
            Some(("fixed", d)) => Ok(FloatFormat::Fixed(digits(d)?)),
            Some(("sci", d)) => Ok(FloatFormat::Sci(digits(d)?)),
            _ => Err(Error::Config(format!("float format must be shortest, fixed:N or sci:N, got {s:?}"))),
        }
    }
}

impl Serialize for FloatFormat {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FloatFormat {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Whole-run configuration. Every field has an explicit default and unknown
/// keys are rejected at every level.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory when neither `--out` nor `NETSTEER_OUT` is given.
    pub output_dir: Option<PathBuf>,
    pub float_format: FloatFormat,
    pub simulate: SimulateConfig,
    pub fit: FitCommandConfig,
    pub plan: PlanCommandConfig,
    pub meta: MetaCommandConfig,
    pub adapt: AdaptCommandConfig,
    pub mfa_eval: MfaEvalConfig,
    pub ingest: IngestConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub task: SyntheticSpec,
    pub n_sequences: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            task: SyntheticSpec::default(),
            n_sequences: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitCommandConfig {
    pub task: SyntheticSpec,
    /// Count CSV (with its `.meta.json` sidecar) to fit instead of
    /// simulated data; its trailing `holdout_fraction` of bins is held out.
    pub counts: Option<PathBuf>,
    pub n_sequences: usize,
    pub heldout_sequences: usize,
    pub holdout_fraction: f64,
    pub latent_dim: usize,
    pub fit: FitConfig,
}

impl Default for FitCommandConfig {
    fn default() -> Self {
        FitCommandConfig {
            task: SyntheticSpec::default(),
            counts: None,
            n_sequences: 4,
            heldout_sequences: 1,
            holdout_fraction: 0.2,
            latent_dim: 4,
            fit: FitConfig {
                epochs: 30,
                lr: 1e-2,
                ..FitConfig::default()
            },
        }
    }
}

/// Overrides applied to the synthetic task's default constraints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintOverrides {
    pub k: Option<usize>,
    pub budget: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub max_consecutive: Option<usize>,
    /// Uniform per-edge cost.
    pub edge_cost: Option<f64>,
}

impl ConstraintOverrides {
    pub fn apply(&self, cs: &ConstraintSpec) -> ConstraintSpec {
        let mut out = cs.clone();
        if let Some(k) = self.k {
            out.k = k;
        }
        if let Some(b) = self.budget {
            out.budget = b;
        }
        if let Some(l) = self.lambda1 {
            out.lambda1 = l;
        }
        if let Some(l) = self.lambda2 {
            out.lambda2 = l;
        }
        if self.max_consecutive.is_some() {
            out.max_consecutive = self.max_consecutive;
        }
        if let Some(c) = self.edge_cost {
            let n = out.n_nodes();
            out.cost = Tensor::filled(n, n, c);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanCommandConfig {
    pub task: SyntheticSpec,
    /// Fitted checkpoint to plan with; when absent a model is fitted inline
    /// on `n_sequences` simulated sequences.
    pub model: Option<PathBuf>,
    pub n_sequences: usize,
    pub latent_dim: usize,
    pub fit: FitConfig,
    pub stages: usize,
    pub plan: PlanConfig,
    pub controllers: Vec<Controller>,
    pub constraints: ConstraintOverrides,
    pub refit: Option<RefitConfig>,
}

impl Default for PlanCommandConfig {
    fn default() -> Self {
        PlanCommandConfig {
            task: SyntheticSpec::default(),
            model: None,
            n_sequences: 10,
            latent_dim: 4,
            fit: FitConfig {
                epochs: 40,
                lr: 1e-2,
                ..FitConfig::default()
            },
            stages: 100,
            plan: PlanConfig::default(),
            controllers: vec![Controller::Planner, Controller::NoIntervention, Controller::RandomK { seed: 0 }],
            constraints: ConstraintOverrides::default(),
            refit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaCommandConfig {
    pub task: SyntheticSpec,
    pub n_tasks: usize,
    pub latent_dim: usize,
    pub fit: FitConfig,
    /// Spacing, in bins, of the start states filtered from each task's history.
    pub start_every: usize,
    pub meta: MetaConfig,
}

impl Default for MetaCommandConfig {
    fn default() -> Self {
        MetaCommandConfig {
            task: SyntheticSpec::default(),
            n_tasks: 3,
            latent_dim: 4,
            fit: FitCommandConfig::default().fit,
            start_every: 25,
            meta: MetaConfig {
                iters: 150,
                policy_lr: 1e-2,
                repr_lr: 1e-2,
                ..MetaConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptCommandConfig {
    /// Meta-trained policy JSON; when absent the `meta` section is trained inline.
    pub policy: Option<PathBuf>,
    /// Held-out tasks: relabeled copies of pool tasks, the later ones also
    /// with rescaled start states.
    pub n_heldout: usize,
    pub n_rescaled: usize,
    pub adapt_steps: usize,
    pub scratch_steps: usize,
    pub lr: f64,
}

impl Default for AdaptCommandConfig {
    fn default() -> Self {
        AdaptCommandConfig {
            policy: None,
            n_heldout: 5,
            n_rescaled: 2,
            adapt_steps: 10,
            scratch_steps: 100,
            lr: 1e-2,
        }
    }
}

/// Serializable recipe for a [`LinearJumpSystem`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearSystemSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: f64,
    pub d_scale: f64,
    /// `w[m][n]` is the edge `m -> n`.
    pub w: Vec<Vec<f64>>,
    pub emission: Vec<f64>,
    pub c0: f64,
    pub cap: Option<f64>,
    pub bin_width: f64,
    pub h0: Vec<Vec<f64>>,
}

impl Default for LinearSystemSpec {
    fn default() -> Self {
        LinearSystemSpec {
            a: vec![vec![-1.0, 0.3], vec![-0.3, -1.0]],
            b: vec![0.1, -0.2],
            c: 0.5,
            d_scale: 0.3,
            w: vec![vec![0.2, 0.1], vec![0.0, 0.3]],
            emission: vec![0.4, -0.3],
            c0: 0.2,
            cap: Some(5.0),
            bin_width: 1.0,
            h0: vec![vec![0.5, -0.5], vec![0.2, 0.1]],
        }
    }
}

impl LinearSystemSpec {
    pub fn build(&self) -> Result<LinearJumpSystem> {
        let rows = |v: &[Vec<f64>], what: &str| -> Result<Tensor> {
            let c = v.first().map_or(0, Vec::len);
            if v.is_empty() || v.iter().any(|r| r.len() != c) {
                return Err(Error::Config(format!("{what} must be a nonempty rectangular matrix")));
            }
            Ok(Tensor::from_rows(v))
        };
        LinearJumpSystem::new(
            rows(&self.a, "a")?,
            self.b.clone(),
            self.c,
            self.d_scale,
            rows(&self.w, "w")?,
            self.emission.clone(),
            self.c0,
            self.cap,
            self.bin_width,
            rows(&self.h0, "h0")?,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfaEvalConfig {
    pub system: LinearSystemSpec,
    /// Evaluated horizons `t = 0..steps`.
    pub steps: usize,
    pub gamma: f64,
    pub rollouts: usize,
}

impl Default for MfaEvalConfig {
    fn default() -> Self {
        MfaEvalConfig {
            system: LinearSystemSpec::default(),
            steps: 21,
            gamma: 1.0,
            rollouts: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// NYT-convention CSV `date,county,state,fips,cases,deaths`.
    pub path: Option<PathBuf>,
    pub state: String,
    pub max_nodes: usize,
    pub scheme: super::ingest::SplitScheme,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            path: None,
            state: "Georgia".into(),
            max_nodes: 25,
            scheme: super::ingest::SplitScheme::Alphabetical,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Fully resolved configuration, every default written out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.simulate.task.validate()?;
        self.fit.task.validate()?;
        self.plan.task.validate()?;
        self.meta.task.validate()?;
        self.plan.plan.validate().map_err(cfg_err)?;
        self.meta.meta.validate().map_err(cfg_err)?;
        if self.simulate.n_sequences == 0 || self.fit.n_sequences == 0 || self.plan.n_sequences == 0 {
            return Err(Error::Config("sequence counts must be positive".into()));
        }
        if !(0.0 < self.fit.holdout_fraction && self.fit.holdout_fraction < 1.0) {
            return Err(Error::Config("holdout_fraction must lie in (0, 1)".into()));
        }
        if [self.fit.latent_dim, self.plan.latent_dim, self.meta.latent_dim].contains(&0) {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.plan.stages == 0 || self.plan.controllers.is_empty() {
            return Err(Error::Config("plan needs stages and at least one controller".into()));
        }
        if self.meta.n_tasks == 0 || self.meta.start_every == 0 {
            return Err(Error::Config("meta needs tasks and a positive start spacing".into()));
        }
        if self.adapt.n_heldout == 0 || self.adapt.n_rescaled > self.adapt.n_heldout || !(self.adapt.lr > 0.0) {
            return Err(Error::Config("adapt needs held-out tasks, n_rescaled <= n_heldout and lr > 0".into()));
        }
        if self.mfa_eval.rollouts == 0 || !(0.0..=1.0).contains(&self.mfa_eval.gamma) {
            return Err(Error::Config("mfa_eval needs rollouts and gamma in [0, 1]".into()));
        }
        self.mfa_eval.system.build().map_err(cfg_err)?;
        if self.ingest.max_nodes == 0 {
            return Err(Error::Config("ingest.max_nodes must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[plan]\nhorizon = 3").is_err());
        assert!(RunConfig::from_toml("[plan.plan]\nhorizon = 3").is_ok());
        assert!(RunConfig::from_toml("[meta.meta.pem]\ndepth = 3").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[plan.plan]\ngamma = 1.0").is_err());
        assert!(RunConfig::from_toml("[simulate.task]\nmax_rho = 1.5").is_err());
        assert!(RunConfig::from_toml("float_format = \"fixed:x\"").is_err());
    }

    #[test]
    fn float_formats() {
        assert_eq!(FloatFormat::Shortest.render(0.1), "0.1");
        assert_eq!(FloatFormat::Fixed(3).render(2.0 / 3.0), "0.667");
        assert_eq!(FloatFormat::Sci(2).render(1234.5), "1.23e3");
        assert_eq!(FloatFormat::Shortest.render(f64::INFINITY), "inf");
        let c = RunConfig::from_toml("float_format = \"sci:4\"").unwrap();
        assert_eq!(c.float_format, FloatFormat::Sci(4));
    }

    #[test]
    fn overrides_apply() {
        let cs = ConstraintSpec::top_k(3, 2);
        let o = ConstraintOverrides {
            k: Some(1),
            edge_cost: Some(2.0),
            budget: Some(3.0),
            ..Default::default()
        };
        let out = o.apply(&cs);
        assert_eq!((out.k, out.budget, out.cost.get(1, 2)), (1, 3.0, 2.0));
    }

    fn schema_keys(root: &serde_json::Value, v: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
        let v = match v.get("$ref").and_then(|r| r.as_str()) {
            Some(r) => root.pointer(r.trim_start_matches('#')).expect("dangling $ref"),
            None => v,
        };
        if let Some(props) = v.get("properties").and_then(|p| p.as_object()) {
            for (k, sub) in props {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                out.push(key.clone());
                schema_keys(root, sub, &key, out);
            }
        }
    }

    fn toml_keys(v: &toml::Value, prefix: &str, out: &mut Vec<String>) {
        if let Some(t) = v.as_table() {
            for (k, sub) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                out.push(key.clone());
                toml_keys(sub, &key, out);
            }
        }
    }

    #[test]
    fn schema_documents_every_default_key() {
        let schema: serde_json::Value = serde_json::from_str(CONFIG_SCHEMA).unwrap();
        let mut documented = Vec::new();
        schema_keys(&schema, &schema, "", &mut documented);
        let value: toml::Value = toml::from_str(&RunConfig::default().to_toml().unwrap()).unwrap();
        let mut present = Vec::new();
        toml_keys(&value, "", &mut present);
        let missing: Vec<&String> = present.iter().filter(|k| !documented.contains(k)).collect();
        assert!(missing.is_empty(), "undocumented keys: {missing:?}");
    }
}
