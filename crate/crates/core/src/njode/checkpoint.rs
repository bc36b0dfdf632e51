use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{OdeSolverConfig, Tensor};
use crate::error::{Error, Result};

use super::model::{DriftKind, IntensityKind, JumpKind, NjodeConfig, NjodeModel, PARAM_NAMES};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub N: usize,
    pub D: usize,
    pub bin_width: f64,
    pub version: u32,
    pub drift_hidden: usize,
    pub intensity_hidden: usize,
    pub adjacency: Vec<Vec<bool>>,
    pub solver: OdeSolverConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Vec<f64>>,
}

impl NjodeModel {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        if self.drift != DriftKind::Mlp || self.jump != JumpKind::Gru || self.intensity != IntensityKind::ExpMlp {
            return Err(Error::contract("models using test hooks cannot be checkpointed"));
        }
        let meta = CheckpointMeta {
            N: self.cfg.n_nodes,
            D: self.cfg.latent_dim,
            bin_width: self.cfg.bin_width,
            version: CHECKPOINT_VERSION,
            drift_hidden: self.cfg.drift_hidden,
            intensity_hidden: self.cfg.intensity_hidden,
            adjacency: self.adjacency.clone(),
            solver: self.cfg.solver.clone(),
        };
        let params = PARAM_NAMES
            .iter()
            .zip(&self.params)
            .map(|(n, t)| (n.to_string(), t.data().to_vec()))
            .collect();
        Ok(Checkpoint { meta, params })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<NjodeModel> {
        let m = &ck.meta;
        if m.version != CHECKPOINT_VERSION {
            return Err(Error::contract(format!("unsupported checkpoint version {}", m.version)));
        }
        let cfg = NjodeConfig {
            n_nodes: m.N,
            latent_dim: m.D,
            drift_hidden: m.drift_hidden,
            intensity_hidden: m.intensity_hidden,
            bin_width: m.bin_width,
            solver: m.solver.clone(),
        };
        let mut model = NjodeModel {
            cfg,
            adjacency: m.adjacency.clone(),
            params: Vec::new(),
            drift: DriftKind::Mlp,
            jump: JumpKind::Gru,
            intensity: IntensityKind::ExpMlp,
        };
        let shapes = model.expected_shapes();
        if ck.params.len() != PARAM_NAMES.len() {
            return Err(Error::contract("checkpoint has unexpected parameter set"));
        }
        for (name, (r, c)) in PARAM_NAMES.iter().zip(shapes) {
            let data = ck
                .params
                .get(*name)
                .ok_or_else(|| Error::contract(format!("checkpoint missing parameter {name}")))?;
            model.params.push(Tensor::new(vec![r, c], data.clone())?);
        }
        model.validate()?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint()?)?)
    }

    pub fn from_json(text: &str) -> Result<NjodeModel> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        Self::from_checkpoint(&ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_exact_round_trip() {
        let m = NjodeModel::init(NjodeConfig::new(3, 4), None, 17).unwrap();
        let json = m.to_json().unwrap();
        let back = NjodeModel::from_json(&json).unwrap();
        assert_eq!(back, m);
        for (a, b) in back.params.iter().zip(&m.params) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn hooked_model_not_checkpointable() {
        let mut m = NjodeModel::init(NjodeConfig::new(2, 2), None, 1).unwrap();
        m.jump = JumpKind::PassThrough;
        assert!(m.to_json().is_err());
    }

    #[test]
    fn truncated_params_rejected() {
        let m = NjodeModel::init(NjodeConfig::new(2, 2), None, 1).unwrap();
        let mut ck = m.to_checkpoint().unwrap();
        ck.params.get_mut("influence").unwrap().pop();
        assert!(NjodeModel::from_checkpoint(&ck).is_err());
    }
}
