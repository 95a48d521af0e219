use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::container;
use crate::error::{Error, Result};
use crate::layers::{Model, ModelConfig, Param};
use crate::objectives::{MultiLossSpec, Objective, ObjectiveTerm};

/// Tuning and training metadata stored next to the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub objectives: MultiLossSpec,
    pub seed: u64,
    pub iteration: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
}

/// Header fields other than the array manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: String,
    pub topology: ModelConfig,
    pub p: usize,
    pub objective_ids: Vec<Objective>,
    pub lambda: Vec<f64>,
    pub seed: u64,
    pub iteration: u64,
}

pub const CHECKPOINT_KIND: &str = "checkpoint";

impl Checkpoint {
    pub fn new(model: Model<f32>, objectives: MultiLossSpec, seed: u64, iteration: u64) -> Result<Self> {
        if objectives.p() != model.p() {
            return Err(Error::dim("checkpoint", "p", model.p(), objectives.p()));
        }
        Ok(Checkpoint {
            model,
            meta: CheckpointMeta {
                objectives,
                seed,
                iteration,
            },
        })
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            kind: CHECKPOINT_KIND.into(),
            topology: self.model.config().clone(),
            p: self.model.p(),
            objective_ids: self.meta.objectives.ids(),
            lambda: self.meta.objectives.lambdas(),
            seed: self.meta.seed,
            iteration: self.meta.iteration,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = match serde_json::to_value(self.header()).map_err(|e| Error::Checkpoint(e.to_string()))? {
            Value::Object(m) => m,
            _ => unreachable!("header serialises to an object"),
        };
        let arrays: Vec<(&str, _)> = self
            .model
            .params()
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .collect();
        container::encode(header, &arrays)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, arrays) = container::decode(bytes)?;
        let h = parse_header(header)?;
        let params = arrays.into_iter().map(|(name, value)| Param { name, value }).collect();
        let model = Model::from_params(&h.topology, params).map_err(|e| Error::Checkpoint(format!("weights do not match topology: {e}")))?;
        let objectives = MultiLossSpec {
            objectives: h
                .objective_ids
                .iter()
                .zip(&h.lambda)
                .map(|(&id, &lambda)| ObjectiveTerm { id, lambda })
                .collect(),
        };
        objectives.validate()?;
        Checkpoint::new(model, objectives, h.seed, h.iteration)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn parse_header(header: Map<String, Value>) -> Result<CheckpointHeader> {
    let h: CheckpointHeader =
        serde_json::from_value(Value::Object(header)).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if h.kind != CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!("expected kind {CHECKPOINT_KIND}, found {}", h.kind)));
    }
    if h.p != h.topology.p || h.objective_ids.len() != h.p || h.lambda.len() != h.p {
        return Err(Error::Checkpoint(format!(
            "inconsistent p: header {}, topology {}, {} objectives, {} lambdas",
            h.p,
            h.topology.p,
            h.objective_ids.len(),
            h.lambda.len()
        )));
    }
    Ok(h)
}

/// Header and manifest of a checkpoint file without loading the weights.
pub fn inspect(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<container::ArrayEntry>)> {
    let (header, arrays, _) = container::read_header(bytes)?;
    Ok((parse_header(header)?, arrays))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

/// `(1 − t)·a + t·b` for every weight; `t = 0` and `t = 1` return exact copies.
pub fn interpolate_checkpoints(a: &Checkpoint, b: &Checkpoint, t: f64) -> Result<Checkpoint> {
    const OP: &str = "interpolate_checkpoints";
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::arg(OP, format!("t = {t} outside [0, 1]")));
    }
    if a.model.config() != b.model.config() {
        return Err(Error::arg(OP, "checkpoints have different topologies"));
    }
    if t == 0.0 {
        return Ok(a.clone());
    }
    if t == 1.0 {
        return Ok(b.clone());
    }
    let tf = t as f32;
    let params = a
        .model
        .params()
        .iter()
        .zip(b.model.params())
        .map(|(pa, pb)| {
            if pa.name != pb.name {
                return Err(Error::arg(OP, format!("parameter {} vs {}", pa.name, pb.name)));
            }
            Ok(Param {
                name: pa.name.clone(),
                value: pa.value.zip_map(&pb.value, OP, |x, y| (1.0 - tf) * x + tf * y)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        model: Model::from_params(a.model.config(), params)?,
        meta: CheckpointMeta {
            iteration: 0,
            ..a.meta.clone()
        },
    })
}
