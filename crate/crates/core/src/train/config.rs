use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DegradationSpec, PatchOptions};
use crate::error::{Error, Result};
use crate::layers::ModelConfig;
use crate::objectives::{MultiLossSpec, DEFAULT_GAMMA, DEFAULT_NU, UNSHARP_SIGMA, UNSHARP_SIZE};

use super::adam::AdamConfig;

fn nu() -> f64 {
    DEFAULT_NU
}
fn gamma() -> f64 {
    DEFAULT_GAMMA
}
fn unsharp_size() -> usize {
    UNSHARP_SIZE
}
fn unsharp_sigma() -> f64 {
    UNSHARP_SIGMA
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    #[serde(default = "nu")]
    pub nu: f64,
    #[serde(default = "gamma")]
    pub gamma: f64,
    #[serde(default = "unsharp_size")]
    pub unsharp_size: usize,
    #[serde(default = "unsharp_sigma")]
    pub unsharp_sigma: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            nu: nu(),
            gamma: gamma(),
            unsharp_size: unsharp_size(),
            unsharp_sigma: unsharp_sigma(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaSampling {
    /// One draw per step shared by the whole batch.
    #[default]
    PerStep,
    /// One draw per batch item.
    PerSample,
}

fn eval_sigmas() -> Vec<f64> {
    vec![25.0]
}
fn eval_rhos() -> Vec<f64> {
    vec![0.0]
}
fn eval_seed() -> u64 {
    0x5eed
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out images (directory or manifest).
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default = "eval_sigmas")]
    pub sigmas: Vec<f64>,
    #[serde(default = "eval_rhos")]
    pub rhos: Vec<f64>,
    /// Defaults to `(w, 1 − w)` for `w ∈ {0, .25, .5, .75, 1}` when `p = 2`,
    /// otherwise to the corners of the unit cube.
    #[serde(default)]
    pub omega_grid: Option<Vec<Vec<f64>>>,
    #[serde(default = "eval_seed")]
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            data: None,
            sigmas: eval_sigmas(),
            rhos: eval_rhos(),
            omega_grid: None,
            seed: eval_seed(),
        }
    }
}

fn log_every() -> u64 {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    /// Training images (directory of PNGs or manifest file).
    pub data: PathBuf,
    pub model: ModelConfig,
    pub losses: MultiLossSpec,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub degradation: DegradationSpec,
    #[serde(default)]
    pub targets: TargetConfig,
    #[serde(default)]
    pub patches: PatchOptions,
    #[serde(default)]
    pub omega_sampling: OmegaSampling,
    /// Use this `ω` at every step instead of sampling.
    #[serde(default)]
    pub fixed_omega: Option<Vec<f64>>,
    /// Keep every parameter mapper at its initial value.
    #[serde(default)]
    pub freeze_mapper: bool,
    /// 0 disables periodic checkpoints; the final one is always written
    /// when `out_dir` is set.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "log_every")]
    pub log_every: u64,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file; relative paths are taken relative to the file.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.data);
        if let Some(p) = cfg.eval.data.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.out_dir.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut collect = |r: Result<()>| {
            if let Err(Error::Config(v)) = r {
                bad.extend(v);
            }
        };
        collect(self.model.validate());
        collect(self.losses.validate());
        collect(self.degradation.validate());
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1".into());
        }
        if self.patch_size == 0 {
            bad.push("patch_size must be >= 1".into());
        }
        if self.losses.p() != self.model.p {
            bad.push(format!("losses list {} objectives but model.p = {}", self.losses.p(), self.model.p));
        }
        if let Some(w) = &self.fixed_omega {
            if w.len() != self.model.p {
                bad.push(format!("fixed_omega has {} entries, expected {}", w.len(), self.model.p));
            }
            if w.iter().any(|v| !(0.0..=1.0).contains(v)) {
                bad.push("fixed_omega entries must lie in [0, 1]".into());
            }
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            bad.push("adam needs lr > 0, betas in [0, 1), eps > 0".into());
        }
        let t = &self.targets;
        if !(0.0..=1.0).contains(&t.nu) || !(t.gamma >= 0.0) || t.unsharp_size % 2 == 0 || !(t.unsharp_sigma > 0.0) {
            bad.push("targets need nu in [0, 1], gamma >= 0, odd unsharp_size, unsharp_sigma > 0".into());
        }
        if let Some(grid) = &self.eval.omega_grid {
            if grid.iter().any(|w| w.len() != self.model.p) {
                bad.push(format!("eval.omega_grid entries must have {} values", self.model.p));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    /// Evaluation `ω` grid, explicit or default.
    pub fn eval_grid(&self) -> Vec<Vec<f64>> {
        if let Some(g) = &self.eval.omega_grid {
            return g.clone();
        }
        let p = self.model.p;
        if p == 2 {
            return crate::analysis::line_grid(&crate::analysis::DEFAULT_STEPS);
        }
        (0..1usize << p.min(4))
            .map(|m| (0..p).map(|i| if i < 4 && m >> i & 1 == 1 { 1.0 } else { 0.0 }).collect())
            .collect()
    }
}
