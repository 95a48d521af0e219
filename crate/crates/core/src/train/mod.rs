//! Adam, the parametric multi-loss training loop, checkpoints and the
//! weight-interpolation baseline.
//!
//! Every step draws one `ω` (or one per item), synthesises `(y, z)`, builds
//! the `ω`-dependent targets, runs the model with that `ω` and minimises
//! `Σ ω_i λ_i L_i`. The same `ω` values feed the layers, the targets and the
//! loss weights.

mod adam;
mod checkpoint;
mod config;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{
    inspect, interpolate_checkpoints, load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, CheckpointMeta,
    CHECKPOINT_KIND,
};
pub use config::{EvalConfig, OmegaSampling, TargetConfig, TrainConfig};

use std::path::{Path, PathBuf};

use crate::analysis::{sweep_eval, SweepConfig, SweepTable};
use crate::autodiff::{Graph, Var};
use crate::data::{degrade, eligible_images, sample_omega, sample_patch_from, Dataset, Rng};
use crate::error::{Error, Result};
use crate::layers::{build_backbone, Model, Variant};
use crate::objectives::{multi_loss, objective_targets, rec_loss, TargetParams};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub iteration: u64,
    pub loss: f64,
    /// Unweighted `L_i`, averaged over the batch.
    pub per_objective: Vec<f64>,
    /// First row of the `ω` used in this step.
    pub omega: Vec<f64>,
    pub sigma: f64,
    pub rho: f64,
}

#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub iteration: u64,
    pub table: SweepTable,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
    pub evals: Vec<EvalRecord>,
}

pub struct Trainer {
    config: TrainConfig,
    model: Model<f32>,
    adam: Adam<f32>,
    train: Dataset,
    eligible: Vec<usize>,
    eval: Option<Dataset>,
    rng: Rng,
    targets: TargetParams<f32>,
    iteration: u64,
}

fn is_mapper(name: &str) -> bool {
    name.starts_with("mapper.") || name.contains(".mapper.")
}

impl Trainer {
    /// Builds the model from `config.seed` and loads images from disk.
    pub fn new(config: TrainConfig) -> Result<Self> {
        let train = Dataset::open(&config.data)?;
        let eval = config.eval.data.as_ref().map(Dataset::open).transpose()?;
        Self::with_data(config, train, eval)
    }

    pub fn with_data(config: TrainConfig, train: Dataset, eval: Option<Dataset>) -> Result<Self> {
        config.validate()?;
        let master = Rng::seed(config.seed);
        let model = build_backbone::<f32>(&config.model, &mut master.split(0))?;
        let shapes: Vec<Shape> = model.params().iter().map(|p| p.value.shape()).collect();
        let adam = Adam::new(config.adam, &shapes);
        let eligible = eligible_images(&train.images, config.patch_size, config.patches.small_images)?;
        let t = &config.targets;
        let targets = TargetParams::new(t.nu, t.gamma, t.unsharp_size, t.unsharp_sigma)?;
        Ok(Trainer {
            rng: master.split(1),
            config,
            model,
            adam,
            train,
            eligible,
            eval,
            targets,
            iteration: 0,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    /// Replaces the initial weights (same topology required).
    pub fn set_model(&mut self, model: Model<f32>) -> Result<()> {
        if model.config() != self.model.config() {
            return Err(Error::arg("trainer", "model topology differs from config"));
        }
        self.model = model;
        Ok(())
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            meta: CheckpointMeta {
                objectives: self.config.losses.clone(),
                seed: self.config.seed,
                iteration: self.iteration,
            },
        }
    }

    fn draw_omega(&mut self, n: usize) -> Vec<Vec<f32>> {
        let p = self.config.model.p;
        if let Some(w) = &self.config.fixed_omega {
            return vec![w.iter().map(|&v| v as f32).collect()];
        }
        let rows = match self.config.omega_sampling {
            OmegaSampling::PerStep => 1,
            OmegaSampling::PerSample => n,
        };
        (0..rows)
            .map(|_| sample_omega::<f32>(p, &mut self.rng).as_slice().to_vec())
            .collect()
    }

    /// One optimisation step.
    pub fn step(&mut self) -> Result<StepLog> {
        let n = self.config.batch_size;
        let size = self.config.patch_size;
        let omega = self.draw_omega(n);
        let (sigma, rho) = self.config.degradation.draw(&mut self.rng);
        let mut patches = Vec::with_capacity(n);
        for _ in 0..n {
            let (p, _) = sample_patch_from(&self.train.images, &self.eligible, size, self.config.patches.flip, &mut self.rng)?;
            patches.push(p);
        }
        let y = Tensor::concat_batch(&patches.iter().collect::<Vec<_>>())?;
        let z = degrade(&y, sigma, rho, &self.config.degradation, &mut self.rng)?;

        let spec = &self.config.losses;
        let p = spec.p();
        // targets[i] covers the whole batch for objective i
        let targets: Vec<Tensor<f32>> = if omega.len() == 1 {
            objective_targets(spec, &omega[0], &y, &z, &self.targets)?
        } else {
            let per_item = (0..n)
                .map(|b| objective_targets(spec, &omega[b], &y.select_batch(b)?, &z.select_batch(b)?, &self.targets))
                .collect::<Result<Vec<_>>>()?;
            (0..p)
                .map(|i| Tensor::concat_batch(&per_item.iter().map(|t| &t[i]).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()?
        };

        let g = Graph::new();
        let freeze = self.config.freeze_mapper;
        let bound: Vec<Var<'_, f32>> = self
            .model
            .params()
            .iter()
            .map(|prm| {
                if freeze && is_mapper(&prm.name) {
                    g.constant(prm.value.clone())
                } else {
                    g.param(prm.value.clone())
                }
            })
            .collect();
        let flat: Vec<f32> = omega.iter().flatten().copied().collect();
        let omega_var = g.constant(Tensor::from_vec(Shape::new(omega.len(), p, 1, 1), flat)?);
        let x = g.constant(z);
        let pred = self.model.forward(&bound, x, Some(omega_var))?;
        debug_assert!(self.config.model.variant != Variant::Tunable || omega_var.shape().c == p);

        let mut per_objective = vec![0.0f64; p];
        let loss = if omega.len() == 1 {
            let losses = targets
                .iter()
                .map(|t| rec_loss(pred, g.constant(t.clone())))
                .collect::<Result<Vec<_>>>()?;
            for (acc, l) in per_objective.iter_mut().zip(&losses) {
                *acc = l.item()? as f64;
            }
            multi_loss(&omega[0], spec, &losses)?
        } else {
            let mut total: Option<Var<'_, f32>> = None;
            for (b, w) in omega.iter().enumerate() {
                let pb = pred.select_batch(b)?;
                let losses = targets
                    .iter()
                    .map(|t| rec_loss(pb, g.constant(t.select_batch(b)?)))
                    .collect::<Result<Vec<_>>>()?;
                for (acc, l) in per_objective.iter_mut().zip(&losses) {
                    *acc += l.item()? as f64 / n as f64;
                }
                let term = multi_loss(w, spec, &losses)?.scale(1.0 / n as f32);
                total = Some(match total {
                    None => term,
                    Some(t) => t.add(term)?,
                });
            }
            total.expect("batch is non-empty")
        };
        let value = loss.item()? as f64;
        if !value.is_finite() {
            let snapshot = self.snapshot_nonfinite();
            return Err(Error::NonFinite {
                iteration: self.iteration,
                value,
                snapshot,
            });
        }
        let grads = g.backward(loss)?;
        let grads: Vec<Tensor<f32>> = bound.iter().map(|v| grads.wrt(*v)).collect();
        let mut params: Vec<&mut Tensor<f32>> = self.model.params_mut().iter_mut().map(|p| &mut p.value).collect();
        self.adam.step(&mut params, &grads)?;
        self.iteration += 1;
        Ok(StepLog {
            iteration: self.iteration,
            loss: value,
            per_objective,
            omega: omega[0].iter().map(|&v| v as f64).collect(),
            sigma,
            rho,
        })
    }

    fn snapshot_nonfinite(&self) -> Option<PathBuf> {
        let dir = self.config.out_dir.as_ref()?;
        let path = dir.join(format!("nonfinite_{}.tcnv", self.iteration));
        std::fs::create_dir_all(dir).ok()?;
        match self.checkpoint().save(&path) {
            Ok(()) => Some(path),
            Err(e) => {
                log::error!("could not write diagnostic snapshot: {e}");
                None
            }
        }
    }

    /// Sweep over the held-out set, if one is configured.
    pub fn evaluate(&self) -> Result<Option<SweepTable>> {
        let Some(eval) = &self.eval else {
            return Ok(None);
        };
        let e = &self.config.eval;
        let mut sc = SweepConfig::new(e.sigmas.clone(), e.rhos.clone(), self.config.eval_grid());
        sc.seed = e.seed;
        sc.nu = self.config.targets.nu;
        sc.blur_support = self.config.degradation.blur_support;
        sweep_eval(&self.model, &self.config.losses, &eval.images, &sc).map(Some)
    }

    /// Runs the remaining iterations, writing checkpoints and metrics to
    /// `out_dir` when set. `observe` sees every step.
    pub fn run(&mut self, mut observe: impl FnMut(&StepLog)) -> Result<TrainOutcome> {
        let cfg = self.config.clone();
        if let Some(dir) = &cfg.out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut log = Vec::with_capacity(cfg.iterations as usize);
        let mut evals = Vec::new();
        while self.iteration < cfg.iterations {
            let s = self.step()?;
            if cfg.log_every > 0 && s.iteration % cfg.log_every == 0 {
                log::info!("iter {} loss {:.5} omega {:?}", s.iteration, s.loss, s.omega);
            }
            observe(&s);
            log.push(s);
            let it = self.iteration;
            if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 {
                if let Some(dir) = &cfg.out_dir {
                    self.checkpoint().save(dir.join(format!("ckpt_{it:07}.tcnv")))?;
                }
            }
            if cfg.eval_every > 0 && it % cfg.eval_every == 0 {
                if let Some(table) = self.evaluate()? {
                    log::info!("eval at {it}:\n{}", table.to_text());
                    evals.push(EvalRecord { iteration: it, table });
                }
            }
        }
        let checkpoint = self.checkpoint();
        if let Some(dir) = &cfg.out_dir {
            checkpoint.save(dir.join("final.tcnv"))?;
            write_metrics(dir, &log, &evals)?;
        }
        Ok(TrainOutcome { checkpoint, log, evals })
    }
}

fn write_metrics(dir: &Path, log: &[StepLog], evals: &[EvalRecord]) -> Result<()> {
    use std::fmt::Write as _;
    let mut s = String::from("iteration,loss,sigma,rho,omega,per_objective\n");
    for l in log {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "{},{},{},{},{},{}", l.iteration, l.loss, l.sigma, l.rho, join(&l.omega), join(&l.per_objective));
    }
    let path = dir.join("train_log.csv");
    std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
    for e in evals {
        let path = dir.join(format!("eval_{:07}.csv", e.iteration));
        std::fs::write(&path, e.table.to_csv()).map_err(|err| Error::io(&path, err))?;
    }
    Ok(())
}

/// Loads data, trains, and returns the final checkpoint with logs.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(config.clone())?.run(|_| {})
}

/// Two traditional-conv runs with fixed one-hot `ω` at `(1,0)` and `(0,1)`,
/// sharing the seed. Interpolate the pair with [`interpolate_checkpoints`].
pub fn dni_pair(config: &TrainConfig, train_set: &Dataset) -> Result<(Checkpoint, Checkpoint)> {
    let p = config.model.p;
    if p != 2 {
        return Err(Error::arg("dni_pair", format!("needs two objectives, got {p}")));
    }
    let run = |hot: usize| -> Result<Checkpoint> {
        let mut c = config.clone();
        c.model.variant = Variant::Traditional;
        c.fixed_omega = Some((0..p).map(|i| if i == hot { 1.0 } else { 0.0 }).collect());
        c.out_dir = None;
        c.eval_every = 0;
        c.checkpoint_every = 0;
        Ok(Trainer::with_data(c, train_set.clone(), None)?.run(|_| {})?.checkpoint)
    };
    Ok((run(0)?, run(1)?))
}
