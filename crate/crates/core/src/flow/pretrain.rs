use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::model::FlowModel;
use super::{standard_normal, TimeGrid};
use crate::error::{Error, Result};
use crate::numerics::{AdamW, CosineSchedule, GradTargets, Gradients, Momentum, Optimizer};
use crate::physics::{Condition, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Momentum,
    AdamW,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::AdamW => "adamw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "momentum" => Ok(OptimizerKind::Momentum),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub time_steps: usize,
    /// Independent `(t, x1)` draws per example per epoch.
    pub draws_per_example: usize,
    /// Fixed `(example, t, x1)` draws used to track the loss between epochs.
    pub eval_samples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            lr: 1e-2,
            lr_final: 1e-4,
            momentum: 0.9,
            optimizer: OptimizerKind::AdamW,
            time_steps: 50,
            draws_per_example: 64,
            eval_samples: 512,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.time_steps == 0 || self.eval_samples == 0 || self.draws_per_example == 0 {
            return Err(Error::Config("batch_size, time_steps, draws_per_example and eval_samples must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr_final >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("learning rates must be ≥ 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch; `None` for the initial entry.
    pub train_loss: Option<f64>,
    /// Loss on the fixed evaluation draws after the epoch.
    pub eval_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Entry 0 is the untrained model.
    pub curve: Vec<EpochLoss>,
}

impl PretrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.curve[0].eval_loss
    }

    pub fn final_loss(&self) -> f64 {
        self.curve[self.curve.len() - 1].eval_loss
    }
}

struct Prepared {
    cond: Vec<f64>,
    x0: Vec<f64>,
}

struct Draw {
    example: usize,
    t: f64,
    x1: Vec<f64>,
}

fn draw<R: Rng + ?Sized>(example: usize, grid: &TimeGrid, dim: usize, rng: &mut R) -> Draw {
    let t = grid.t(grid.sample_index(rng));
    Draw {
        example,
        t,
        x1: standard_normal(dim, rng),
    }
}

fn mean_loss(model: &FlowModel, data: &[Prepared], draws: &[Draw]) -> Result<f64> {
    let losses: Vec<f64> = draws
        .par_iter()
        .map(|d| {
            let p = &data[d.example];
            super::fm_sample_loss(model, &p.cond, &p.x0, &d.x1, d.t, false)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Flow-matching pretraining of the backbone (the adapter, if any, is ignored).
///
/// Timesteps are drawn uniformly from the grid `{k/T}`. Gradients within a
/// batch are computed in parallel and reduced in index order, so runs are
/// reproducible for a given `rng` state.
pub fn pretrain<R: Rng + ?Sized>(
    model: &mut FlowModel,
    dataset: &[(Condition, Trajectory)],
    config: &PretrainConfig,
    rng: &mut R,
) -> Result<PretrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Precondition("pretraining dataset is empty".into()));
    }
    let grid = TimeGrid::new(config.time_steps)?;
    let dim = model.dims.flow_len();
    let data: Vec<Prepared> = dataset
        .iter()
        .map(|(c, t)| Prepared {
            cond: model.encode_condition(c),
            x0: model.to_flow(t),
        })
        .collect();
    let eval: Vec<Draw> = (0..config.eval_samples)
        .map(|i| draw(i % data.len(), &grid, dim, rng))
        .collect();

    let mut curve = vec![EpochLoss {
        epoch: 0,
        train_loss: None,
        eval_loss: mean_loss(model, &data, &eval)?,
    }];
    let per_epoch = data.len() * config.draws_per_example;
    let batches_per_epoch = per_epoch.div_ceil(config.batch_size);
    let schedule = CosineSchedule {
        lr_init: config.lr,
        lr_final: config.lr_final,
        total_steps: config.epochs * batches_per_epoch,
    };
    let mut momentum = Momentum::new(config.momentum);
    let mut adamw = AdamW::new(0.9, 0.999, 1e-8, 0.0);
    let mut order: Vec<usize> = (0..per_epoch).map(|i| i % data.len()).collect();
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let draws: Vec<Draw> = chunk.iter().map(|&i| draw(i, &grid, dim, rng)).collect();
            let results: Vec<(f64, Gradients)> = draws
                .par_iter()
                .map(|d| {
                    let p = &data[d.example];
                    model.loss_grad(&p.cond, &p.x0, &d.x1, d.t, false, GradTargets::BACKBONE)
                })
                .collect::<Result<_>>()
                .map_err(|e| diverged(epoch, step, e))?;
            let mut iter = results.into_iter();
            let (mut loss, mut grads) = iter.next().expect("non-empty batch");
            for (l, g) in iter {
                loss += l;
                grads.add_scaled(1.0, &g);
            }
            let n = chunk.len() as f64;
            grads.scale(1.0 / n);
            loss /= n;
            if !loss.is_finite() {
                return Err(Error::numeric(format!("pretraining loss at epoch {epoch}, step {step}")));
            }
            let g = grads.backbone.expect("backbone gradients requested");
            let lr = schedule.lr(step);
            match config.optimizer {
                OptimizerKind::Momentum => momentum.step(&mut model.backbone, &g, lr),
                OptimizerKind::AdamW => adamw.step(&mut model.backbone, &g, lr),
            }
            epoch_loss += loss * n;
            step += 1;
        }
        let eval_loss = mean_loss(model, &data, &eval).map_err(|e| diverged(epoch, step, e))?;
        curve.push(EpochLoss {
            epoch,
            train_loss: Some(epoch_loss / per_epoch as f64),
            eval_loss,
        });
    }
    Ok(PretrainReport { curve })
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::Numeric { path } => Error::numeric(format!("pretraining diverged at epoch {epoch}, step {step}: {path}")),
        other => other,
    }
}
