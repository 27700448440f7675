//! Conditional rectified-flow model over flattened trajectories.
//!
//! Data `x0` (a standardized trajectory) and noise `x1 ~ N(0, I)` are joined by
//! the straight path `x_t = (1 − t)·x0 + t·x1`, whose velocity `x1 − x0` the
//! network regresses. Sampling integrates the learned field from `t = 1` back
//! to `t = 0` with Euler steps.

mod checkpoint;
mod model;
mod pretrain;

pub use checkpoint::{
    backbone_checksum, decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_VERSION,
};
pub use model::{
    time_features, FlowDims, FlowModel, FlowSampler, Generator, ModelConfig, Normalizer, TIME_FEATURES,
};
pub use pretrain::{pretrain, EpochLoss, OptimizerKind, PretrainConfig, PretrainReport};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_len, Error, Result};

/// Anything that maps `(x_t, t, condition)` to a velocity.
pub trait VelocityField {
    fn flow_dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64, cond: &[f64], adapter_on: bool) -> Result<Vec<f64>>;
}

/// Discrete time grid `t_k = k/T`, `k = 1..=T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeGrid {
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        Ok(Self { steps })
    }

    pub fn h(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// `t_k` for `k ∈ 1..=T`.
    pub fn t(&self, k: usize) -> f64 {
        k as f64 / self.steps as f64
    }

    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(1..=self.steps)
    }
}

/// `(1 − t)·x0 + t·x1`
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    ensure_len("interpolate", x0.len(), x1.len())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Precondition(format!("t = {t} outside [0, 1]")));
    }
    Ok(x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect())
}

/// `x1 − x0`, the velocity of the straight path at every `t`.
pub fn oracle_velocity(x0: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
    ensure_len("oracle_velocity", x0.len(), x1.len())?;
    Ok(x1.iter().zip(x0).map(|(b, a)| b - a).collect())
}

pub fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Per-sample flow-matching loss `‖v(x_t, t, c) − (x1 − x0)‖²`.
pub fn fm_sample_loss<V: VelocityField + ?Sized>(
    field: &V,
    cond: &[f64],
    x0: &[f64],
    x1: &[f64],
    t: f64,
    adapter_on: bool,
) -> Result<f64> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Precondition(format!("t = {t} outside (0, 1]")));
    }
    let xt = interpolate(x0, x1, t)?;
    let target = oracle_velocity(x0, x1)?;
    let v = field.velocity(&xt, t, cond, adapter_on)?;
    ensure_len("velocity", target.len(), v.len())?;
    let loss: f64 = v.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
    if !loss.is_finite() {
        return Err(Error::numeric(format!("flow-matching loss at t = {t}")));
    }
    Ok(loss)
}

/// Euler integration from `t = 1` (state `x1`) down to `t = 0`:
/// `x ← x − h·v(x, t)`, `t = T/T, …, 1/T`.
pub fn sample_flow<V: VelocityField + ?Sized>(
    field: &V,
    cond: &[f64],
    x1: &[f64],
    steps: usize,
    adapter_on: bool,
) -> Result<Vec<f64>> {
    let grid = TimeGrid::new(steps)?;
    ensure_len("sampler noise", field.flow_dim(), x1.len())?;
    let h = grid.h();
    let mut x = x1.to_vec();
    for k in (1..=steps).rev() {
        let v = field.velocity(&x, grid.t(k), cond, adapter_on)?;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi -= h * vi;
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("sampler step k = {k}, coordinate {i}")));
        }
    }
    Ok(x)
}
