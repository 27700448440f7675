use rand::Rng;

use super::{sample_flow, standard_normal, VelocityField};
use crate::error::{ensure_len, Error, Result};
use crate::numerics::{backward, forward, forward_tape, GradTargets, Gradients, LoraAdapter, MlpParams};
use crate::physics::{Condition, Trajectory, WorldConfig};
use crate::rng::StreamRng;

/// Number of time features: raw `t` plus four sine/cosine pairs.
pub const TIME_FEATURES: usize = 9;

/// `[t, sin(πt), cos(πt), sin(2πt), cos(2πt), …, sin(8πt), cos(8πt)]`
pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let mut out = [0.0; TIME_FEATURES];
    out[0] = t;
    for i in 0..4 {
        let w = std::f64::consts::PI * f64::from(1u32 << i);
        out[1 + 2 * i] = (w * t).sin();
        out[2 + 2 * i] = (w * t).cos();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowDims {
    pub frames: usize,
    pub dims: usize,
    pub categories: usize,
}

impl FlowDims {
    pub fn of(world: &WorldConfig) -> Self {
        Self {
            frames: world.frames,
            dims: world.dims,
            categories: world.num_categories(),
        }
    }

    pub fn flow_len(&self) -> usize {
        self.frames * self.dims
    }

    pub fn condition_len(&self) -> usize {
        self.categories + 2 * self.dims
    }

    pub fn input_len(&self) -> usize {
        self.flow_len() + TIME_FEATURES + self.condition_len()
    }
}

/// Per-coordinate standardization of flattened trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(len: usize) -> Self {
        Self {
            mean: vec![0.0; len],
            std: vec![1.0; len],
        }
    }

    /// Mean and standard deviation of every coordinate; near-constant
    /// coordinates keep unit scale.
    pub fn fit<'a, I>(trajectories: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Trajectory>,
    {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for t in trajectories {
            let flat = t.flat();
            if sum.is_empty() {
                sum = vec![0.0; flat.len()];
                sq = vec![0.0; flat.len()];
            }
            ensure_len("normalizer input", sum.len(), flat.len())?;
            for ((s, q), v) in sum.iter_mut().zip(sq.iter_mut()).zip(flat) {
                *s += v;
                *q += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::Precondition("cannot fit a normalizer on no data".into()));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / nf - m * m).max(0.0);
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// Architecture and adapter hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    /// Number of hidden layers.
    pub n_layers: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub lora_init_std: f64,
    /// Euler steps used for sampling and the DPO time grid.
    pub time_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            n_layers: 2,
            lora_rank: 4,
            lora_scale: 1.0,
            lora_init_std: 0.02,
            time_steps: 50,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.n_layers == 0 {
            return Err(Error::Config("hidden_dim and n_layers must be at least 1".into()));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be at least 1".into()));
        }
        if !(self.lora_scale > 0.0) || !(self.lora_init_std >= 0.0) {
            return Err(Error::Config("lora_scale must be positive and lora_init_std non-negative".into()));
        }
        if self.time_steps == 0 {
            return Err(Error::Config("time_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Frozen backbone (the reference) plus an optional low-rank adapter (the
/// trained model). Both are evaluated from the same weights by toggling the
/// adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub dims: FlowDims,
    pub backbone: MlpParams,
    pub adapter: Option<LoraAdapter>,
    pub normalizer: Normalizer,
    pub frame_step: f64,
    pub pos_bound: f64,
    pub vel_bound: f64,
    /// Seed the backbone was initialised from (provenance only).
    pub seed: u64,
}

impl FlowModel {
    pub fn new<R: Rng + ?Sized>(
        world: &WorldConfig,
        config: &ModelConfig,
        normalizer: Normalizer,
        seed: u64,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let dims = FlowDims::of(world);
        ensure_len("normalizer", dims.flow_len(), normalizer.mean.len())?;
        let backbone = MlpParams::init(dims.input_len(), config.hidden_dim, config.n_layers, dims.flow_len(), rng);
        Ok(Self {
            dims,
            backbone,
            adapter: None,
            normalizer,
            frame_step: world.frame_step,
            pos_bound: world.pos_bound,
            vel_bound: world.vel_bound,
            seed,
        })
    }

    /// Attaches a fresh adapter: `down ~ N(0, std²)`, `up = 0`, so the adapted
    /// model starts out identical to the backbone.
    pub fn attach_adapter<R: Rng + ?Sized>(&mut self, config: &ModelConfig, rng: &mut R) -> Result<()> {
        self.adapter = Some(LoraAdapter::init(
            &self.backbone,
            config.lora_rank,
            config.lora_scale,
            config.lora_init_std,
            rng,
        )?);
        Ok(())
    }

    pub fn encode_condition(&self, c: &Condition) -> Vec<f64> {
        c.encoding(self.dims.categories, self.pos_bound, self.vel_bound)
    }

    pub fn to_flow(&self, t: &Trajectory) -> Vec<f64> {
        self.normalizer.normalize(t.flat())
    }

    pub fn from_flow(&self, z: &[f64]) -> Result<Trajectory> {
        Trajectory::new(self.dims.frames, self.dims.dims, self.frame_step, self.normalizer.denormalize(z))
    }

    fn network_input(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>> {
        ensure_len("flow state", self.dims.flow_len(), x.len())?;
        ensure_len("condition encoding", self.dims.condition_len(), cond.len())?;
        let mut input = Vec::with_capacity(self.dims.input_len());
        input.extend_from_slice(x);
        input.extend_from_slice(&time_features(t));
        input.extend_from_slice(cond);
        Ok(input)
    }

    fn adapter_for(&self, adapter_on: bool) -> Option<&LoraAdapter> {
        if adapter_on {
            self.adapter.as_ref()
        } else {
            None
        }
    }

    /// Flow-matching loss and its gradient with respect to `targets`.
    pub fn loss_grad(
        &self,
        cond: &[f64],
        x0: &[f64],
        x1: &[f64],
        t: f64,
        adapter_on: bool,
        targets: GradTargets,
    ) -> Result<(f64, Gradients)> {
        let xt = super::interpolate(x0, x1, t)?;
        let target = super::oracle_velocity(x0, x1)?;
        let input = self.network_input(&xt, t, cond)?;
        let adapter = self.adapter_for(adapter_on);
        let tape = forward_tape(&self.backbone, adapter, &input)?;
        let diff: Vec<f64> = tape.output().iter().zip(&target).map(|(v, u)| v - u).collect();
        let loss: f64 = diff.iter().map(|d| d * d).sum();
        if !loss.is_finite() {
            return Err(Error::numeric(format!("flow-matching loss at t = {t}")));
        }
        let grad_out: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
        let grads = backward(&self.backbone, adapter, &tape, &grad_out, targets)?;
        Ok((loss, grads))
    }

    /// Draws a trajectory: noise at `t = 1`, `steps` Euler steps, de-standardize.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        condition: &Condition,
        steps: usize,
        rng: &mut R,
        adapter_on: bool,
    ) -> Result<Trajectory> {
        let x1 = standard_normal(self.dims.flow_len(), rng);
        let cond = self.encode_condition(condition);
        let z = sample_flow(self, &cond, &x1, steps, adapter_on)?;
        self.from_flow(&z)
    }

    pub fn trainable_adapter_params(&self) -> usize {
        use crate::numerics::Params;
        self.adapter.as_ref().map_or(0, |a| a.num_params())
    }
}

impl VelocityField for FlowModel {
    fn flow_dim(&self) -> usize {
        self.dims.flow_len()
    }

    fn velocity(&self, x: &[f64], t: f64, cond: &[f64], adapter_on: bool) -> Result<Vec<f64>> {
        let input = self.network_input(x, t, cond)?;
        forward(&self.backbone, self.adapter_for(adapter_on), &input)
    }
}

/// Produces a clip for a condition.
pub trait Generator: Sync {
    fn generate(&self, condition: &Condition, rng: &mut StreamRng) -> Result<Trajectory>;
}

/// A [`FlowModel`] sampling with a fixed step count and adapter setting.
#[derive(Debug, Clone, Copy)]
pub struct FlowSampler<'a> {
    pub model: &'a FlowModel,
    pub steps: usize,
    pub adapter_on: bool,
}

impl Generator for FlowSampler<'_> {
    fn generate(&self, condition: &Condition, rng: &mut StreamRng) -> Result<Trajectory> {
        self.model.sample(condition, self.steps, rng, self.adapter_on)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::fm_sample_loss;
    use crate::numerics::Params;
    use crate::rng::seeded;

    fn small() -> (WorldConfig, FlowModel) {
        let world = WorldConfig::default();
        let cfg = ModelConfig::default();
        let mut m = FlowModel::new(&world, &cfg, Normalizer::identity(32), 1, &mut seeded(1)).unwrap();
        m.attach_adapter(&cfg, &mut seeded(2)).unwrap();
        (world, m)
    }

    #[test]
    fn dimensions_and_parameter_budget() {
        let (_, m) = small();
        assert_eq!(m.dims.input_len(), 32 + 9 + 8);
        assert_eq!(m.backbone.in_dim(), 49);
        assert_eq!(m.backbone.out_dim(), 32);
        assert_eq!(m.backbone.num_params(), 49 * 128 + 128 + 128 * 128 + 128 + 128 * 32 + 32);
        assert_eq!(m.trainable_adapter_params(), 4 * 49 + 128 * 4 + 4 * 128 + 128 * 4 + 4 * 128 + 32 * 4);
    }

    #[test]
    fn zero_adapter_matches_reference_loss() {
        let (world, m) = small();
        let mut rng = seeded(3);
        let c = Condition {
            category: 2,
            init_position: vec![0.1, 0.4],
            init_velocity: vec![-0.5, 0.2],
        };
        let cond = c.encode_in(&world);
        let x0 = standard_normal(32, &mut rng);
        let x1 = standard_normal(32, &mut rng);
        for t in [0.02, 0.5, 1.0] {
            let on = fm_sample_loss(&m, &cond, &x0, &x1, t, true).unwrap();
            let off = fm_sample_loss(&m, &cond, &x0, &x1, t, false).unwrap();
            assert_eq!(on.to_bits(), off.to_bits());
        }
    }

    #[test]
    fn normalizer_round_trip() {
        let a = Trajectory::new(4, 1, 0.1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let b = Trajectory::new(4, 1, 0.1, vec![2.0, 1.0, 4.0, 3.0]).unwrap();
        let n = Normalizer::fit([&a, &b]).unwrap();
        assert_eq!(n.mean, vec![1.0, 1.0, 3.0, 3.0]);
        assert_eq!(n.std, vec![1.0, 1.0, 1.0, 1.0]);
        let z = n.normalize(b.flat());
        assert_eq!(z, vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(n.denormalize(&z), b.flat());
        assert!(Normalizer::fit(std::iter::empty()).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let (_, m) = small();
        let c = Condition {
            category: 0,
            init_position: vec![0.0, 0.0],
            init_velocity: vec![0.5, 0.5],
        };
        let a = m.sample(&c, 10, &mut seeded(4), true).unwrap();
        let b = m.sample(&c, 10, &mut seeded(4), true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn time_feature_layout() {
        let f = time_features(0.5);
        assert_eq!(f[0], 0.5);
        assert!((f[1] - 1.0).abs() < 1e-15);
        assert!(f[2].abs() < 1e-15);
    }
}
