//! Groupwise preference optimization of the adapter against the frozen
//! backbone.
//!
//! Each group pairs one simulated (physically exact) winner with `m` model
//! samples as losers. A training item picks one loser `j` and one timestep
//! `t_k`, evaluates the flow-matching loss of winner and loser with the
//! adapter on (trained model) and off (reference), and applies
//!
//! ```text
//! L = γ_j · softplus(α_j·β·T·[(ℓθʷ − ℓψʷ) − (ℓθˡ − ℓψˡ)])
//! ```
//!
//! with `(α_j, γ_j)` derived from the loser's physics scores.

mod groups;
mod train;
mod verify;

pub use groups::{build_groups, decode_groups, encode_groups, read_groups, write_groups, GroupBuild, PreferenceGroup};
pub use train::{
    category_scores, delta_losses, draw_items, gdpo_step, group_weights, item_loss_grad, mean_margin, objective,
    train, StepItem, StepMetrics, TrainRecord,
};
pub use verify::{
    log_sum_exp, softplus, verify_bound_chain, verify_product_inequality, verify_proof_steps, BoundChainReport,
    BoundInstance, ChainValues, InequalityCheck, ProductInequalityReport, ProofStepsReport,
};

use crate::error::{Error, Result};
use verify::sigmoid;
use crate::physics::PhysicsScore;

/// Physics difficulty `v = 1 − (s_sa + s_pc)/2`.
pub fn difficulty(ps: &PhysicsScore) -> f64 {
    1.0 - (ps.s_sa + ps.s_pc) / 2.0
}

/// Parameters mapping difficulty to loss weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardSchedule {
    pub alpha_min: f64,
    pub kappa_gamma: f64,
    pub b_gamma: f64,
    pub lambda: f64,
    pub kappa_alpha: f64,
    pub b_alpha: f64,
}

impl Default for RewardSchedule {
    fn default() -> Self {
        Self {
            alpha_min: 0.5,
            kappa_gamma: 2.0,
            b_gamma: 0.4,
            lambda: 0.6,
            kappa_alpha: 5.0,
            b_alpha: 0.5,
        }
    }
}

impl RewardSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha_min > 0.0
            && self.alpha_min <= 1.0
            && self.lambda >= 0.0
            && self.lambda.is_finite()
            && self.kappa_gamma > 0.0
            && self.kappa_gamma.is_finite()
            && self.kappa_alpha > 0.0
            && self.kappa_alpha.is_finite()
            && (0.0..=1.0).contains(&self.b_gamma)
            && (0.0..=1.0).contains(&self.b_alpha);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid reward schedule {self:?}")))
        }
    }
}

/// Loss weights of one loser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgrWeights {
    pub v: f64,
    pub alpha: f64,
    pub gamma: f64,
}

/// `γ = (1 + λ·σ(κ_γ(v − b_γ)))/α_min` and
/// `α = clamp(α_min + (1 − α_min)·tanh(κ_α(v − b_α)), α_min, 1)`.
pub fn pgr_weights(v: f64, schedule: &RewardSchedule) -> Result<PgrWeights> {
    schedule.validate()?;
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Precondition(format!("difficulty {v} outside [0, 1]")));
    }
    let s = schedule;
    let gamma = (1.0 + s.lambda * sigmoid(s.kappa_gamma * (v - s.b_gamma))) / s.alpha_min;
    let raw = s.alpha_min + (1.0 - s.alpha_min) * (s.kappa_alpha * (v - s.b_alpha)).tanh();
    let alpha = raw.clamp(s.alpha_min, 1.0);
    Ok(PgrWeights { v, alpha, gamma })
}

/// The four flow-matching losses of one training item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaLosses {
    pub l_theta_w: f64,
    pub l_psi_w: f64,
    pub l_theta_l: f64,
    pub l_psi_l: f64,
    /// Timestep index `k` (`t = k/T`).
    pub t_index: usize,
    pub loser: usize,
    pub shared_noise: bool,
}

impl DeltaLosses {
    /// `(ℓθʷ − ℓψʷ) − (ℓθˡ − ℓψˡ)`.
    pub fn bracket(&self) -> f64 {
        (self.l_theta_w - self.l_psi_w) - (self.l_theta_l - self.l_psi_l)
    }

    /// Positive when the adapter fits the winner better and the loser worse
    /// than the reference does.
    pub fn margin(&self) -> f64 {
        -self.bracket()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoHyper {
    pub beta: f64,
    pub time_steps: usize,
    /// Losers per group.
    pub m: usize,
    pub steps: usize,
    /// Groups per step.
    pub batch: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    /// Use one noise draw for winner and loser.
    pub shared_noise: bool,
    /// Steps between evaluation hook calls; 0 disables periodic evaluation.
    pub eval_every: usize,
    /// Consecutive rejected steps tolerated before aborting.
    pub max_rejections: usize,
}

impl Default for DpoHyper {
    fn default() -> Self {
        Self {
            beta: 0.05,
            time_steps: 50,
            m: 4,
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            lr_final: 1e-4,
            weight_decay: 0.01,
            shared_noise: false,
            eval_every: 0,
            max_rejections: 10,
        }
    }
}

impl DpoHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) || self.time_steps == 0 {
            return Err(Error::Config("beta must be positive and time_steps at least 1".into()));
        }
        if self.m == 0 || self.batch == 0 || self.max_rejections == 0 {
            return Err(Error::Config("m, batch and max_rejections must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr_final >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates and weight decay must be ≥ 0".into()));
        }
        Ok(())
    }

    /// `β·T`.
    pub fn beta_t(&self) -> f64 {
        self.beta * self.time_steps as f64
    }
}

/// `γ·softplus(α·β·T·bracket)`, i.e. `−γ·log σ(−α·β·T·bracket)`.
pub fn gdpo_loss(d: &DeltaLosses, w: &PgrWeights, hyper: &DpoHyper) -> f64 {
    w.gamma * softplus(w.alpha * hyper.beta_t() * d.bracket())
}

/// Derivative of [`gdpo_loss`] with respect to the bracket.
pub(crate) fn gdpo_loss_slope(d: &DeltaLosses, w: &PgrWeights, hyper: &DpoHyper) -> f64 {
    let scale = w.alpha * hyper.beta_t();
    w.gamma * scale * sigmoid(scale * d.bracket())
}
