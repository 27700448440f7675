//! Executable checks of the inequalities that turn the groupwise
//! Plackett–Luce objective into the per-pair training loss.

use rand::Rng;

use crate::error::{Error, Result};

/// `1 / (1 + e^{−x})` without overflow.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow or cancellation.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln Σ e^{x_i}`; `−∞` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln(1 + Σ e^{x_i})`. A single term goes through [`softplus`] so the
/// one-loser case matches it bit for bit.
fn log_one_plus_sum_exp(xs: &[f64]) -> f64 {
    match xs {
        [x] => softplus(*x),
        _ => {
            let m = xs.iter().copied().fold(0.0, f64::max);
            m + ((-m).exp() + xs.iter().map(|x| (x - m).exp()).sum::<f64>()).ln()
        }
    }
}

const LOG_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ProductInequalityReport {
    pub holds: bool,
    /// `ln Σ_j e^{x_j}`.
    pub log_lhs: f64,
    /// `Σ_j γ_j ln(1 + e^{α_j x_j})`.
    pub log_rhs: f64,
    /// Whether the stronger `ln(1 + Σ_j e^{x_j}) ≤ log_rhs` also holds.
    pub holds_with_unit: bool,
    /// Set when the inputs violate `0 < α ≤ 1`, `γ ≥ 1/α`; nothing is checked then.
    pub rejected: Option<String>,
}

/// Checks `Σ_j e^{x_j} ≤ Π_j (1 + e^{α_j x_j})^{γ_j}` in log space with slack
/// `1e-9`.
pub fn verify_product_inequality(x: &[f64], alphas: &[f64], gammas: &[f64]) -> ProductInequalityReport {
    let reject = |why: String| ProductInequalityReport {
        holds: false,
        log_lhs: f64::NAN,
        log_rhs: f64::NAN,
        holds_with_unit: false,
        rejected: Some(why),
    };
    if x.is_empty() || x.len() != alphas.len() || x.len() != gammas.len() {
        return reject(format!(
            "need equal non-empty lengths, got {}, {}, {}",
            x.len(),
            alphas.len(),
            gammas.len()
        ));
    }
    for (j, (&a, &g)) in alphas.iter().zip(gammas).enumerate() {
        if !(a > 0.0 && a <= 1.0) || !(g >= 1.0 / a) || !x[j].is_finite() {
            return reject(format!("term {j}: x = {}, α = {a}, γ = {g}", x[j]));
        }
    }
    let log_lhs = log_sum_exp(x);
    let log_rhs: f64 = x
        .iter()
        .zip(alphas)
        .zip(gammas)
        .map(|((&xj, &a), &g)| g * softplus(a * xj))
        .sum();
    ProductInequalityReport {
        holds: log_lhs <= log_rhs + LOG_SLACK,
        log_lhs,
        log_rhs,
        holds_with_unit: log_one_plus_sum_exp(x) <= log_rhs + LOG_SLACK,
        rejected: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InequalityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl InequalityCheck {
    fn new(lhs: f64, rhs: f64) -> Self {
        let tol = 1e-12 * lhs.abs().max(rhs.abs()).max(1.0);
        Self {
            lhs,
            rhs,
            holds: lhs <= rhs + tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProofStepsReport {
    /// `(u + v)^α ≤ u^α + v^α`.
    pub subadditivity: InequalityCheck,
    /// `1 + e^x ≤ (1 + e^{αx})^{1/α}` at `x = ln v`.
    pub softplus_power: InequalityCheck,
    pub holds: bool,
}

/// Evaluates the two intermediate inequalities behind the product bound.
pub fn verify_proof_steps(u: f64, v: f64, alpha: f64) -> Result<ProofStepsReport> {
    if !(u >= 0.0 && v >= 0.0 && u.is_finite() && v.is_finite()) || !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Precondition(format!(
            "need u, v ≥ 0 and 0 < α ≤ 1, got u = {u}, v = {v}, α = {alpha}"
        )));
    }
    let subadditivity = InequalityCheck::new((u + v).powf(alpha), u.powf(alpha) + v.powf(alpha));
    // With e^x = v: 1 + v ≤ (1 + v^α)^{1/α}, compared in log space.
    let softplus_power = InequalityCheck::new(v.ln_1p(), v.powf(alpha).ln_1p() / alpha);
    Ok(ProofStepsReport {
        subadditivity,
        softplus_power,
        holds: subadditivity.holds && softplus_power.holds,
    })
}

/// Per-timestep log-ratio tables for a single group.
///
/// `delta_w[k]` and `delta_l[j][k]` play the role of `Δ_k` (policy minus
/// reference log-likelihood, higher is better) so the exponent of loser `j`
/// at timestep `k` is `β·T·(Δ_k^{l_j} − Δ_k^w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundInstance {
    pub delta_w: Vec<f64>,
    pub delta_l: Vec<Vec<f64>>,
    pub alphas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub beta: f64,
}

impl BoundInstance {
    pub fn steps(&self) -> usize {
        self.delta_w.len()
    }

    pub fn losers(&self) -> usize {
        self.delta_l.len()
    }

    fn validate(&self) -> Result<()> {
        let t = self.steps();
        let m = self.losers();
        if t == 0 || m == 0 {
            return Err(Error::Precondition("bound instance needs T ≥ 1 and m ≥ 1".into()));
        }
        if self.delta_l.iter().any(|row| row.len() != t) {
            return Err(Error::Precondition("every loser table needs T entries".into()));
        }
        if self.alphas.len() != m || self.gammas.len() != m {
            return Err(Error::Precondition("one (α, γ) pair per loser required".into()));
        }
        if self.alphas.iter().zip(&self.gammas).any(|(&a, &g)| !(a > 0.0 && a <= 1.0 && g >= 1.0 / a)) {
            return Err(Error::Precondition("weights must satisfy 0 < α ≤ 1 and α·γ ≥ 1".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Precondition("β must be positive".into()));
        }
        Ok(())
    }

    /// `β·T·(Δ_k^{l_j} − Δ_k^w)`.
    fn exponent(&self, j: usize, k: usize) -> f64 {
        self.beta * self.steps() as f64 * (self.delta_l[j][k] - self.delta_w[k])
    }

    /// The per-pair training loss for loser `j` at timestep `k`.
    pub fn pair_loss(&self, j: usize, k: usize) -> f64 {
        self.gammas[j] * softplus(self.alphas[j] * self.exponent(j, k))
    }
}

/// The three objectives of the bound chain for one choice of denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainValues {
    /// Exact groupwise loss over full trajectories.
    pub groupwise: f64,
    /// Expectation over `k` of the per-timestep groupwise loss.
    pub per_timestep: f64,
    /// Expectation over `k` of `Σ_j γ_j·softplus(α_j·x_{kj})`.
    pub weighted_pairs: f64,
    pub holds: bool,
}

impl ChainValues {
    fn new(groupwise: f64, per_timestep: f64, weighted_pairs: f64) -> Self {
        Self {
            groupwise,
            per_timestep,
            weighted_pairs,
            holds: groupwise <= per_timestep + LOG_SLACK && per_timestep <= weighted_pairs + LOG_SLACK,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundChainReport {
    /// Denominator over losers only: `ln Σ_j e^{x_j}`.
    pub losers_only: ChainValues,
    /// Denominator including the winner: `ln(1 + Σ_j e^{x_j})`.
    pub with_winner: ChainValues,
    /// Exact mean of the per-pair loss over uniform `(k, j)`; equals
    /// `weighted_pairs / m`.
    pub pair_mean: f64,
    /// Monte Carlo estimate of `pair_mean` and its standard error.
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub holds: bool,
}

/// Evaluates the bound chain on a tiny instance exactly and estimates the
/// single-pair objective by sampling `n_mc` uniform `(k, j)` pairs.
pub fn verify_bound_chain<R: Rng + ?Sized>(
    instance: &BoundInstance,
    n_mc: usize,
    rng: &mut R,
) -> Result<BoundChainReport> {
    instance.validate()?;
    let t = instance.steps();
    let m = instance.losers();
    let tf = t as f64;

    let full: Vec<f64> = (0..m)
        .map(|j| instance.beta * (0..t).map(|k| instance.delta_l[j][k] - instance.delta_w[k]).sum::<f64>())
        .collect();
    let per_k: Vec<Vec<f64>> = (0..t).map(|k| (0..m).map(|j| instance.exponent(j, k)).collect()).collect();
    let pairs: f64 = (0..t)
        .map(|k| (0..m).map(|j| instance.pair_loss(j, k)).sum::<f64>())
        .sum::<f64>()
        / tf;

    let losers_only = ChainValues::new(
        log_sum_exp(&full),
        per_k.iter().map(|xs| log_sum_exp(xs)).sum::<f64>() / tf,
        pairs,
    );
    let with_winner = ChainValues::new(
        log_one_plus_sum_exp(&full),
        per_k.iter().map(|xs| log_one_plus_sum_exp(xs)).sum::<f64>() / tf,
        pairs,
    );

    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n_mc {
        let k = rng.random_range(0..t);
        let j = rng.random_range(0..m);
        let l = instance.pair_loss(j, k);
        sum += l;
        sq += l * l;
    }
    let (mc_mean, mc_stderr) = if n_mc > 0 {
        let n = n_mc as f64;
        let mean = sum / n;
        let var = if n_mc > 1 { (sq - n * mean * mean).max(0.0) / (n - 1.0) } else { 0.0 };
        (mean, (var / n).sqrt())
    } else {
        (f64::NAN, f64::NAN)
    };

    Ok(BoundChainReport {
        holds: losers_only.holds && with_winner.holds,
        losers_only,
        with_winner,
        pair_mean: pairs / m as f64,
        mc_mean,
        mc_stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use std::f64::consts::LN_2;

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(0.0), LN_2);
        assert!((softplus(-1.0) - 0.313_261_687_518_222_83).abs() < 1e-16);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((sigmoid(-800.0)).is_finite() && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn product_inequality_examples() {
        let r = verify_product_inequality(&[0.0], &[1.0], &[1.0]);
        assert!(r.holds && r.rejected.is_none());
        assert!((r.log_lhs - 0.0).abs() < 1e-15 && (r.log_rhs - LN_2).abs() < 1e-15);
        let r = verify_product_inequality(&[0.0, 0.0], &[1.0, 1.0], &[1.0, 1.0]);
        assert!((r.log_lhs - 2f64.ln()).abs() < 1e-15 && (r.log_rhs - 4f64.ln()).abs() < 1e-15);
        let r = verify_product_inequality(&[10.0], &[1.0], &[1.0]);
        assert!(r.holds && r.log_rhs - r.log_lhs < 1e-4);
        let r = verify_product_inequality(&[1.0], &[0.5], &[1.0]);
        assert!(r.rejected.is_some() && !r.holds);
    }

    #[test]
    fn proof_step_examples() {
        let r = verify_proof_steps(1.0, 1.0, 0.5).unwrap();
        assert!((r.subadditivity.lhs - 2f64.sqrt()).abs() < 1e-15 && r.subadditivity.rhs == 2.0);
        assert!(r.holds);
        let r = verify_proof_steps(0.7, 2.5, 1.0).unwrap();
        assert!((r.subadditivity.lhs - r.subadditivity.rhs).abs() < 1e-15);
        assert!((r.softplus_power.lhs - r.softplus_power.rhs).abs() < 1e-15);
        let r = verify_proof_steps(0.0, 3.0, 0.3).unwrap();
        assert!((r.subadditivity.lhs - r.subadditivity.rhs).abs() < 1e-12);
        assert!(verify_proof_steps(-1.0, 1.0, 0.5).is_err());
        assert!(verify_proof_steps(1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn zero_tables_give_hand_values() {
        let inst = BoundInstance {
            delta_w: vec![0.0; 3],
            delta_l: vec![vec![0.0; 3]; 2],
            alphas: vec![1.0; 2],
            gammas: vec![1.0; 2],
            beta: 0.7,
        };
        let r = verify_bound_chain(&inst, 0, &mut seeded(0)).unwrap();
        assert!((r.losers_only.groupwise - LN_2).abs() < 1e-15);
        assert!((r.losers_only.per_timestep - LN_2).abs() < 1e-15);
        assert!((r.losers_only.weighted_pairs - 2.0 * LN_2).abs() < 1e-15);
        assert!((r.with_winner.groupwise - 3f64.ln()).abs() < 1e-15);
        assert!(r.holds);
    }

    #[test]
    fn single_loser_collapses_with_winner_denominator() {
        let inst = BoundInstance {
            delta_w: vec![0.3, -1.2, 2.0, 0.1],
            delta_l: vec![vec![-0.5, 0.4, 1.1, 3.0]],
            alphas: vec![1.0],
            gammas: vec![1.0],
            beta: 0.4,
        };
        let r = verify_bound_chain(&inst, 0, &mut seeded(0)).unwrap();
        assert_eq!(r.with_winner.per_timestep, r.with_winner.weighted_pairs);
        // Without the winner term the per-timestep value is strictly smaller.
        assert!(r.losers_only.per_timestep < r.losers_only.weighted_pairs);
    }

    #[test]
    fn monte_carlo_tracks_pair_mean() {
        let inst = BoundInstance {
            delta_w: vec![0.3, -1.2, 2.0],
            delta_l: vec![vec![-0.5, 0.4, 1.1], vec![2.0, -2.0, 0.0]],
            alphas: vec![0.6, 1.0],
            gammas: vec![2.0, 1.0],
            beta: 0.5,
        };
        let r = verify_bound_chain(&inst, 20_000, &mut seeded(4)).unwrap();
        assert!((r.mc_mean - r.pair_mean).abs() < 3.0 * r.mc_stderr + 1e-12);
        assert!((r.pair_mean * 2.0 - r.losers_only.weighted_pairs).abs() < 1e-12);
    }
}
