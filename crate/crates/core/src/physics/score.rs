use super::simulate::advance_bounce;
use super::world::{ActionCategory, CategoryKind, Condition, Trajectory, WorldConfig};

/// Semantic-adherence and physical-consistency scores, both in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicsScore {
    pub s_sa: f64,
    pub s_pc: f64,
}

impl PhysicsScore {
    pub fn new(s_sa: f64, s_pc: f64) -> Self {
        Self { s_sa, s_pc }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.s_sa) && (0.0..=1.0).contains(&self.s_pc)
    }
}

/// Mean of the two scores.
pub fn overall_score(ps: &PhysicsScore) -> f64 {
    (ps.s_sa + ps.s_pc) / 2.0
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared residual of the category's discrete equation of motion, written in
/// position form (`x_{k+1} − 2x_k + x_{k−1} = h²·a_k`), at every interior
/// frame `1..F-1`.
pub fn physics_residuals(traj: &Trajectory, category: &ActionCategory) -> Vec<f64> {
    let dims = traj.dims();
    let h = traj.frame_step();
    let h2 = h * h;
    let a = category.acceleration(dims);
    (1..traj.frames() - 1)
        .map(|k| {
            let (prev, cur, next) = (traj.frame(k - 1), traj.frame(k), traj.frame(k + 1));
            match category.kind {
                CategoryKind::Uniform | CategoryKind::Ballistic => (0..dims)
                    .map(|d| {
                        let r = next[d] - 2.0 * cur[d] + prev[d] - h2 * a[d];
                        r * r
                    })
                    .sum(),
                CategoryKind::DampedOscillation => (0..dims)
                    .map(|d| {
                        let r = next[d] - 2.0 * cur[d] + prev[d]
                            + h2 * category.stiffness * cur[d]
                            + h * category.damping * (cur[d] - prev[d]);
                        r * r
                    })
                    .sum(),
                CategoryKind::Bounce => bounce_residual(prev, cur, next, h, category),
            }
        })
        .collect()
}

/// A contact may sit between either pair of frames, so the frame is predicted
/// forwards from `(prev, cur)` and backwards from `(cur, next)` assuming free
/// flight on the known side; the better hypothesis is kept.
fn bounce_residual(prev: &[f64], cur: &[f64], next: &[f64], h: f64, c: &ActionCategory) -> f64 {
    let up = cur.len() - 1;
    let mut pos = cur.to_vec();
    let mut vel: Vec<f64> = cur.iter().zip(prev).map(|(x, p)| (x - p) / h).collect();
    vel[up] -= 0.5 * c.gravity * h;
    advance_bounce(&mut pos, &mut vel, h, c.gravity, c.floor, c.restitution);
    let forward = sq_dist(&pos, next);

    // Time reversal of an elastic or restituted flight under gravity.
    let mut pos = cur.to_vec();
    let mut vel: Vec<f64> = next.iter().zip(cur).map(|(n, x)| -(n - x) / h).collect();
    vel[up] -= 0.5 * c.gravity * h;
    advance_bounce(&mut pos, &mut vel, h, c.gravity, c.floor, c.restitution);
    let backward = sq_dist(&pos, prev);

    forward.min(backward)
}

/// Initial position and velocity implied by the first two frames.
pub(crate) fn implied_initial_state(traj: &Trajectory, category: &ActionCategory) -> (Vec<f64>, Vec<f64>) {
    let h = traj.frame_step();
    let (x0, x1) = (traj.frame(0), traj.frame(1));
    let dims = traj.dims();
    let mut v: Vec<f64> = x1.iter().zip(x0).map(|(b, a)| (b - a) / h).collect();
    match category.kind {
        CategoryKind::Uniform => {}
        CategoryKind::Ballistic | CategoryKind::Bounce => {
            v[dims - 1] += 0.5 * category.gravity * h;
        }
        CategoryKind::DampedOscillation => {
            for (vd, xd) in v.iter_mut().zip(x0) {
                *vd = (*vd + h * category.stiffness * xd) / (1.0 - h * category.damping);
            }
        }
    }
    (x0.to_vec(), v)
}

/// Closed-form physics judge.
///
/// `s_pc = exp(−ρ_pc · mean‖r_k‖²)` over interior frames and
/// `s_sa = exp(−ρ_sa · (‖p̂ − p‖² + ‖v̂ − v‖²))` against the condition's initial
/// state. Degenerate input scores 0 rather than failing.
pub fn score(traj: &Trajectory, condition: &Condition, world: &WorldConfig) -> PhysicsScore {
    let Ok(category) = world.category(condition.category) else {
        return PhysicsScore::new(0.0, 0.0);
    };
    if traj.frames() < 4
        || !traj.is_finite()
        || traj.dims() != condition.init_position.len()
        || traj.dims() != condition.init_velocity.len()
    {
        return PhysicsScore::new(0.0, 0.0);
    }
    let res = physics_residuals(traj, category);
    let mean = res.iter().sum::<f64>() / res.len() as f64;
    let s_pc = bounded_exp(world.rho_pc * mean);

    let (p, v) = implied_initial_state(traj, category);
    let err = sq_dist(&p, &condition.init_position) + sq_dist(&v, &condition.init_velocity);
    let s_sa = bounded_exp(world.rho_sa * err);
    PhysicsScore::new(s_sa, s_pc)
}

/// `exp(−x)` clamped into `[0, 1]`, with NaN mapped to 0.
fn bounded_exp(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        (-x.max(0.0)).exp()
    }
}
