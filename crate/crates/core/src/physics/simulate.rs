use super::world::{ActionCategory, CategoryKind, Trajectory};
use crate::error::{ensure_len, Error, Result};

/// Positions plus the exact per-frame velocities that produced them.
#[derive(Debug, Clone)]
pub struct SimulatedStates {
    pub trajectory: Trajectory,
    /// `frames × dims`, row-major like the trajectory.
    pub velocities: Vec<f64>,
}

const MAX_CONTACTS_PER_STEP: usize = 64;

/// Advances a bouncing body by `dt` seconds, resolving floor contacts exactly.
///
/// Contacts are only detected while the body is at or above the floor; a body
/// that starts below it moves freely.
pub(crate) fn advance_bounce(
    pos: &mut [f64],
    vel: &mut [f64],
    dt: f64,
    gravity: f64,
    floor: f64,
    restitution: f64,
) {
    let up = pos.len() - 1;
    let mut remaining = dt;
    for _ in 0..MAX_CONTACTS_PER_STEP {
        let height = pos[up] - floor;
        let contact = if height >= 0.0 {
            // Positive root of ½gτ² − v·τ − height = 0, cancellation-free.
            let v = vel[up];
            let s = (v * v + 2.0 * gravity * height).sqrt();
            let tau = if v >= 0.0 { (v + s) / gravity } else { 2.0 * height / (s - v) };
            (tau <= remaining).then_some(tau)
        } else {
            None
        };
        match contact {
            Some(tau) => {
                free_flight(pos, vel, tau, gravity);
                pos[up] = floor;
                vel[up] = -restitution * vel[up];
                remaining -= tau;
                if vel[up] <= 0.0 {
                    // Resting on the floor.
                    vel[up] = 0.0;
                    for (p, v) in pos[..up].iter_mut().zip(&vel[..up]) {
                        *p += v * remaining;
                    }
                    return;
                }
            }
            None => {
                free_flight(pos, vel, remaining, gravity);
                return;
            }
        }
    }
    free_flight(pos, vel, remaining, gravity);
}

fn free_flight(pos: &mut [f64], vel: &mut [f64], dt: f64, gravity: f64) {
    let up = pos.len() - 1;
    for (p, v) in pos.iter_mut().zip(vel.iter()) {
        *p += v * dt;
    }
    pos[up] -= 0.5 * gravity * dt * dt;
    vel[up] -= gravity * dt;
}

/// Symplectic-Euler step of `x'' = −ω²x − c·x'`, per axis.
pub(crate) fn oscillator_step(pos: &mut [f64], vel: &mut [f64], h: f64, stiffness: f64, damping: f64) {
    for (x, v) in pos.iter_mut().zip(vel.iter_mut()) {
        *v += h * (-stiffness * *x - damping * *v);
        *x += h * *v;
    }
}

/// Simulates `frames` frames of a category from an initial state.
pub fn simulate_states(
    category: &ActionCategory,
    init_position: &[f64],
    init_velocity: &[f64],
    frames: usize,
    frame_step: f64,
) -> Result<SimulatedStates> {
    category.validate()?;
    let dims = init_position.len();
    if dims == 0 {
        return Err(Error::Domain("initial position has no dimensions".into()));
    }
    ensure_len("init_velocity", dims, init_velocity.len())?;
    if frames < 4 {
        return Err(Error::Domain(format!("need at least 4 frames, got {frames}")));
    }
    if !(frame_step > 0.0 && frame_step.is_finite()) {
        return Err(Error::Domain(format!("frame_step must be positive, got {frame_step}")));
    }
    if !init_position.iter().chain(init_velocity).all(|v| v.is_finite()) {
        return Err(Error::Domain("non-finite initial state".into()));
    }
    if category.kind == CategoryKind::Bounce && init_position[dims - 1] < category.floor {
        return Err(Error::Domain(format!(
            "initial height {} is below the floor {}",
            init_position[dims - 1],
            category.floor
        )));
    }

    let mut positions = Vec::with_capacity(frames * dims);
    let mut velocities = Vec::with_capacity(frames * dims);
    let h = frame_step;
    match category.kind {
        CategoryKind::Ballistic | CategoryKind::Uniform => {
            let a = category.acceleration(dims);
            for k in 0..frames {
                let t = k as f64 * h;
                for d in 0..dims {
                    positions.push(init_position[d] + init_velocity[d] * t + 0.5 * a[d] * t * t);
                    velocities.push(init_velocity[d] + a[d] * t);
                }
            }
        }
        CategoryKind::Bounce => {
            let mut p = init_position.to_vec();
            let mut v = init_velocity.to_vec();
            for k in 0..frames {
                if k > 0 {
                    advance_bounce(&mut p, &mut v, h, category.gravity, category.floor, category.restitution);
                }
                positions.extend_from_slice(&p);
                velocities.extend_from_slice(&v);
            }
        }
        CategoryKind::DampedOscillation => {
            let mut p = init_position.to_vec();
            let mut v = init_velocity.to_vec();
            for k in 0..frames {
                if k > 0 {
                    oscillator_step(&mut p, &mut v, h, category.stiffness, category.damping);
                }
                positions.extend_from_slice(&p);
                velocities.extend_from_slice(&v);
            }
        }
    }
    Ok(SimulatedStates {
        trajectory: Trajectory::new(frames, dims, frame_step, positions)?,
        velocities,
    })
}

/// Ground-truth clip for a category and initial state.
pub fn simulate(
    category: &ActionCategory,
    init_position: &[f64],
    init_velocity: &[f64],
    frames: usize,
    frame_step: f64,
) -> Result<Trajectory> {
    simulate_states(category, init_position, init_velocity, frames, frame_step).map(|s| s.trajectory)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ballistic_matches_projectile_formula() {
        let c = ActionCategory::ballistic(0, 1.0);
        let t = simulate(&c, &[0.0, 0.0], &[1.0, 3.0], 16, 0.1).unwrap();
        // y = v_y·t − ½·g·t² at t = 0.2
        let f = t.frame(2);
        assert!((f[0] - 0.2).abs() < 1e-12);
        assert!((f[1] - 0.58).abs() < 1e-12);
    }

    #[test]
    fn uniform_is_linear() {
        let c = ActionCategory::uniform(1);
        let t = simulate(&c, &[0.0, 0.0], &[1.0, 0.0], 8, 0.1).unwrap();
        for k in 0..8 {
            assert!((t.frame(k)[0] - 0.1 * k as f64).abs() < 1e-12);
            assert_eq!(t.frame(k)[1], 0.0);
        }
    }

    #[test]
    fn elastic_bounce_preserves_speed() {
        let c = ActionCategory::bounce(2, 4.0, 0.0, 1.0);
        let s = simulate_states(&c, &[0.0, 0.3], &[0.5, 0.0], 16, 0.1).unwrap();
        let speed = |k: usize| {
            let v = &s.velocities[2 * k..2 * k + 2];
            (v[0] * v[0] + v[1] * v[1]).sqrt()
        };
        // Fall time √(2·0.3/4) ≈ 0.387 s: the contact lies between frames 3 and 4.
        let y = |k: usize| s.trajectory.frame(k)[1];
        assert!(s.velocities[2 * 3 + 1] < 0.0 && s.velocities[2 * 4 + 1] > 0.0);
        assert!(y(4) > 0.0);
        // Energy conservation pins the speed at the same height.
        let impact = (2.0f64 * 4.0 * 0.3).sqrt();
        let expected = |k: usize| (0.25 + impact * impact - 2.0 * 4.0 * y(k)).sqrt();
        for k in [3, 4] {
            assert!((speed(k) - expected(k)).abs() < 1e-9);
        }
    }

    #[test]
    fn bounce_below_floor_is_domain_error() {
        let c = ActionCategory::bounce(2, 4.0, 0.0, 1.0);
        assert!(matches!(
            simulate(&c, &[0.0, -0.1], &[0.0, 0.0], 8, 0.1),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn rejects_short_clips() {
        let c = ActionCategory::uniform(0);
        assert!(simulate(&c, &[0.0], &[1.0], 3, 0.1).is_err());
    }

    #[test]
    fn oscillator_decays() {
        let c = ActionCategory::damped_oscillation(3, 4.0, 0.5);
        let t = simulate(&c, &[1.0, 0.0], &[0.0, 0.0], 200, 0.1).unwrap();
        assert!(t.frame(199)[0].abs() < 0.01);
    }
}
