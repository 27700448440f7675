use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::corrupt::{corrupt, CorruptionKind};
use super::simulate::simulate;
use super::world::{Condition, Trajectory, WorldConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Clean,
    Corrupted,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Clean => "clean",
            Provenance::Corrupted => "corrupted",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Provenance::Clean),
            "corrupted" => Ok(Provenance::Corrupted),
            other => Err(Error::Config(format!("unknown provenance `{other}`"))),
        }
    }
}

/// One entry of the raw clip pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolRecord {
    pub condition: Condition,
    pub trajectory: Trajectory,
    pub corruption_magnitude: f64,
    pub provenance: Provenance,
}

/// Magnitude range drawn for each corruption kind.
fn magnitude_range(kind: CorruptionKind) -> (f64, f64) {
    match kind {
        CorruptionKind::Jitter => (0.01, 0.2),
        CorruptionKind::DragDistortion => (0.5, 3.0),
        CorruptionKind::Teleport => (0.2, 1.0),
        CorruptionKind::Freeze => (0.25, 0.75),
    }
}

/// Draws a uniformly random initial state inside the world bounds.
pub fn random_condition<R: Rng + ?Sized>(world: &WorldConfig, category: usize, rng: &mut R) -> Condition {
    let mut draw = |b: f64| (0..world.dims).map(|_| rng.random_range(-b..=b)).collect::<Vec<_>>();
    let init_position = draw(world.pos_bound);
    let init_velocity = draw(world.vel_bound);
    Condition {
        category,
        init_position,
        init_velocity,
    }
}

/// Raw pool: categories follow `world.category_weights`, a `clean_fraction`
/// share is left untouched and the rest is corrupted.
pub fn gen_pool<R: Rng + ?Sized>(
    world: &WorldConfig,
    pool_size: usize,
    clean_fraction: f64,
    rng: &mut R,
) -> Result<Vec<PoolRecord>> {
    world.validate()?;
    if pool_size == 0 {
        return Err(Error::Precondition("pool_size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&clean_fraction) {
        return Err(Error::Precondition(format!("clean_fraction {clean_fraction} outside [0, 1]")));
    }
    let categories =
        WeightedIndex::new(&world.category_weights).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(pool_size);
    for _ in 0..pool_size {
        let category = categories.sample(rng);
        let condition = random_condition(world, category, rng);
        let clean = simulate(
            &world.categories[category],
            &condition.init_position,
            &condition.init_velocity,
            world.frames,
            world.frame_step,
        )?;
        let record = if rng.random::<f64>() < clean_fraction {
            PoolRecord {
                condition,
                trajectory: clean,
                corruption_magnitude: 0.0,
                provenance: Provenance::Clean,
            }
        } else {
            let kind = CorruptionKind::ALL[rng.random_range(0..CorruptionKind::ALL.len())];
            let (lo, hi) = magnitude_range(kind);
            let magnitude = rng.random_range(lo..hi);
            PoolRecord {
                condition,
                trajectory: corrupt(&clean, kind, magnitude, rng)?,
                corruption_magnitude: magnitude,
                provenance: Provenance::Corrupted,
            }
        };
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::score::score;
    use crate::rng::seeded;

    #[test]
    fn clean_pool_scores_perfectly() {
        let world = WorldConfig::default();
        let pool = gen_pool(&world, 100, 1.0, &mut seeded(9)).unwrap();
        for r in &pool {
            assert_eq!(r.provenance, Provenance::Clean);
            assert_eq!(r.corruption_magnitude, 0.0);
            assert!((score(&r.trajectory, &r.condition, &world).s_pc - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let world = WorldConfig::default();
        let a = gen_pool(&world, 50, 0.5, &mut seeded(3)).unwrap();
        let b = gen_pool(&world, 50, 0.5, &mut seeded(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().any(|r| r.provenance == Provenance::Corrupted));
    }

    #[test]
    fn category_shares_follow_weights() {
        let mut world = WorldConfig::default();
        world.category_weights = vec![0.7, 0.1, 0.1, 0.1];
        let pool = gen_pool(&world, 10_000, 1.0, &mut seeded(4)).unwrap();
        let mut counts = [0usize; 4];
        for r in &pool {
            counts[r.condition.category] += 1;
        }
        for (c, w) in counts.iter().zip(&world.category_weights) {
            assert!((*c as f64 / 10_000.0 - w).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let world = WorldConfig::default();
        assert!(gen_pool(&world, 0, 0.5, &mut seeded(0)).is_err());
        assert!(gen_pool(&world, 10, 1.5, &mut seeded(0)).is_err());
    }
}
