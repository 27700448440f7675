#![allow(dead_code)]

use gdpo_core::flow::{FlowModel, ModelConfig, Normalizer};
use gdpo_core::gdpo::{build_groups, PreferenceGroup};
use gdpo_core::numerics::Params;
use gdpo_core::physics::{random_condition, simulate, Condition, Trajectory, WorldConfig};
use gdpo_core::rng::seeded;
use gdpo_core::LoraAdapter;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn small_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 24,
        ..ModelConfig::default()
    }
}

/// A one-dimensional, six-frame world: small enough that central differences
/// at step 1e-6 resolve gradients to 1e-5.
pub fn tiny_world() -> WorldConfig {
    WorldConfig {
        frames: 6,
        dims: 1,
        ..WorldConfig::default()
    }
}

/// Simulated clean pairs cycling through the categories.
pub fn clean_pairs(world: &WorldConfig, n: usize, seed: u64) -> Vec<(Condition, Trajectory)> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|i| {
            let c = random_condition(world, i % world.num_categories(), &mut rng);
            let cat = &world.categories[c.category];
            let t = simulate(cat, &c.init_position, &c.init_velocity, world.frames, world.frame_step).unwrap();
            (c, t)
        })
        .collect()
}

/// A model with an attached (zero-output) adapter, fitted normalizer.
pub fn model_with_adapter(world: &WorldConfig, config: &ModelConfig, seed: u64) -> FlowModel {
    let data = clean_pairs(world, 64, seed ^ 0x55);
    let norm = Normalizer::fit(data.iter().map(|(_, t)| t)).unwrap();
    let mut model = FlowModel::new(world, config, norm, seed, &mut seeded(seed)).unwrap();
    model.attach_adapter(config, &mut seeded(seed + 1)).unwrap();
    model
}

/// Overwrites every adapter entry with `N(0, std²)`.
pub fn randomize_adapter<R: Rng>(adapter: &mut LoraAdapter, std: f64, rng: &mut R) {
    for t in adapter.tensors_mut() {
        for v in t.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = std * z;
        }
    }
}

pub fn groups_for(model: &FlowModel, world: &WorldConfig, n: usize, m: usize, seed: u64) -> Vec<PreferenceGroup> {
    let set = clean_pairs(world, n, seed);
    build_groups(model, &set, m, 8, world, &mut seeded(seed + 7)).unwrap().groups
}
