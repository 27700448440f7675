//! Synthetic physics world: exact simulators produce the "real" clips,
//! corruption operators produce physics-violating pool entries, and a
//! closed-form scorer rates semantic adherence and physical consistency.

mod corrupt;
mod pool;
mod score;
mod simulate;
mod world;

pub use corrupt::{corrupt, CorruptionKind};
pub use pool::{gen_pool, random_condition, PoolRecord, Provenance};
pub use score::{overall_score, physics_residuals, score, PhysicsScore};
pub use simulate::{simulate, simulate_states, SimulatedStates};
pub use world::{ActionCategory, CategoryKind, Condition, Trajectory, WorldConfig};
