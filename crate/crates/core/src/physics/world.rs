use crate::error::{ensure_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CategoryKind {
    /// Free flight under gravity.
    Ballistic,
    /// Constant velocity.
    Uniform,
    /// Free flight with elastic (or restituted) bounces off a horizontal floor.
    Bounce,
    /// Damped harmonic oscillator about the origin, per axis.
    DampedOscillation,
}

impl CategoryKind {
    pub const ALL: [CategoryKind; 4] = [
        CategoryKind::Ballistic,
        CategoryKind::Uniform,
        CategoryKind::Bounce,
        CategoryKind::DampedOscillation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CategoryKind::Ballistic => "ballistic",
            CategoryKind::Uniform => "uniform",
            CategoryKind::Bounce => "bounce",
            CategoryKind::DampedOscillation => "damped_oscillation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown category kind `{s}`")))
    }
}

/// One action category with its dynamics constants.
///
/// Time is measured in seconds; `frame_step` on the world converts frames to
/// seconds. Gravity acts along the last spatial axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionCategory {
    pub id: usize,
    pub kind: CategoryKind,
    pub gravity: f64,
    pub restitution: f64,
    /// ω² of the oscillator.
    pub stiffness: f64,
    pub damping: f64,
    /// Floor height for bounces.
    pub floor: f64,
}

impl ActionCategory {
    pub fn ballistic(id: usize, gravity: f64) -> Self {
        Self {
            id,
            kind: CategoryKind::Ballistic,
            gravity,
            restitution: 1.0,
            stiffness: 0.0,
            damping: 0.0,
            floor: 0.0,
        }
    }

    pub fn uniform(id: usize) -> Self {
        Self {
            id,
            kind: CategoryKind::Uniform,
            gravity: 0.0,
            restitution: 1.0,
            stiffness: 0.0,
            damping: 0.0,
            floor: 0.0,
        }
    }

    pub fn bounce(id: usize, gravity: f64, floor: f64, restitution: f64) -> Self {
        Self {
            id,
            kind: CategoryKind::Bounce,
            gravity,
            restitution,
            stiffness: 0.0,
            damping: 0.0,
            floor,
        }
    }

    pub fn damped_oscillation(id: usize, stiffness: f64, damping: f64) -> Self {
        Self {
            id,
            kind: CategoryKind::DampedOscillation,
            gravity: 0.0,
            restitution: 1.0,
            stiffness,
            damping,
            floor: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "category {} ({}): {name} must be positive, got {v}",
                    self.id,
                    self.kind.name()
                )))
            }
        };
        match self.kind {
            CategoryKind::Ballistic => positive("gravity", self.gravity),
            CategoryKind::Uniform => Ok(()),
            CategoryKind::Bounce => {
                positive("gravity", self.gravity)?;
                positive("restitution", self.restitution)?;
                if self.restitution > 1.0 {
                    return Err(Error::Config("restitution must not exceed 1".into()));
                }
                if !self.floor.is_finite() {
                    return Err(Error::Config("floor must be finite".into()));
                }
                Ok(())
            }
            CategoryKind::DampedOscillation => {
                positive("stiffness", self.stiffness)?;
                positive("damping", self.damping)
            }
        }
    }

    /// Constant acceleration for the gravity-driven kinds.
    pub(crate) fn acceleration(&self, dims: usize) -> Vec<f64> {
        let mut a = vec![0.0; dims];
        if matches!(self.kind, CategoryKind::Ballistic | CategoryKind::Bounce) {
            a[dims - 1] = -self.gravity;
        }
        a
    }
}

/// The world every clip lives in.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub categories: Vec<ActionCategory>,
    pub frames: usize,
    pub dims: usize,
    /// Seconds per frame.
    pub frame_step: f64,
    /// Initial positions are drawn from `[-pos_bound, pos_bound]` per axis.
    pub pos_bound: f64,
    /// Initial velocities are drawn from `[-vel_bound, vel_bound]` per axis.
    pub vel_bound: f64,
    pub rho_pc: f64,
    pub rho_sa: f64,
    /// Mean per-frame displacement that counts as fully dynamic.
    pub motion_scale: f64,
    /// Relative frequency of each category in the raw pool.
    pub category_weights: Vec<f64>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            categories: vec![
                ActionCategory::ballistic(0, 1.0),
                ActionCategory::uniform(1),
                ActionCategory::bounce(2, 4.0, -1.5, 1.0),
                ActionCategory::damped_oscillation(3, 4.0, 0.5),
            ],
            frames: 16,
            dims: 2,
            frame_step: 0.1,
            pos_bound: 1.0,
            vel_bound: 1.0,
            rho_pc: 50.0,
            rho_sa: 1.0,
            motion_scale: 0.05,
            category_weights: vec![0.3, 0.3, 0.2, 0.2],
        }
    }
}

impl WorldConfig {
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn flat_len(&self) -> usize {
        self.frames * self.dims
    }

    pub fn category(&self, id: usize) -> Result<&ActionCategory> {
        self.categories
            .get(id)
            .ok_or_else(|| Error::Domain(format!("category id {id} out of range")))
    }

    /// Index of the first category of the given kind.
    pub fn find_kind(&self, kind: CategoryKind) -> Option<usize> {
        self.categories.iter().position(|c| c.kind == kind)
    }

    /// Length of [`Condition::encoding`].
    pub fn condition_dim(&self) -> usize {
        self.num_categories() + 2 * self.dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.len() < 2 {
            return Err(Error::Config("the world needs at least two categories".into()));
        }
        for (i, c) in self.categories.iter().enumerate() {
            if c.id != i {
                return Err(Error::Config(format!("category at position {i} has id {}", c.id)));
            }
            c.validate()?;
        }
        if self.frames < 4 {
            return Err(Error::Config(format!("frames must be at least 4, got {}", self.frames)));
        }
        if self.dims == 0 {
            return Err(Error::Config("dims must be at least 1".into()));
        }
        for (name, v) in [
            ("frame_step", self.frame_step),
            ("pos_bound", self.pos_bound),
            ("vel_bound", self.vel_bound),
            ("rho_pc", self.rho_pc),
            ("rho_sa", self.rho_sa),
            ("motion_scale", self.motion_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        ensure_len("category_weights", self.categories.len(), self.category_weights.len())
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.category_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
            || self.category_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config("category_weights must be non-negative with a positive sum".into()));
        }
        // Bounce clips must not touch the floor during the first frame interval,
        // otherwise the implied initial velocity is ambiguous.
        let h = self.frame_step;
        for c in self.categories.iter().filter(|c| c.kind == CategoryKind::Bounce) {
            let clearance = -self.pos_bound - c.floor;
            let needed = self.vel_bound * h + 0.5 * c.gravity * h * h;
            if clearance <= needed {
                return Err(Error::Config(format!(
                    "bounce category {}: floor {} is too close to the position bounds",
                    c.id, c.floor
                )));
            }
        }
        Ok(())
    }

    /// Checks a condition against the category range and the world bounds.
    pub fn check_condition(&self, c: &Condition) -> Result<()> {
        self.category(c.category)?;
        ensure_len("init_position", self.dims, c.init_position.len())?;
        ensure_len("init_velocity", self.dims, c.init_velocity.len())?;
        let within = |v: &f64, b: f64| v.is_finite() && v.abs() <= b;
        if !c.init_position.iter().all(|v| within(v, self.pos_bound))
            || !c.init_velocity.iter().all(|v| within(v, self.vel_bound))
        {
            return Err(Error::Domain(format!(
                "initial state {:?}/{:?} outside world bounds",
                c.init_position, c.init_velocity
            )));
        }
        Ok(())
    }
}

/// The conditioning signal: which action, starting where, moving how.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub category: usize,
    pub init_position: Vec<f64>,
    pub init_velocity: Vec<f64>,
}

impl Condition {
    /// One-hot category followed by the initial state scaled to `[-1, 1]`.
    pub fn encoding(&self, num_categories: usize, pos_bound: f64, vel_bound: f64) -> Vec<f64> {
        let mut out = vec![0.0; num_categories];
        if self.category < num_categories {
            out[self.category] = 1.0;
        }
        out.extend(self.init_position.iter().map(|p| p / pos_bound));
        out.extend(self.init_velocity.iter().map(|v| v / vel_bound));
        out
    }

    pub fn encode_in(&self, world: &WorldConfig) -> Vec<f64> {
        self.encoding(world.num_categories(), world.pos_bound, world.vel_bound)
    }
}

/// `frames × dims` positions sampled every `frame_step` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    frames: usize,
    dims: usize,
    frame_step: f64,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn new(frames: usize, dims: usize, frame_step: f64, data: Vec<f64>) -> Result<Self> {
        if frames < 4 {
            return Err(Error::Domain(format!("a trajectory needs at least 4 frames, got {frames}")));
        }
        ensure_len("trajectory data", frames * dims, data.len())?;
        Ok(Self {
            frames,
            dims,
            frame_step,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn frame_step(&self) -> f64 {
        self.frame_step
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        &self.data[k * self.dims..(k + 1) * self.dims]
    }

    pub fn frame_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.dims..(k + 1) * self.dims]
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean Euclidean displacement between consecutive frames.
    pub fn mean_displacement(&self) -> f64 {
        let total: f64 = (1..self.frames)
            .map(|k| {
                self.frame(k)
                    .iter()
                    .zip(self.frame(k - 1))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        total / (self.frames - 1) as f64
    }
}
