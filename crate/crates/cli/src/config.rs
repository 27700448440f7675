//! Flat `section.key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use gdpo_core::flow::{ModelConfig, OptimizerKind, PretrainConfig};
use gdpo_core::physics::{CategoryKind, WorldConfig};
use gdpo_core::pipeline::SamplingConfig;
use gdpo_core::{DpoHyper, RewardSchedule};

/// Bad configuration text, unknown keys, or invalid values.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq)]
pub struct PoolConfig {
    pub size: usize,
    pub clean_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Held-out conditions drawn per category.
    pub conditions_per_category: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub product_instances: usize,
    pub proof_instances: usize,
    pub chain_instances: usize,
    pub mc_samples: usize,
    pub gradient_configs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub world: WorldConfig,
    pub pool: PoolConfig,
    pub sampling: SamplingConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    /// Clean filtered clips used per category for pretraining.
    pub pretrain_per_category: usize,
    pub dpo: DpoHyper,
    pub schedule: RewardSchedule,
    pub eval: EvalConfig,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            world: WorldConfig::default(),
            pool: PoolConfig {
                size: 4096,
                clean_fraction: 0.5,
            },
            sampling: SamplingConfig::default(),
            pretrain: PretrainConfig {
                time_steps: model.time_steps,
                ..PretrainConfig::default()
            },
            model,
            pretrain_per_category: 256,
            dpo: DpoHyper::default(),
            schedule: RewardSchedule::default(),
            eval: EvalConfig {
                conditions_per_category: 64,
            },
            verify: VerifyConfig {
                product_instances: 100_000,
                proof_instances: 10_000,
                chain_instances: 1000,
                mc_samples: 2000,
                gradient_configs: 10,
            },
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| ConfigError(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn floats(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    fn category_mut(&mut self, kind: CategoryKind) -> Result<&mut gdpo_core::ActionCategory> {
        self.world
            .categories
            .iter_mut()
            .find(|c| c.kind == kind)
            .ok_or_else(|| ConfigError(format!("the world has no {} category", kind.name())))
    }

    fn category(&self, kind: CategoryKind) -> &gdpo_core::ActionCategory {
        self.world
            .categories
            .iter()
            .find(|c| c.kind == kind)
            .expect("the configured world keeps all four categories")
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let w = &self.world;
        let (ball, bounce, osc) = (
            self.category(CategoryKind::Ballistic),
            self.category(CategoryKind::Bounce),
            self.category(CategoryKind::DampedOscillation),
        );
        let (p, s, m, pt, d, sc, v) = (
            &self.pool,
            &self.sampling,
            &self.model,
            &self.pretrain,
            &self.dpo,
            &self.schedule,
            &self.verify,
        );
        vec![
            ("run.seed", self.seed.to_string()),
            ("run.out", self.out.display().to_string()),
            ("world.frames", w.frames.to_string()),
            ("world.dims", w.dims.to_string()),
            ("world.frame_step", w.frame_step.to_string()),
            ("world.pos_bound", w.pos_bound.to_string()),
            ("world.vel_bound", w.vel_bound.to_string()),
            ("world.rho_pc", w.rho_pc.to_string()),
            ("world.rho_sa", w.rho_sa.to_string()),
            ("world.motion_scale", w.motion_scale.to_string()),
            ("world.category_weights", floats(&w.category_weights)),
            ("world.ballistic_gravity", ball.gravity.to_string()),
            ("world.bounce_gravity", bounce.gravity.to_string()),
            ("world.bounce_floor", bounce.floor.to_string()),
            ("world.bounce_restitution", bounce.restitution.to_string()),
            ("world.oscillator_stiffness", osc.stiffness.to_string()),
            ("world.oscillator_damping", osc.damping.to_string()),
            ("pool.size", p.size.to_string()),
            ("pool.clean_fraction", p.clean_fraction.to_string()),
            ("pipeline.richness_threshold", s.richness_threshold.to_string()),
            ("pipeline.tau", s.tau.to_string()),
            ("pipeline.budget", s.budget.to_string()),
            ("pipeline.n_reps", s.n_reps.to_string()),
            ("model.hidden_dim", m.hidden_dim.to_string()),
            ("model.n_layers", m.n_layers.to_string()),
            ("model.lora_rank", m.lora_rank.to_string()),
            ("model.lora_scale", m.lora_scale.to_string()),
            ("model.lora_init_std", m.lora_init_std.to_string()),
            ("model.time_steps", m.time_steps.to_string()),
            ("pretrain.epochs", pt.epochs.to_string()),
            ("pretrain.batch_size", pt.batch_size.to_string()),
            ("pretrain.lr", pt.lr.to_string()),
            ("pretrain.lr_final", pt.lr_final.to_string()),
            ("pretrain.optimizer", pt.optimizer.name().to_string()),
            ("pretrain.momentum", pt.momentum.to_string()),
            ("pretrain.draws_per_example", pt.draws_per_example.to_string()),
            ("pretrain.eval_samples", pt.eval_samples.to_string()),
            ("pretrain.per_category", self.pretrain_per_category.to_string()),
            ("dpo.beta", d.beta.to_string()),
            ("dpo.m", d.m.to_string()),
            ("dpo.steps", d.steps.to_string()),
            ("dpo.batch", d.batch.to_string()),
            ("dpo.lr", d.lr.to_string()),
            ("dpo.lr_final", d.lr_final.to_string()),
            ("dpo.weight_decay", d.weight_decay.to_string()),
            ("dpo.shared_noise", d.shared_noise.to_string()),
            ("dpo.eval_every", d.eval_every.to_string()),
            ("dpo.max_rejections", d.max_rejections.to_string()),
            ("dpo.alpha_min", sc.alpha_min.to_string()),
            ("dpo.kappa_gamma", sc.kappa_gamma.to_string()),
            ("dpo.b_gamma", sc.b_gamma.to_string()),
            ("dpo.lambda", sc.lambda.to_string()),
            ("dpo.kappa_alpha", sc.kappa_alpha.to_string()),
            ("dpo.b_alpha", sc.b_alpha.to_string()),
            ("eval.conditions_per_category", self.eval.conditions_per_category.to_string()),
            ("verify.product_instances", v.product_instances.to_string()),
            ("verify.proof_instances", v.proof_instances.to_string()),
            ("verify.chain_instances", v.chain_instances.to_string()),
            ("verify.mc_samples", v.mc_samples.to_string()),
            ("verify.gradient_configs", v.gradient_configs.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        macro_rules! num {
            ($field:expr) => {{
                $field = parse_num(key, value)?;
            }};
        }
        match key {
            "run.seed" => num!(self.seed),
            "run.out" => self.out = PathBuf::from(value),
            "world.frames" => num!(self.world.frames),
            "world.dims" => num!(self.world.dims),
            "world.frame_step" => num!(self.world.frame_step),
            "world.pos_bound" => num!(self.world.pos_bound),
            "world.vel_bound" => num!(self.world.vel_bound),
            "world.rho_pc" => num!(self.world.rho_pc),
            "world.rho_sa" => num!(self.world.rho_sa),
            "world.motion_scale" => num!(self.world.motion_scale),
            "world.category_weights" => {
                self.world.category_weights = value
                    .split(',')
                    .map(|x| parse_num(key, x.trim()))
                    .collect::<Result<_>>()?;
            }
            "world.ballistic_gravity" => num!(self.category_mut(CategoryKind::Ballistic)?.gravity),
            "world.bounce_gravity" => num!(self.category_mut(CategoryKind::Bounce)?.gravity),
            "world.bounce_floor" => num!(self.category_mut(CategoryKind::Bounce)?.floor),
            "world.bounce_restitution" => num!(self.category_mut(CategoryKind::Bounce)?.restitution),
            "world.oscillator_stiffness" => num!(self.category_mut(CategoryKind::DampedOscillation)?.stiffness),
            "world.oscillator_damping" => num!(self.category_mut(CategoryKind::DampedOscillation)?.damping),
            "pool.size" => num!(self.pool.size),
            "pool.clean_fraction" => num!(self.pool.clean_fraction),
            "pipeline.richness_threshold" => num!(self.sampling.richness_threshold),
            "pipeline.tau" => num!(self.sampling.tau),
            "pipeline.budget" => num!(self.sampling.budget),
            "pipeline.n_reps" => num!(self.sampling.n_reps),
            "model.hidden_dim" => num!(self.model.hidden_dim),
            "model.n_layers" => num!(self.model.n_layers),
            "model.lora_rank" => num!(self.model.lora_rank),
            "model.lora_scale" => num!(self.model.lora_scale),
            "model.lora_init_std" => num!(self.model.lora_init_std),
            "model.time_steps" => {
                num!(self.model.time_steps);
                self.pretrain.time_steps = self.model.time_steps;
                self.dpo.time_steps = self.model.time_steps;
            }
            "pretrain.epochs" => num!(self.pretrain.epochs),
            "pretrain.batch_size" => num!(self.pretrain.batch_size),
            "pretrain.lr" => num!(self.pretrain.lr),
            "pretrain.lr_final" => num!(self.pretrain.lr_final),
            "pretrain.optimizer" => {
                self.pretrain.optimizer =
                    OptimizerKind::parse(value).map_err(|e| ConfigError(format!("`{key}`: {e}")))?;
            }
            "pretrain.momentum" => num!(self.pretrain.momentum),
            "pretrain.draws_per_example" => num!(self.pretrain.draws_per_example),
            "pretrain.eval_samples" => num!(self.pretrain.eval_samples),
            "pretrain.per_category" => num!(self.pretrain_per_category),
            "dpo.beta" => num!(self.dpo.beta),
            "dpo.m" => num!(self.dpo.m),
            "dpo.steps" => num!(self.dpo.steps),
            "dpo.batch" => num!(self.dpo.batch),
            "dpo.lr" => num!(self.dpo.lr),
            "dpo.lr_final" => num!(self.dpo.lr_final),
            "dpo.weight_decay" => num!(self.dpo.weight_decay),
            "dpo.shared_noise" => self.dpo.shared_noise = parse_bool(key, value)?,
            "dpo.eval_every" => num!(self.dpo.eval_every),
            "dpo.max_rejections" => num!(self.dpo.max_rejections),
            "dpo.alpha_min" => num!(self.schedule.alpha_min),
            "dpo.kappa_gamma" => num!(self.schedule.kappa_gamma),
            "dpo.b_gamma" => num!(self.schedule.b_gamma),
            "dpo.lambda" => num!(self.schedule.lambda),
            "dpo.kappa_alpha" => num!(self.schedule.kappa_alpha),
            "dpo.b_alpha" => num!(self.schedule.b_alpha),
            "eval.conditions_per_category" => num!(self.eval.conditions_per_category),
            "verify.product_instances" => num!(self.verify.product_instances),
            "verify.proof_instances" => num!(self.verify.proof_instances),
            "verify.chain_instances" => num!(self.verify.chain_instances),
            "verify.mc_samples" => num!(self.verify.mc_samples),
            "verify.gradient_configs" => num!(self.verify.gradient_configs),
            _ => return Err(ConfigError(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `section.key=value`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("override `{assignment}` is not of the form key=value")))?;
        self.set(key.trim(), value)?;
        self.validate()
    }

    /// Parses config text on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError(format!("line {}: `{key}` set twice", i + 1)));
            }
            cfg.set(key, value).map_err(|e| ConfigError(format!("line {}: {}", i + 1, e.0)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let s = key.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: gdpo_core::Error| ConfigError(e.to_string());
        self.world.validate().map_err(wrap)?;
        self.sampling.validate().map_err(wrap)?;
        self.model.validate().map_err(wrap)?;
        self.pretrain.validate().map_err(wrap)?;
        self.dpo.validate().map_err(wrap)?;
        self.schedule.validate().map_err(wrap)?;
        if self.pool.size == 0 || !(0.0..=1.0).contains(&self.pool.clean_fraction) {
            return Err(ConfigError("pool.size must be ≥ 1 and pool.clean_fraction in [0, 1]".into()));
        }
        if self.pretrain_per_category == 0 || self.eval.conditions_per_category == 0 {
            return Err(ConfigError("pretrain.per_category and eval.conditions_per_category must be ≥ 1".into()));
        }
        if self.dpo.time_steps != self.model.time_steps || self.pretrain.time_steps != self.model.time_steps {
            return Err(ConfigError("time grids of model, pretraining and dpo must agree".into()));
        }
        Ok(())
    }
}
