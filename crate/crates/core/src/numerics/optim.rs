use super::params::Params;

/// Cosine annealing from `lr_init` to `lr_final` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub lr_init: f64,
    pub lr_final: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.lr_init;
        }
        let p = (step.min(self.total_steps - 1)) as f64 / (self.total_steps - 1) as f64;
        self.lr_final + 0.5 * (self.lr_init - self.lr_final) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Applies a gradient step to a parameter tree.
pub trait Optimizer {
    fn step<P: Params>(&mut self, params: &mut P, grads: &P, lr: f64);
}

/// Gradient descent with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Momentum {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Momentum {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }
}

impl Optimizer for Momentum {
    fn step<P: Params>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let g = grads.tensors();
        if self.velocity.is_empty() {
            self.velocity = g.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        }
        for ((p, (_, g)), v) in params.tensors_mut().into_iter().zip(g).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for AdamW {
    fn step<P: Params>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let g = grads.tensors();
        if self.m.is_empty() {
            self.m = g.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, (_, g)), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(g)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
    }
}
