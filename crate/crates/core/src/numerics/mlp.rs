use rand::Rng;

use super::matrix::DenseMatrix;
use super::params::Params;
use crate::error::{ensure_len, Error, Result};

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `x · sigmoid(x)`
    Silu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => silu(x),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => silu_grad(x),
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Multilayer perceptron: hidden layers use `activation`, the last is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            ensure_len(&format!("layer {i} bias"), l.out_dim(), l.bias.len())?;
            if i > 0 {
                ensure_len(
                    &format!("layer {i} input"),
                    layers[i - 1].out_dim(),
                    l.in_dim(),
                )?;
            }
        }
        Ok(Self { layers, activation })
    }

    /// Gaussian fan-in initialization with zero biases.
    pub fn init<R: Rng + ?Sized>(
        in_dim: usize,
        hidden_dim: usize,
        n_hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat_n(hidden_dim, n_hidden));
        dims.push(out_dim);
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                weight: DenseMatrix::random_normal(w[1], w[0], (1.0 / w[0] as f64).sqrt(), rng),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Self {
            layers,
            activation: Activation::Silu,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            activation: self.activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Width of the first hidden layer (equals `out_dim` for a single layer).
    pub fn hidden_dim(&self) -> usize {
        self.layers[0].out_dim()
    }
}

impl Params for MlpParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.weight"), l.weight.data()));
            out.push((format!("layers.{i}.bias"), l.bias.as_slice()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weight.data_mut());
            out.push(l.bias.as_mut_slice());
        }
        out
    }
}

/// Low-rank update `up · down` for one host weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    /// `rank × in_dim`
    pub down: DenseMatrix,
    /// `out_dim × rank`
    pub up: DenseMatrix,
}

/// Low-rank adapters attached to every weight matrix of an [`MlpParams`].
///
/// With the adapter enabled, layer `i` uses `W_i + (scale / rank) · up_i · down_i`.
/// Disabled, the host weights are used alone, which is how the frozen
/// backbone doubles as the preference reference.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub layers: Vec<LoraLayer>,
    pub rank: usize,
    pub scale: f64,
    pub enabled: bool,
}

impl LoraAdapter {
    /// `down ~ N(0, down_std²)`, `up = 0`, enabled.
    pub fn init<R: Rng + ?Sized>(
        host: &MlpParams,
        rank: usize,
        scale: f64,
        down_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("adapter scale must be positive, got {scale}")));
        }
        let layers = host
            .layers
            .iter()
            .map(|l| LoraLayer {
                down: DenseMatrix::random_normal(rank, l.in_dim(), down_std, rng),
                up: DenseMatrix::zeros(l.out_dim(), rank),
            })
            .collect();
        Ok(Self {
            layers,
            rank,
            scale,
            enabled: true,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LoraLayer {
                    down: DenseMatrix::zeros(l.down.rows(), l.down.cols()),
                    up: DenseMatrix::zeros(l.up.rows(), l.up.cols()),
                })
                .collect(),
            rank: self.rank,
            scale: self.scale,
            enabled: self.enabled,
        }
    }

    /// `scale / rank`
    pub fn factor(&self) -> f64 {
        self.scale / self.rank as f64
    }

    pub fn check_host(&self, host: &MlpParams) -> Result<()> {
        ensure_len("adapter layer count", host.layers.len(), self.layers.len())?;
        for (i, (a, h)) in self.layers.iter().zip(&host.layers).enumerate() {
            let ctx = |what: &str| format!("adapter layer {i} {what}");
            ensure_len(&ctx("down rows"), self.rank, a.down.rows())?;
            ensure_len(&ctx("down cols"), h.in_dim(), a.down.cols())?;
            ensure_len(&ctx("up rows"), h.out_dim(), a.up.rows())?;
            ensure_len(&ctx("up cols"), self.rank, a.up.cols())?;
        }
        Ok(())
    }

    /// `W + (scale/rank) · up · down` for layer `i`.
    pub fn effective_weight(&self, host: &MlpParams, i: usize) -> Result<DenseMatrix> {
        let mut w = host.layers[i].weight.clone();
        let delta = self.layers[i].up.matmul(&self.layers[i].down)?;
        let f = self.factor();
        for (wi, di) in w.data_mut().iter_mut().zip(delta.data()) {
            *wi += f * di;
        }
        Ok(w)
    }
}

impl Params for LoraAdapter {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("lora.{i}.down"), l.down.data()));
            out.push((format!("lora.{i}.up"), l.up.data()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.down.data_mut());
            out.push(l.up.data_mut());
        }
        out
    }
}

/// Intermediates of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer; the last entry is the network output.
    pre: Vec<Vec<f64>>,
    /// `down · input` per layer when an adapter took part.
    lora_mid: Vec<Vec<f64>>,
    adapter_active: bool,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("tape of a non-empty network")
    }

    pub fn adapter_active(&self) -> bool {
        self.adapter_active
    }
}

fn active_adapter<'a>(
    params: &MlpParams,
    adapter: Option<&'a LoraAdapter>,
) -> Result<Option<&'a LoraAdapter>> {
    match adapter {
        Some(a) if a.enabled => {
            a.check_host(params)?;
            Ok(Some(a))
        }
        _ => Ok(None),
    }
}

pub fn forward_tape(
    params: &MlpParams,
    adapter: Option<&LoraAdapter>,
    input: &[f64],
) -> Result<Tape> {
    ensure_len("mlp input", params.in_dim(), input.len())?;
    let adapter = active_adapter(params, adapter)?;
    let n = params.layers.len();
    let mut tape = Tape {
        inputs: Vec::with_capacity(n),
        pre: Vec::with_capacity(n),
        lora_mid: Vec::with_capacity(if adapter.is_some() { n } else { 0 }),
        adapter_active: adapter.is_some(),
    };
    let mut x = input.to_vec();
    for (i, layer) in params.layers.iter().enumerate() {
        let mut y = layer.weight.matvec(&x);
        for (yi, bi) in y.iter_mut().zip(&layer.bias) {
            *yi += bi;
        }
        if let Some(a) = adapter {
            let f = a.factor();
            let lora = &a.layers[i];
            let mid = lora.down.matvec(&x);
            let delta = lora.up.matvec(&mid);
            for (yi, di) in y.iter_mut().zip(&delta) {
                let d = f * di;
                // Skipping exact zeros keeps a zero adapter bit-identical to none.
                if d != 0.0 {
                    *yi += d;
                }
            }
            tape.lora_mid.push(mid);
        }
        let next = if i + 1 < n {
            y.iter().map(|&v| params.activation.apply(v)).collect()
        } else {
            Vec::new()
        };
        tape.inputs.push(std::mem::replace(&mut x, next));
        tape.pre.push(y);
    }
    Ok(tape)
}

/// Network output; the adapter participates only when present and enabled.
pub fn forward(params: &MlpParams, adapter: Option<&LoraAdapter>, input: &[f64]) -> Result<Vec<f64>> {
    let mut tape = forward_tape(params, adapter, input)?;
    Ok(tape.pre.pop().expect("non-empty network"))
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradTargets {
    pub backbone: bool,
    pub adapter: bool,
}

impl GradTargets {
    pub const BACKBONE: Self = Self {
        backbone: true,
        adapter: false,
    };
    pub const ADAPTER: Self = Self {
        backbone: false,
        adapter: true,
    };
    pub const ALL: Self = Self {
        backbone: true,
        adapter: true,
    };
}

/// Gradients shaped like the parameters they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub backbone: Option<MlpParams>,
    pub adapter: Option<LoraAdapter>,
}

impl Gradients {
    /// `self += scale · other`; both must have the same structure.
    pub fn add_scaled(&mut self, scale: f64, other: &Gradients) {
        fn acc<P: Params>(dst: &mut Option<P>, src: &Option<P>, scale: f64) {
            if let (Some(d), Some(s)) = (dst.as_mut(), src.as_ref()) {
                for (dt, (_, st)) in d.tensors_mut().into_iter().zip(s.tensors()) {
                    for (a, b) in dt.iter_mut().zip(st) {
                        *a += scale * b;
                    }
                }
            }
        }
        acc(&mut self.backbone, &other.backbone, scale);
        acc(&mut self.adapter, &other.adapter, scale);
    }

    pub fn scale(&mut self, s: f64) {
        fn sc<P: Params>(p: &mut Option<P>, s: f64) {
            if let Some(p) = p.as_mut() {
                for t in p.tensors_mut() {
                    t.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        sc(&mut self.backbone, s);
        sc(&mut self.adapter, s);
    }

    /// Path of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        let check = |tensors: Vec<(String, &[f64])>| {
            tensors
                .into_iter()
                .find_map(|(name, t)| t.iter().position(|v| !v.is_finite()).map(|i| format!("{name}[{i}]")))
        };
        self.backbone
            .as_ref()
            .and_then(|b| check(b.tensors()))
            .or_else(|| self.adapter.as_ref().and_then(|a| check(a.tensors())))
    }
}

/// Reverse-mode pass: gradients of a scalar loss given `grad_output = ∂loss/∂output`.
pub fn backward(
    params: &MlpParams,
    adapter: Option<&LoraAdapter>,
    tape: &Tape,
    grad_output: &[f64],
    targets: GradTargets,
) -> Result<Gradients> {
    ensure_len("grad_output", params.out_dim(), grad_output.len())?;
    let adapter = active_adapter(params, adapter)?;
    if adapter.is_some() != tape.adapter_active {
        return Err(Error::Precondition(
            "backward adapter state differs from the forward pass".into(),
        ));
    }
    let mut g_backbone = targets.backbone.then(|| params.zeros_like());
    let mut g_adapter = match (targets.adapter, adapter) {
        (true, Some(a)) => Some(a.zeros_like()),
        (true, None) => {
            return Err(Error::Precondition(
                "adapter gradients requested without an enabled adapter".into(),
            ))
        }
        _ => None,
    };

    let mut g = grad_output.to_vec();
    for i in (0..params.layers.len()).rev() {
        if let Some(idx) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("layers.{i}.output_grad[{idx}]")));
        }
        let layer = &params.layers[i];
        let x = &tape.inputs[i];
        if let Some(gb) = g_backbone.as_mut() {
            let gl = &mut gb.layers[i];
            gl.weight.add_outer(1.0, &g, x);
            for (b, gi) in gl.bias.iter_mut().zip(&g) {
                *b += gi;
            }
        }
        let mut up_t_g = Vec::new();
        if let Some(a) = adapter {
            let f = a.factor();
            let lora = &a.layers[i];
            up_t_g = vec![0.0; a.rank];
            lora.up.matvec_t_acc(&g, &mut up_t_g);
            if let Some(ga) = g_adapter.as_mut() {
                let gl = &mut ga.layers[i];
                gl.up.add_outer(f, &g, &tape.lora_mid[i]);
                gl.down.add_outer(f, &up_t_g, x);
            }
        }
        if i == 0 {
            break;
        }
        let mut gx = vec![0.0; layer.in_dim()];
        layer.weight.matvec_t_acc(&g, &mut gx);
        if let Some(a) = adapter {
            let f = a.factor();
            let scaled: Vec<f64> = up_t_g.iter().map(|v| f * v).collect();
            a.layers[i].down.matvec_t_acc(&scaled, &mut gx);
        }
        let pre = &tape.pre[i - 1];
        for (gxi, &p) in gx.iter_mut().zip(pre) {
            *gxi *= params.activation.derivative(p);
        }
        g = gx;
    }

    let grads = Gradients {
        backbone: g_backbone,
        adapter: g_adapter,
    };
    if let Some(path) = grads.first_non_finite() {
        return Err(Error::numeric(path));
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::flatten;
    use crate::rng::seeded;

    fn identity_net() -> MlpParams {
        MlpParams::new(
            vec![Layer {
                weight: DenseMatrix::identity(2),
                bias: vec![0.0, 0.0],
            }],
            Activation::Silu,
        )
        .unwrap()
    }

    fn rank1_adapter(down: &[f64], up: &[f64]) -> LoraAdapter {
        LoraAdapter {
            layers: vec![LoraLayer {
                down: DenseMatrix::from_rows(&[down]),
                up: DenseMatrix::from_rows(&[&[up[0]], &[up[1]]]),
            }],
            rank: 1,
            scale: 1.0,
            enabled: true,
        }
    }

    #[test]
    fn identity_network_passes_input_through() {
        let net = identity_net();
        let mut a = rank1_adapter(&[0.3, -0.7], &[0.0, 0.0]);
        a.enabled = false;
        assert_eq!(forward(&net, Some(&a), &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        a.enabled = true;
        assert_eq!(forward(&net, Some(&a), &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn rank_one_update_hand_multiply() {
        let net = MlpParams::new(
            vec![Layer {
                weight: DenseMatrix::from_rows(&[&[2.0, 0.0], &[0.0, 3.0]]),
                bias: vec![0.0, 0.0],
            }],
            Activation::Silu,
        )
        .unwrap();
        let a = rank1_adapter(&[1.0, 0.0], &[1.0, 0.0]);
        assert_eq!(forward(&net, Some(&a), &[1.0, 1.0]).unwrap(), vec![3.0, 3.0]);
        let w = a.effective_weight(&net, 0).unwrap();
        assert_eq!(w.data(), &[3.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn shape_errors() {
        let net = identity_net();
        assert!(matches!(
            forward(&net, None, &[1.0]),
            Err(Error::Shape { .. })
        ));
        let bad = LoraAdapter {
            layers: vec![LoraLayer {
                down: DenseMatrix::zeros(1, 3),
                up: DenseMatrix::zeros(2, 1),
            }],
            rank: 1,
            scale: 1.0,
            enabled: true,
        };
        assert!(forward(&net, Some(&bad), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn half_squared_norm_gradient_through_zero_up() {
        // loss = ½‖y‖², y = (W + f·up·down) x. With up = 0:
        // ∂/∂up = f · y ⊗ (down·x), ∂/∂down = f · (upᵀ y) ⊗ x = 0.
        let net = MlpParams::new(
            vec![Layer {
                weight: DenseMatrix::from_rows(&[&[0.5, -1.0], &[2.0, 0.25]]),
                bias: vec![0.1, -0.2],
            }],
            Activation::Silu,
        )
        .unwrap();
        let mut a = rank1_adapter(&[0.4, 0.9], &[0.0, 0.0]);
        a.scale = 2.0;
        let x = [1.5, -0.5];
        let tape = forward_tape(&net, Some(&a), &x).unwrap();
        let y = tape.output().to_vec();
        let g = backward(&net, Some(&a), &tape, &y, GradTargets::ADAPTER).unwrap();
        let ga = g.adapter.unwrap();
        let dx = 0.4 * 1.5 + 0.9 * -0.5;
        let f = a.factor();
        assert!((ga.layers[0].up.get(0, 0) - f * y[0] * dx).abs() < 1e-15);
        assert!((ga.layers[0].up.get(1, 0) - f * y[1] * dx).abs() < 1e-15);
        assert!(ga.layers[0].down.is_zero());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_gradients() {
        let mut rng = seeded(11);
        let mut net = MlpParams::init(3, 8, 2, 2, &mut rng);
        for l in &mut net.layers {
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let mut a = LoraAdapter::init(&net, 2, 1.0, 0.02, &mut rng).unwrap();
        for l in &mut a.layers {
            l.up = DenseMatrix::random_normal(l.up.rows(), l.up.cols(), 0.1, &mut rng);
        }
        let x = [0.0; 3];
        let tape = forward_tape(&net, Some(&a), &x).unwrap();
        let out = tape.output().to_vec();
        let g = backward(&net, Some(&a), &tape, &out, GradTargets::ALL).unwrap();
        assert!(flatten(g.adapter.as_ref().unwrap()).iter().all(|&v| v == 0.0));
        assert!(flatten(g.backbone.as_ref().unwrap()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adapter_grads_need_enabled_adapter() {
        let net = identity_net();
        let tape = forward_tape(&net, None, &[1.0, 1.0]).unwrap();
        assert!(backward(&net, None, &tape, &[1.0, 1.0], GradTargets::ADAPTER).is_err());
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let net = identity_net();
        let tape = forward_tape(&net, None, &[1.0, 1.0]).unwrap();
        let err = backward(&net, None, &tape, &[f64::NAN, 0.0], GradTargets::BACKBONE).unwrap_err();
        assert!(err.to_string().contains("layers.0"), "{err}");
    }

    #[test]
    fn silu_derivative_matches_difference() {
        for &x in &[-6.0, -1.0, -0.1, 0.0, 0.3, 2.0, 9.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }
}
