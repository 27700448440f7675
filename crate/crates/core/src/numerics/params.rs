/// A tree of named parameter tensors that can be visited in a fixed order.
///
/// The order of [`Params::tensors`] and [`Params::tensors_mut`] must agree;
/// optimizers, checkpoints and the finite-difference checker rely on it.
pub trait Params {
    fn tensors(&self) -> Vec<(String, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

pub fn flatten<P: Params + ?Sized>(p: &P) -> Vec<f64> {
    p.tensors()
        .into_iter()
        .flat_map(|(_, t)| t.iter().copied())
        .collect()
}

pub fn l2_norm<P: Params + ?Sized>(p: &P) -> f64 {
    p.tensors()
        .iter()
        .flat_map(|(_, t)| t.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}
