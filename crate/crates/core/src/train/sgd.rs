//! SGD with momentum and L2 weight decay.

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    /// `v = m v + g + wd p; p -= lr v` for every parameter that has a gradient.
    pub fn step(&mut self, params: Vec<&mut Tensor>, lr: f64) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for (p, v) in params.into_iter().zip(&mut self.velocity) {
            let Some(g) = p.grad().map(|g| g.to_vec()) else { continue };
            for ((w, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *w;
                *w -= lr * *vi;
            }
        }
    }
}
