//! AdamW with decoupled weight decay, plus global gradient-norm clipping.

use super::ParamSource;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every tensor of `net`. Gradients are left untouched
    /// (zero them per batch). Panics if any parameter becomes non-finite.
    pub fn step(&mut self, net: &mut dyn ParamSource) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
        net.visit(&mut |p| {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = b1 * p.m[i] + (1.0 - b1) * g;
                p.v[i] = b2 * p.v[i] + (1.0 - b2) * g * g;
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                // Decoupled decay: shrink the weight directly, not the gradient.
                p.value[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * p.value[i]);
                assert!(p.value[i].is_finite(), "non-finite parameter {} [{i}]", p.name);
            }
        });
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(net: &mut dyn ParamSource, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    net.visit(&mut |p| {
        for g in &p.grad {
            sq += g * g;
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        net.visit(&mut |p| p.grad.iter_mut().for_each(|g| *g *= scale));
    }
    norm
}
