//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use std::f64::consts::PI;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter slice. Moment buffers are created as
    /// zeros on the first call; later calls must pass the same slices in the
    /// same order.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64, weight_decay: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                p[k] *= 1.0 - lr * weight_decay;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Cosine annealing from `base` at step 0 down towards `floor` at `total`.
pub fn cosine_lr(base: f64, floor: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step as f64 / total as f64).min(1.0);
    floor + (base - floor) * 0.5 * (1.0 + (PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut p = vec![1.5, -2.0];
        let mut opt = AdamW::new();
        opt.step(&mut [&mut p], &[&[0.0, 0.0]], 0.1, 0.0);
        assert_eq!(p, vec![1.5, -2.0]);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![1.0];
        AdamW::new().step(&mut [&mut p], &[&[1.0]], 0.1, 0.0);
        // bias correction makes m_hat = v_hat = g
        assert!((p[0] - 0.9).abs() < 1e-8, "{}", p[0]);
    }

    #[test]
    fn decoupled_decay_shrinks() {
        let mut p = vec![2.0];
        AdamW::new().step(&mut [&mut p], &[&[0.0]], 0.1, 0.05);
        assert!((p[0] - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 1e-6, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 1e-6, 100, 100) - 1e-6).abs() < 1e-18);
        let mid = cosine_lr(1e-3, 1e-6, 50, 100);
        assert!((mid - (1e-3 + 1e-6) / 2.0).abs() < 1e-15);
    }
}
