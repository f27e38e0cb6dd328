/// Moment coefficients for [`Adam`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adaptive-moment optimizer with decoupled weight decay and bias
/// correction. One state slot per parameter buffer, addressed by index.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: Vec<u32>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, first: Vec::new(), second: Vec::new(), steps: Vec::new() }
    }

    /// Applies one update to parameter slot `slot`.
    pub fn step(&mut self, slot: usize, params: &mut [f32], grad: &[f32], lr: f32) {
        assert_eq!(params.len(), grad.len(), "parameter and gradient lengths differ");
        if slot >= self.first.len() {
            self.first.resize_with(slot + 1, Vec::new);
            self.second.resize_with(slot + 1, Vec::new);
            self.steps.resize(slot + 1, 0);
        }
        if self.first[slot].is_empty() {
            self.first[slot] = vec![0.0; params.len()];
            self.second[slot] = vec![0.0; params.len()];
        }
        self.steps[slot] += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.config;
        let t = self.steps[slot] as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let m = &mut self.first[slot];
        let v = &mut self.second[slot];
        for i in 0..params.len() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            params[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * params[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut opt = Adam::new(AdamConfig::default());
        let mut p = vec![1.0, -2.0];
        opt.step(0, &mut p, &[0.5, -3.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut p = vec![0.25; 4];
        opt.step(3, &mut p, &[1.0, -1.0, 0.5, 0.0], 0.0);
        assert_eq!(p, vec![0.25; 4]);
    }
}
