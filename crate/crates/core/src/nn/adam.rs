use super::weights::WeightSet;

/// Adaptive-moment optimiser over a [`WeightSet`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: WeightSet,
    v: WeightSet,
}

impl Adam {
    pub fn new(params: &WeightSet, lr: f64, betas: (f64, f64)) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every tensor for which `trainable(name)` holds.
    pub fn step(&mut self, params: &mut WeightSet, grads: &WeightSet, trainable: impl Fn(&str) -> bool) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.data_mut(name);
            for (mi, gi) in m.iter_mut().zip(&g.data) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.v.data_mut(name);
            for (vi, gi) in v.iter_mut().zip(&g.data) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let (m, v) = (self.m.data(name), self.v.data(name));
            for ((pi, mi), vi) in p.data.iter_mut().zip(m).zip(v) {
                *pi -= self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
            }
        }
    }
}
