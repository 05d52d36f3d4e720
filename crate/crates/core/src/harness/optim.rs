use crate::tape::Mat;

/// Cosine decay from `base` at step 0 to `floor · base` at `total_steps − 1`.
pub fn cosine_lr(base: f64, floor: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return base;
    }
    let t = (step.min(total_steps - 1)) as f64 / (total_steps - 1) as f64;
    let end = floor * base;
    end + (base - end) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam with the usual moment coefficients and bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&s| Mat::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Mat::zeros(s)).collect(),
        }
    }

    /// Updates `params[i] -= lr[i] · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Mat], lrs: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, lrs[i]);
            ndarray::Zip::from(&mut *params[i])
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&grads[i])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0.005, 0.0, 0, 100), 0.005);
        assert!(cosine_lr(0.005, 0.0, 99, 100) <= 0.005e-3);
        assert!((cosine_lr(1.0, 0.0, 50, 101) - 0.5).abs() < 1e-12);
        assert_eq!(cosine_lr(0.1, 0.0, 0, 1), 0.1);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = array![[1.0, -1.0]];
        let mut opt = Adam::new(&[(1, 2)]);
        opt.step(&mut [&mut p], &[array![[0.5, -3.0]]], &[0.1]);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 0.9).abs() < 1e-6);
    }
}
