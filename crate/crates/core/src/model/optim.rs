/// Adaptive moment estimation with bias-corrected first and second moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta_m: f64,
    pub beta_v: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta_m: 0.9,
            beta_v: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    params: AdamParams,
    learning_rate: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(num_params: usize, learning_rate: f64, params: AdamParams) -> Self {
        Self {
            params,
            learning_rate,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn step(&mut self, weights: &mut [f64], grads: &[f64]) {
        assert_eq!(weights.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let AdamParams {
            beta_m,
            beta_v,
            epsilon,
        } = self.params;
        let correct_m = 1.0 - beta_m.powi(self.step);
        let correct_v = 1.0 - beta_v.powi(self.step);
        for ((w, &g), (m, v)) in weights
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = beta_m * *m + (1.0 - beta_m) * g;
            *v = beta_v * *v + (1.0 - beta_v) * g * g;
            let m_hat = *m / correct_m;
            let v_hat = *v / correct_v;
            *w -= self.learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // with bias correction the first update is lr * g / (|g| + eps)
        let mut adam = Adam::new(2, 0.1, AdamParams::default());
        let mut w = [1.0, -1.0];
        adam.step(&mut w, &[3.0, -0.5]);
        assert!((w[0] - 0.9).abs() < 1e-8);
        assert!((w[1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::new(1, 0.05, AdamParams::default());
        let mut w = [5.0];
        for _ in 0..2000 {
            let g = [2.0 * (w[0] - 1.5)];
            adam.step(&mut w, &g);
        }
        assert!((w[0] - 1.5).abs() < 1e-3);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut adam = Adam::new(3, 0.0, AdamParams::default());
        let mut w = [0.25, -3.0, 7.0];
        adam.step(&mut w, &[1.0, 2.0, -4.0]);
        assert_eq!(w, [0.25, -3.0, 7.0]);
    }
}
