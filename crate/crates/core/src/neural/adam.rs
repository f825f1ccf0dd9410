use serde::{Deserialize, Serialize};

use super::vae::{VaeGradients, VaeNet};

/// Adam optimiser state over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One descent step on `params` given the loss gradient.
    pub fn minimize(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(
            params.len(),
            grads.len(),
            "gradient length must match parameter count"
        );
        if self.m.len() != params.len() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Ascent step on the ELBO: `grads` are `∂ELBO/∂θ`.
pub fn optimize_step(net: &mut VaeNet, grads: &VaeGradients, state: &mut AdamState) {
    let mut params = net.params_flat();
    let loss_grads: Vec<f64> = grads.flat().into_iter().map(|g| -g).collect();
    state.minimize(&mut params, &loss_grads);
    net.set_params_flat(&params);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut adam = AdamState::new(3, 1e-3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.minimize(&mut p, &[0.0; 3]);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn single_step_descends_a_quadratic() {
        let mut adam = AdamState::new(1, 0.1);
        let mut w = [1.0];
        let g = [2.0 * w[0]];
        adam.minimize(&mut w, &g);
        assert!(w[0] < 1.0);
    }

    #[test]
    fn converges_on_a_convex_quadratic() {
        // f(w) = Σ c_i (w_i − t_i)², minimum 0.
        let c = [1.0, 3.0, 0.5];
        let t = [0.3, -1.2, 2.0];
        let f = |w: &[f64]| (0..3).map(|i| c[i] * (w[i] - t[i]).powi(2)).sum::<f64>();
        let mut adam = AdamState::new(3, 0.1);
        let mut w = vec![0.0; 3];
        for _ in 0..200 {
            let g: Vec<f64> = (0..3).map(|i| 2.0 * c[i] * (w[i] - t[i])).collect();
            adam.minimize(&mut w, &g);
        }
        assert!(f(&w) < 1e-3, "loss {}", f(&w));
    }
}
