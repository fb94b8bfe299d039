//! Adam optimizer over flat parameter/gradient slices.

use super::layers::ParamRef;

/// Adam with bias-corrected first and second moment estimates.
///
/// Moment buffers are kept per parameter tensor, matched by position, so
/// callers must pass the same parameter list (same order, same shapes) to
/// every [`Adam::step`] call.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    state: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            t: 0,
            state: Vec::new(),
        }
    }

    /// Apply one update and clear the gradients.
    pub fn step(&mut self, params: &mut [ParamRef<'_>]) {
        if self.state.is_empty() {
            self.state = params
                .iter()
                .map(|p| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]))
                .collect();
        }
        assert_eq!(
            self.state.len(),
            params.len(),
            "parameter list changed between steps"
        );
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (param, (m, v)) in params.iter_mut().zip(self.state.iter_mut()) {
            assert_eq!(param.value.len(), m.len(), "parameter shape changed");
            for i in 0..param.value.len() {
                let g = param.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param.value[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                param.grad[i] = 0.0;
            }
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // with bias correction, |update| = lr * g / (|g| + eps) ≈ lr on step 1
        let mut value = vec![1.0];
        let mut grad = vec![0.5];
        let mut adam = Adam::new(0.1);
        adam.step(&mut [ParamRef {
            value: &mut value,
            grad: &mut grad,
        }]);
        assert!((value[0] - 0.9).abs() < 1e-6);
        assert_eq!(grad[0], 0.0, "gradients cleared after step");
    }

    #[test]
    fn converges_on_quadratic() {
        // minimize (x - 3)^2
        let mut x = vec![0.0];
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let mut g = vec![2.0 * (x[0] - 3.0)];
            adam.step(&mut [ParamRef {
                value: &mut x,
                grad: &mut g,
            }]);
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "x = {}", x[0]);
    }
}
