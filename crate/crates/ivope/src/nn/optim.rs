//! Adam and optimistic Adam.

use ndarray::Array2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptKind {
    Adam,
    /// Optimistic Adam: the applied update is
    /// `2 * (current Adam step) - (previous Adam step)`, with the previous
    /// step cached (zero on the first call).
    OAdam,
}

/// Optimizer state shaped like the parameter list it updates.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptKind,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    prev: Vec<Array2<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(
        kind: OptKind,
        step_size: f64,
        beta1: f64,
        beta2: f64,
        shapes: &[Array2<f64>],
    ) -> Self {
        let zeros: Vec<Array2<f64>> = shapes.iter().map(|p| Array2::zeros(p.dim())).collect();
        Optimizer {
            kind,
            step_size,
            beta1,
            beta2,
            epsilon: 1e-8,
            m: zeros.clone(),
            v: zeros.clone(),
            prev: if kind == OptKind::OAdam { zeros } else { Vec::new() },
            t: 0,
        }
    }

    pub fn adam(step_size: f64, params: &[Array2<f64>]) -> Self {
        Self::new(OptKind::Adam, step_size, 0.9, 0.999, params)
    }

    pub fn oadam(step_size: f64, beta1: f64, beta2: f64, params: &[Array2<f64>]) -> Self {
        Self::new(OptKind::OAdam, step_size, beta1, beta2, params)
    }

    /// Applies one update in place. The "Adam step" is the bias-corrected
    /// quantity `lr * m_hat / (sqrt(v_hat) + eps)` subtracted from the
    /// parameters.
    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) {
        assert_eq!(params.len(), self.m.len(), "parameter count");
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            ndarray::Zip::from(&mut self.m[i])
                .and(&grads[i])
                .for_each(|m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            ndarray::Zip::from(&mut self.v[i])
                .and(&grads[i])
                .for_each(|v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            match self.kind {
                OptKind::Adam => {
                    ndarray::Zip::from(&mut params[i])
                        .and(&self.m[i])
                        .and(&self.v[i])
                        .for_each(|p, &m, &v| {
                            let s = self.step_size * (m / bc1) / ((v / bc2).sqrt() + self.epsilon);
                            *p -= s;
                        });
                }
                OptKind::OAdam => {
                    let prev = &mut self.prev[i];
                    ndarray::Zip::from(&mut params[i])
                        .and(&self.m[i])
                        .and(&self.v[i])
                        .and(prev)
                        .for_each(|p, &m, &v, cache| {
                            let s = self.step_size * (m / bc1) / ((v / bc2).sqrt() + self.epsilon);
                            *p -= 2.0 * s - *cache;
                            *cache = s;
                        });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    #[test]
    fn zero_gradient_keeps_parameters_fixed() {
        let mut params = vec![arr2(&[[1.0, -2.0]])];
        let grads = vec![Array2::zeros((1, 2))];
        let mut opt = Optimizer::adam(0.1, &params);
        for _ in 0..100 {
            opt.step(&mut params, &grads);
        }
        assert_eq!(params[0], arr2(&[[1.0, -2.0]]));
    }

    #[test]
    fn oadam_first_step_is_twice_adam() {
        let start = vec![arr2(&[[1.0]])];
        let grads = vec![arr2(&[[0.5]])];

        let mut p_adam = start.clone();
        let mut adam = Optimizer::adam(0.01, &p_adam);
        adam.step(&mut p_adam, &grads);
        let adam_step = 1.0 - p_adam[0][[0, 0]];

        let mut p_oadam = start.clone();
        let mut oadam = Optimizer::oadam(0.01, 0.9, 0.999, &p_oadam);
        oadam.step(&mut p_oadam, &grads);
        let oadam_step = 1.0 - p_oadam[0][[0, 0]];

        assert_abs_diff_eq!(oadam_step, 2.0 * adam_step, epsilon = 1e-15);
    }

    #[test]
    fn adam_descends_a_quadratic_bowl() {
        // loss = 1/2 (x^2 + 10 y^2)
        let mut params = vec![arr2(&[[3.0, -2.0]])];
        let mut opt = Optimizer::adam(0.05, &params);
        let loss = |p: &Array2<f64>| 0.5 * (p[[0, 0]] * p[[0, 0]] + 10.0 * p[[0, 1]] * p[[0, 1]]);
        let mut last = loss(&params[0]);
        for _ in 0..100 {
            let g = arr2(&[[params[0][[0, 0]], 10.0 * params[0][[0, 1]]]]);
            opt.step(&mut params, &[g]);
            let now = loss(&params[0]);
            assert!(now < last, "loss must strictly decrease: {now} !< {last}");
            last = now;
        }
    }
}
