//! Rectified Adam optimizer with per-tensor moment state.

use ndarray::ArrayD;

/// Rectified Adam: warms up without adaptive scaling while the variance
/// estimate is unreliable (rectification term <= 4), then switches to the
/// variance-rectified update.
#[derive(Debug, Clone)]
pub struct RAdam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(ArrayD<f64>, ArrayD<f64>)>,
}

impl RAdam {
    pub fn new() -> Self {
        RAdam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Drop all moment state (used when the critic is re-initialized).
    pub fn reset(&mut self) {
        self.step = 0;
        self.moments.clear();
    }

    /// Apply one update. `grads[i] = None` is treated as a zero gradient.
    /// Parameter order must stay fixed across calls.
    pub fn step(&mut self, params: &mut [&mut ArrayD<f64>], grads: &[Option<&ArrayD<f64>>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (ArrayD::zeros(p.raw_dim()), ArrayD::zeros(p.raw_dim())))
                .collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter set changed");

        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - self.beta1.powf(t);
        let bias2 = 1.0 - self.beta2.powf(t);
        let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
        let rho =
            rho_inf - 2.0 * t * self.beta2.powf(t) / bias2;
        let rect = if rho > 4.0 {
            Some(
                (((rho - 4.0) * (rho - 2.0) * rho_inf)
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
                    .sqrt(),
            )
        } else {
            None
        };

        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.moments.iter_mut())
        {
            let zero;
            let g = match grad {
                Some(g) => {
                    debug_assert_eq!(g.shape(), param.shape());
                    *g
                }
                None => {
                    zero = ArrayD::zeros(param.raw_dim());
                    &zero
                }
            };
            ndarray::Zip::from(&mut **param)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bias1;
                    match rect {
                        Some(r) => {
                            let denom = (*v / bias2).sqrt() + self.eps;
                            *p -= lr * r * m_hat / denom;
                        }
                        None => *p -= lr * m_hat,
                    }
                });
        }
    }

    /// Moment tensors for checkpointing, keyed by slot index.
    pub fn export(&self) -> (u64, Vec<(ArrayD<f64>, ArrayD<f64>)>) {
        (self.step, self.moments.clone())
    }

    pub fn import(&mut self, step: u64, moments: Vec<(ArrayD<f64>, ArrayD<f64>)>) {
        self.step = step;
        self.moments = moments;
    }
}

impl Default for RAdam {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, IxDyn};

    #[test]
    fn early_steps_are_unrectified_sgd_on_momentum() {
        // With constant unit gradient, rho_t <= 4 for the first steps, so the
        // update is exactly -lr * m_hat = -lr.
        let mut opt = RAdam::new();
        let mut p = ArrayD::zeros(IxDyn(&[1]));
        let g = arr1(&[1.0]).into_dyn();
        opt.step(&mut [&mut p], &[Some(&g)], 0.1);
        assert!((p[[0]] - (-0.1)).abs() < 1e-12);
        opt.step(&mut [&mut p], &[Some(&g)], 0.1);
        assert!((p[[0]] - (-0.2)).abs() < 1e-12);
    }

    #[test]
    fn rectification_kicks_in_at_step_five() {
        let mut opt = RAdam::new();
        let mut p = ArrayD::zeros(IxDyn(&[1]));
        let g = arr1(&[1.0]).into_dyn();
        for _ in 0..4 {
            opt.step(&mut [&mut p], &[Some(&g)], 0.1);
        }
        assert!((p[[0]] - (-0.4)).abs() < 1e-12);
        // Step 5: rho_5 ~ 4.99 > 4; update becomes lr * r_5 * m_hat / denom.
        opt.step(&mut [&mut p], &[Some(&g)], 0.1);
        let delta = -0.4 - p[[0]];
        assert!(delta > 0.0 && delta < 0.1, "rectified step was {delta}");
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut opt = RAdam::new();
        let mut p = arr1(&[3.0, -2.0]).into_dyn();
        for _ in 0..2000 {
            let g = p.mapv(|x| 2.0 * x);
            opt.step(&mut [&mut p], &[Some(&g)], 0.01);
        }
        assert!(p.iter().all(|&x| x.abs() < 1e-3), "{p:?}");
    }

    #[test]
    fn missing_gradients_decay_momentum_only() {
        let mut opt = RAdam::new();
        let mut p = arr1(&[1.0]).into_dyn();
        opt.step(&mut [&mut p], &[None], 0.1);
        assert_eq!(p[[0]], 1.0);
    }

    #[test]
    fn export_import_round_trip() {
        let mut opt = RAdam::new();
        let mut p = arr1(&[1.0, 2.0]).into_dyn();
        let g = arr1(&[0.5, -0.5]).into_dyn();
        for _ in 0..10 {
            opt.step(&mut [&mut p], &[Some(&g)], 0.05);
        }
        let (step, moments) = opt.export();
        let mut p2 = p.clone();

        let mut restored = RAdam::new();
        restored.import(step, moments);
        opt.step(&mut [&mut p], &[Some(&g)], 0.05);
        restored.step(&mut [&mut p2], &[Some(&g)], 0.05);
        assert_eq!(p, p2);
    }
}
