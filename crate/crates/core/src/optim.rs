//! Adaptive-moment optimiser with the max-of-second-moments correction
//! (AMSGrad), plus the step-decay learning-rate schedule.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    max_second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(sizes: &[usize]) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
            max_second_moment: zeros(),
        }
    }

    pub fn max_second_moment(&self) -> &[Vec<f64>] {
        &self.max_second_moment
    }

    /// One update of every tensor in `params` using `grads`.
    ///
    /// Moments use bias correction; the denominator uses the running maximum
    /// of the second moment so the effective step size never grows.
    pub fn step(&mut self, mut params: Vec<&mut [f64]>, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::DimensionMismatch {
                what: "optimizer tensor count".into(),
                expected: self.first_moment.len(),
                found: params.len().min(grads.len()),
            });
        }
        for (t, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first_moment[t].len() || g.len() != p.len() {
                return Err(Error::DimensionMismatch {
                    what: format!("optimizer tensor {t}"),
                    expected: self.first_moment[t].len(),
                    found: g.len(),
                });
            }
            crate::error::check_finite(g, |i| format!("gradient tensor {t}, entry {i}"))?;
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2_sqrt = (1.0 - self.beta2.powi(t)).sqrt();
        for (ti, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[ti];
            let v = &mut self.second_moment[ti];
            let vmax = &mut self.max_second_moment[ti];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                vmax[i] = vmax[i].max(v[i]);
                let denom = vmax[i].sqrt() / bc2_sqrt + self.eps;
                p[i] -= lr / bc1 * m[i] / denom;
            }
        }
        Ok(())
    }
}

/// `initial / decay^floor(epoch / step_epochs)`.
pub fn step_decay(epoch: usize, initial: f64, step_epochs: usize, decay: f64) -> f64 {
    let drops = epoch.checked_div(step_epochs).unwrap_or(0);
    initial / decay.powi(drops as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut state = OptimizerState::new(&[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        state.step(vec![&mut p], &[vec![0.0; 3]], 1e-3).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn quadratic_converges() {
        let mut state = OptimizerState::new(&[1]);
        let mut x = vec![1.0];
        for _ in 0..200 {
            let g = vec![2.0 * x[0]];
            state.step(vec![&mut x], &[g], 0.1).unwrap();
        }
        assert!(x[0].abs() < 0.05, "{}", x[0]);
    }

    #[test]
    fn max_second_moment_never_decreases() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut state = OptimizerState::new(&[5]);
        let mut p = vec![0.0; 5];
        let mut prev = vec![0.0; 5];
        for _ in 0..100 {
            let scale = if rng.random::<bool>() { 10.0 } else { 0.01 };
            let g: Vec<f64> = (0..5).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
            state.step(vec![&mut p], &[g], 1e-2).unwrap();
            for (now, before) in state.max_second_moment()[0].iter().zip(&prev) {
                assert!(now >= before);
            }
            prev = state.max_second_moment()[0].clone();
        }
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut state = OptimizerState::new(&[2]);
        let mut p = vec![0.0; 2];
        assert!(state.step(vec![&mut p], &[vec![0.0; 3]], 0.1).is_err());
        assert!(state.step(vec![&mut p], &[vec![f64::INFINITY, 0.0]], 0.1).is_err());
        assert_eq!(state.step, 0);
    }

    #[test]
    fn schedule() {
        assert_eq!(step_decay(0, 1e-3, 20, 10.0), 1e-3);
        assert_eq!(step_decay(19, 1e-3, 20, 10.0), 1e-3);
        assert!((step_decay(20, 1e-3, 20, 10.0) - 1e-4).abs() < 1e-18);
        // floor(79 / 20) = 3 divisions by ten.
        assert!((step_decay(79, 1e-3, 20, 10.0) - 1e-6).abs() < 1e-20);
    }
}
