//! Adam and the cosine-annealed learning-rate schedule.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi * step / total)).
/// Steps past `total_steps` clamp to `lr_min`.
pub fn cosine_anneal_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    assert!(lr_max >= lr_min && lr_min >= 0.0, "lr_max >= lr_min >= 0 required");
    if total_steps == 0 || step >= total_steps {
        return lr_min;
    }
    let frac = step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam moment estimates for one flat list of parameters (fixed order).
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(params: &[&Matrix]) -> Self {
        AdamState {
            m: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One Adam update over parameters and matching gradients. A `None`
    /// gradient leaves that parameter (and its moments) untouched, so
    /// branches that did not participate in the step stay bitwise identical.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Option<Matrix>], lr: f64) -> Result<()> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::Parameter(format!("learning rate must be >= 0, got {lr}")));
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Training(format!(
                "optimizer state tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != params[k].shape() {
                return Err(Error::dim("adam_step", params[k].shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient for parameter {k} ({}x{}); step aborted",
                    g.rows(),
                    g.cols()
                )));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (k, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = params[k].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_anneal_lr(0, 100, 1e-4, 0.0), 1e-4);
        assert!(cosine_anneal_lr(100, 100, 1e-4, 1e-6).abs() - 1e-6 < 1e-18);
        let mid = cosine_anneal_lr(50, 100, 2.0, 1.0);
        assert!((mid - 1.5).abs() < 1e-12);
        // clamps past the end
        assert_eq!(cosine_anneal_lr(150, 100, 2.0, 1.0), 1.0);
    }

    #[test]
    fn cosine_monotone_nonincreasing() {
        let mut prev = f64::INFINITY;
        for s in 0..=200 {
            let lr = cosine_anneal_lr(s, 200, 3e-4, 1e-6);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Matrix::row_vec(&[1.0, -2.0]);
        let before = p.clone();
        let mut st = AdamState::new(&[&p]);
        st.step(&mut [&mut p], &[Some(Matrix::zeros(1, 2))], 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_magnitude_is_lr_sign() {
        let mut p = Matrix::row_vec(&[0.5, -0.5]);
        let g = Matrix::row_vec(&[3.0, -0.001]);
        let mut st = AdamState::new(&[&p]);
        st.step(&mut [&mut p], &[Some(g)], 0.01).unwrap();
        // bias-corrected first step: update = lr * g / (|g| + eps) ~= lr * sign(g)
        assert!((p.get(0, 0) - (0.5 - 0.01)).abs() < 1e-6);
        assert!((p.get(0, 1) - (-0.5 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut p = Matrix::row_vec(&[0.1, 0.2, 0.3]);
            let mut st = AdamState::new(&[&p]);
            for i in 0..50 {
                let g = Matrix::row_vec(&[0.1 * i as f64, -0.2, 0.05]);
                st.step(&mut [&mut p], &[Some(g)], 1e-3).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = Matrix::row_vec(&[1.0]);
        let mut st = AdamState::new(&[&p]);
        let err = st.step(&mut [&mut p], &[Some(Matrix::row_vec(&[f64::NAN]))], 1e-3);
        assert!(matches!(err, Err(Error::Training(_))));
    }
}
