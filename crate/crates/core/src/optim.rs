//! Gradient descent and Adam over complex parameters.
//!
//! Gradients are in the tape's `∂/∂a + j·∂/∂b` convention, so both
//! optimizers act on the real and imaginary planes independently.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PtychoError, Result};
use crate::tensor::{ComplexTensor, Shape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Gd,
    #[default]
    Adam,
}

/// `x ← x − α·grad`.
pub fn gd_step(x: &mut ComplexTensor, grad: &ComplexTensor, lr: f64) -> Result<()> {
    grad.expect_shape(x.shape(), "gd_step")?;
    let (xr, xi) = x.planes_mut();
    for (v, g) in xr.iter_mut().zip(grad.re()) {
        *v -= lr * g;
    }
    for (v, g) in xi.iter_mut().zip(grad.im()) {
        *v -= lr * g;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per real coordinate, stored as complex tensors
/// whose planes hold the moments of the real and imaginary parts.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ComplexTensor,
    pub v: ComplexTensor,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(shape: Shape) -> Self {
        Self::with_hyper(shape, AdamHyper::default())
    }

    pub fn with_hyper(shape: Shape, hyper: AdamHyper) -> Self {
        Self {
            m: ComplexTensor::zeros(shape.0, shape.1),
            v: ComplexTensor::zeros(shape.0, shape.1),
            step: 0,
            hyper,
        }
    }

    /// Bias-corrected Adam update.
    ///
    /// An all-zero gradient leaves both `x` and the state untouched, so a
    /// parameter sitting at a stationary point stays exactly there.
    pub fn step(&mut self, x: &mut ComplexTensor, grad: &ComplexTensor, lr: f64) -> Result<()> {
        grad.expect_shape(x.shape(), "adam_step")?;
        self.m.expect_shape(x.shape(), "adam_step")?;
        if grad.re().iter().chain(grad.im()).all(|&g| g == 0.0) {
            return Ok(());
        }
        self.step += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (mr, mi) = self.m.planes_mut();
        let (vr, vi) = self.v.planes_mut();
        let (xr, xi) = x.planes_mut();
        let update = |x: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for i in 0..x.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                x[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        };
        update(xr, mr, vr, grad.re());
        update(xi, mi, vi, grad.im());
        Ok(())
    }
}

/// Shuffled index batches for one epoch.
///
/// The permutation comes from a ChaCha8 stream keyed by `(seed, epoch)`, so
/// any epoch's schedule can be regenerated without replaying earlier ones.
/// The last batch is short when `batch_size` does not divide `count`.
pub fn batch_schedule(count: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > count {
        return Err(PtychoError::InvalidArgument(format!(
            "batch size {batch_size} must lie in 1..={count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::num_complex::Complex64;

    fn scalar(v: Complex64) -> ComplexTensor {
        ComplexTensor::scalar(v)
    }

    #[test]
    fn zero_gradient_or_rate_is_a_no_op() {
        let x0 = scalar(Complex64::new(1.5, -2.0));
        let mut x = x0.clone();
        gd_step(&mut x, &scalar(Complex64::new(0.0, 0.0)), 0.3).unwrap();
        assert_eq!(x, x0);
        gd_step(&mut x, &scalar(Complex64::new(4.0, 1.0)), 0.0).unwrap();
        assert_eq!(x, x0);
        let mut adam = AdamState::new((1, 1));
        adam.step(&mut x, &scalar(Complex64::new(0.0, 0.0)), 0.1).unwrap();
        assert_eq!(x, x0);
        assert_eq!(adam.step, 0);
    }

    fn quadratic_grad(x: &ComplexTensor, c: Complex64) -> ComplexTensor {
        // L = |x − c|²  ⇒  grad = 2(x − c).
        scalar((x.item() - c) * 2.0)
    }

    #[test]
    fn gd_converges_geometrically_on_quadratic() {
        let c = Complex64::new(0.7, -0.2);
        let lr = 0.2;
        let x0 = Complex64::new(3.0, 1.0);
        let mut x = scalar(x0);
        for k in 1..=20 {
            let g = quadratic_grad(&x, c);
            gd_step(&mut x, &g, lr).unwrap();
            // x_k − c = (1 − 2α)^k (x_0 − c).
            let expected = c + (x0 - c) * (1.0 - 2.0 * lr).powi(k);
            assert!((x.item() - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn first_adam_step_has_learning_rate_magnitude() {
        for &scale in &[1e-6, 1.0, 1e6] {
            let mut x = ComplexTensor::from_fn(1, 3, |_, c| Complex64::new(c as f64, 1.0));
            let before = x.clone();
            let g = ComplexTensor::from_fn(1, 3, |_, c| Complex64::new(scale * (c as f64 + 1.0), -scale));
            AdamState::new((1, 3)).step(&mut x, &g, 0.01).unwrap();
            for (a, b) in x.re().iter().chain(x.im()).zip(before.re().iter().chain(before.im())) {
                assert!(((a - b).abs() - 0.01).abs() < 1e-4, "scale {scale}: step {}", (a - b).abs());
            }
        }
    }

    fn iterations_to(tol: f64, mut step: impl FnMut(&mut ComplexTensor, &ComplexTensor)) -> usize {
        let c = Complex64::new(0.7, -0.2);
        let mut x = scalar(Complex64::new(1.0, 0.1));
        for k in 0..100_000 {
            if (x.item() - c).norm() < tol {
                return k;
            }
            let g = quadratic_grad(&x, c);
            step(&mut x, &g);
        }
        usize::MAX
    }

    #[test]
    fn adam_beats_gd_on_quadratic_at_equal_rate() {
        let lr = 1e-3;
        let gd = iterations_to(1e-6, |x, g| gd_step(x, g, lr).unwrap());
        let mut state = AdamState::new((1, 1));
        let adam = iterations_to(1e-6, |x, g| state.step(x, g, lr).unwrap());
        assert!(adam < gd, "adam {adam} vs gd {gd}");
    }

    #[test]
    fn full_batch_and_epoch_coverage() {
        let full = batch_schedule(7, 7, 3, 0).unwrap();
        assert_eq!(full.len(), 1);
        let mut all = full[0].clone();
        all.sort_unstable();
        assert_eq!(all, (0..7).collect::<Vec<_>>());

        for epoch in 0..5 {
            let batches = batch_schedule(49, 5, 11, epoch).unwrap();
            assert_eq!(batches.len(), 10);
            let mut seen: Vec<usize> = batches.concat();
            seen.sort_unstable();
            assert_eq!(seen, (0..49).collect::<Vec<_>>());
        }
        assert!(batch_schedule(4, 0, 0, 0).is_err());
        assert!(batch_schedule(4, 5, 0, 0).is_err());
    }

    #[test]
    fn schedule_is_seeded_and_reshuffled() {
        assert_eq!(batch_schedule(30, 4, 9, 2).unwrap(), batch_schedule(30, 4, 9, 2).unwrap());
        assert_ne!(batch_schedule(30, 4, 9, 2).unwrap(), batch_schedule(30, 4, 9, 3).unwrap());
        assert_ne!(batch_schedule(30, 4, 9, 2).unwrap(), batch_schedule(30, 4, 10, 2).unwrap());
    }
}
