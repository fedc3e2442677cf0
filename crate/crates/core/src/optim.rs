//! Optimizers: in-graph SGD steps for within-episode adaptation, and Adam
//! over raw parameter buffers for the outer loop.

use crate::tensor::Tensor;

/// One gradient-descent step per parameter, built in-graph:
/// `p' = p − α·g`.
///
/// With `differentiable == false` each gradient enters as a constant, so
/// later differentiation of anything built on `p'` treats the step direction
/// as fixed (first-order adaptation). With `true` the gradient tensor stays
/// connected and the update is differentiated through (second-order).
///
/// A `None` gradient means the loss did not reach that parameter; the
/// parameter passes through unchanged (a zero-gradient step).
pub fn sgd_step(
    params: &[Tensor],
    grads: &[Option<Tensor>],
    alpha: f64,
    differentiable: bool,
) -> Vec<Tensor> {
    assert_eq!(params.len(), grads.len(), "sgd_step: {} params vs {} grads", params.len(), grads.len());
    params
        .iter()
        .zip(grads)
        .map(|(p, g)| match g {
            None => p.clone(),
            Some(g) => {
                assert_eq!(
                    p.shape(),
                    g.shape(),
                    "sgd_step: param/grad shape mismatch"
                );
                let g = if differentiable { g.clone() } else { g.detach() };
                p.sub(&g.scale(alpha))
            }
        })
        .collect()
}

/// Adam state over an ordered list of parameter buffers. The slot order is
/// fixed at construction and must match every subsequent `step` call.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// β1 = 0.9, β2 = 0.999, eps = 1e-8.
    pub fn new(lr: f64, sizes: &[usize]) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update across all slots:
    /// `m ← β1·m + (1−β1)·g`, `v ← β2·v + (1−β2)·g²`,
    /// `p ← p − lr·m̂/(√v̂ + eps)`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len(), "adam: {} slots vs {} state buffers", params.len(), self.m.len());
        assert_eq!(params.len(), grads.len(), "adam: {} slots vs {} grads", params.len(), grads.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.len(), self.m[slot].len(), "adam: slot {slot} size changed");
            assert_eq!(p.len(), g.len(), "adam: slot {slot} param/grad length mismatch");
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_arithmetic() {
        let p = Tensor::leaf(vec![1.0], &[1]);
        let g = Tensor::constant(vec![0.5], &[1]);
        let out = sgd_step(&[p], &[Some(g)], 0.01, false);
        assert!((out[0].data()[0] - 0.995).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_or_missing_grad_is_identity() {
        let p = Tensor::leaf(vec![2.0, 3.0], &[2]);
        let out = sgd_step(&[p.clone()], &[None], 0.1, false);
        assert_eq!(out[0].data(), p.data());
        let z = Tensor::zeros(&[2]);
        let out = sgd_step(&[p.clone()], &[Some(z)], 0.1, false);
        assert_eq!(out[0].data(), p.data());
    }

    #[test]
    fn two_sgd_steps_with_constant_gradient_compose_linearly() {
        let p = Tensor::leaf(vec![1.0], &[1]);
        let g = Tensor::constant(vec![0.25], &[1]);
        let once = sgd_step(&[p.clone()], &[Some(g.clone())], 0.2, false);
        let twice = sgd_step(&once, &[Some(g.clone())], 0.2, false);
        let big = sgd_step(&[p], &[Some(g)], 0.4, false);
        assert!((twice[0].data()[0] - big[0].data()[0]).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // With bias correction, step 1 moves each coordinate by ≈ lr·sign(g).
        let mut adam = Adam::new(0.001, &[2]);
        let mut p = vec![1.0, -2.0];
        let g = vec![3.0, -0.004];
        adam.step(&mut [&mut p], &[&g]);
        assert!((p[0] - (1.0 - 0.001)).abs() < 1e-6);
        assert!((p[1] - (-2.0 + 0.001)).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_gradients_fix_point() {
        let mut adam = Adam::new(0.01, &[3]);
        let mut p = vec![1.0, 2.0, 3.0];
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]]);
        }
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn adam_three_step_trajectory_matches_hand_reference() {
        // f(θ) = θ², g = 2θ, hand-rolled textbook update as the oracle.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut theta_ref = 0.7f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut reference = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * theta_ref;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            theta_ref -= lr * m_hat / (v_hat.sqrt() + eps);
            reference.push(theta_ref);
        }

        let mut adam = Adam::new(lr, &[1]);
        let mut p = vec![0.7f64];
        for want in reference {
            let g = vec![2.0 * p[0]];
            adam.step(&mut [&mut p], &[&g]);
            assert!((p[0] - want).abs() < 1e-12, "{} vs {want}", p[0]);
        }
    }
}
