//! First-order optimizers over flat parameter buffers.

use super::config::Optimizer;
use crate::tensor::Scalar;

/// Per-parameter optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub step: u64,
    /// Adam first moment, or SGD velocity.
    pub m: Vec<Vec<T>>,
    /// Adam second moment; empty for SGD.
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn zeros(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<T>> = sizes.into_iter().map(|n| vec![T::zero(); n]).collect();
        Self { step: 0, v: m.clone(), m }
    }
}

/// One bias-corrected Adam update with decoupled weight decay on one tensor.
/// `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    (beta1, beta2, eps): (f64, f64, f64),
    weight_decay: f64,
) {
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
    let (one, lr_t, eps_t, wd) =
        (T::one(), T::from_f64_lossy(lr), T::from_f64_lossy(eps), T::from_f64_lossy(weight_decay));
    let (c1, c2) = (T::from_f64_lossy(c1), T::from_f64_lossy(c2));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] = param[i] - lr_t * (m_hat / (v_hat.sqrt() + eps_t) + wd * param[i]);
    }
}

/// Applies one optimizer step to every parameter tensor.
pub fn optimizer_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[Vec<T>],
    state: &mut OptimState<T>,
    optimizer: Optimizer,
    lr: f64,
    weight_decay: f64,
) {
    state.step += 1;
    for (i, p) in params.iter_mut().enumerate() {
        match optimizer {
            Optimizer::Adam { beta1, beta2, eps } => adam_update(
                p,
                &grads[i],
                &mut state.m[i],
                &mut state.v[i],
                state.step,
                lr,
                (beta1, beta2, eps),
                weight_decay,
            ),
            Optimizer::Sgd { momentum } => {
                let (mu, lr_t, wd) =
                    (T::from_f64_lossy(momentum), T::from_f64_lossy(lr), T::from_f64_lossy(weight_decay));
                for (j, x) in p.iter_mut().enumerate() {
                    let vel = &mut state.m[i][j];
                    *vel = mu * *vel + grads[i][j];
                    *x = *x - lr_t * (*vel + wd * *x);
                }
            }
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g = *g * s);
    }
    norm
}
