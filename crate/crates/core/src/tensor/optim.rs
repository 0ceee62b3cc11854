use super::{Element, Tensor};
use crate::error::{dim_err, domain_err, Result};

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Element> AdamWState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![T::zero(); len],
            second_moment: vec![T::zero(); len],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One AdamW update: decoupled decay `p -= lr*wd*p`, then the bias-corrected
/// Adam step.
pub fn adamw_step<T: Element>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamWState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len()
        || state.first_moment.len() != params.len()
        || state.second_moment.len() != params.len()
    {
        return Err(dim_err!(
            "adamw: {} params, {} grads, moments of length {}/{}",
            params.len(),
            grads.len(),
            state.first_moment.len(),
            state.second_moment.len()
        ));
    }
    if lr < 0.0 || !lr.is_finite() {
        return Err(domain_err!("adamw learning rate must be finite and non-negative, got {lr}"));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let c1 = T::of(1.0 - state.beta1.powi(t));
    let c2 = T::of(1.0 - state.beta2.powi(t));
    let (lr_t, decay, eps) = (T::of(lr), T::of(lr * weight_decay), T::of(state.epsilon));
    for i in 0..params.len() {
        let g = grads[i];
        params[i] = params[i] - decay * params[i];
        let m = b1 * state.first_moment[i] + (T::one() - b1) * g;
        let v = b2 * state.second_moment[i] + (T::one() - b2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let m_hat = m / c1;
        let v_hat = v / c2;
        params[i] = params[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// AdamW over a list of parameter tensors, reading each tensor's `grad`.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub lr: f64,
    pub weight_decay: f64,
    states: Vec<AdamWState<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            states: params.into_iter().map(|p| AdamWState::new(p.len())).collect(),
        }
    }

    /// Missing gradients count as zero.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<T>>) -> Result<()> {
        let mut n = 0;
        for (p, state) in params.into_iter().zip(&mut self.states) {
            let grad = p.grad.take().unwrap_or_else(|| vec![T::zero(); p.len()]);
            let r = adamw_step(p.data_mut(), &grad, state, self.lr, self.weight_decay);
            p.grad = Some(grad);
            r?;
            n += 1;
        }
        if n != self.states.len() {
            return Err(dim_err!("adamw built for {} tensors, stepped with {n}", self.states.len()));
        }
        Ok(())
    }

    pub fn states(&self) -> &[AdamWState<T>] {
        &self.states
    }
}
