use super::{AutodiffError, Scalar, Tensor};

/// Per-parameter Adam optimizer state.
///
/// `first_moment`/`second_moment` always match the parameter buffer length;
/// `step` increments by exactly one per [`adam_step`] call.
#[derive(Clone, Debug)]
pub struct AdamState<S = f32> {
    step: u64,
    first_moment: Vec<S>,
    second_moment: Vec<S>,
    pub learning_rate: S,
    pub beta1: S,
    pub beta2: S,
    pub epsilon: S,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(param_len: usize, learning_rate: S, beta1: S, beta2: S, epsilon: S) -> Self {
        Self {
            step: 0,
            first_moment: vec![S::zero(); param_len],
            second_moment: vec![S::zero(); param_len],
            learning_rate,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// lr = 0.001, beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8.
    pub fn with_defaults(param_len: usize) -> Self {
        Self::new(
            param_len,
            S::lit(1e-3),
            S::lit(0.9),
            S::lit(0.999),
            S::lit(1e-8),
        )
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `theta <- theta - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)`.
pub fn adam_step<S: Scalar>(
    params: &mut Tensor<S>,
    grads: &[S],
    state: &mut AdamState<S>,
) -> Result<(), AutodiffError> {
    if grads.len() != params.numel()
        || state.first_moment.len() != params.numel()
        || state.second_moment.len() != params.numel()
    {
        return Err(AutodiffError::ShapeMismatch(format!(
            "adam_step: params {}, grads {}, state {} lengths must agree",
            params.numel(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let one = S::one();
    let bias1 = one - state.beta1.powi(t);
    let bias2 = one - state.beta2.powi(t);
    for (((theta, &g), m), v) in params
        .data_mut()
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        *m = state.beta1 * *m + (one - state.beta1) * g;
        *v = state.beta2 * *v + (one - state.beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *theta = *theta - state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}
