use crate::{Parameter, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamConfig {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    /// Bias-correction denominators `(1 - beta1^t, 1 - beta2^t)` for step `t`.
    pub fn bias_correction(&self, t: u64) -> (f64, f64) {
        (1.0 - self.beta1.powi(t as i32), 1.0 - self.beta2.powi(t as i32))
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig::new(1e-3, 0.9, 0.999)
    }
}

/// Moment estimates for one parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(shape: &[usize], config: AdamConfig) -> Self {
        AdamState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
            config,
        }
    }
}

/// One Adam update of a single scalar, given the step's
/// [`AdamConfig::bias_correction`].
#[inline]
pub fn adam_update(value: &mut f64, m: &mut f64, v: &mut f64, grad: f64, correction: (f64, f64), cfg: &AdamConfig) {
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * grad;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * grad * grad;
    let m_hat = *m / correction.0;
    let v_hat = *v / correction.1;
    *value -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
}

/// Applies the accumulated gradient of `param` and clears it.
pub fn adam_step(param: &mut Parameter, state: &mut AdamState) {
    debug_assert_eq!(param.shape(), state.m.shape());
    state.t += 1;
    let cfg = state.config;
    let correction = cfg.bias_correction(state.t);
    let grad = param.grad().clone();
    let value = param.value_mut().data_mut();
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for i in 0..value.len() {
        adam_update(&mut value[i], &mut m[i], &mut v[i], grad.data()[i], correction, &cfg);
    }
    param.zero_grad();
}

/// Adam over an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: &[Parameter], config: AdamConfig) -> Self {
        Adam {
            states: params.iter().map(|p| AdamState::new(p.shape(), config)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Parameter]) {
        assert_eq!(params.len(), self.states.len(), "parameter list changed");
        for (p, s) in params.iter_mut().zip(&mut self.states) {
            adam_step(p, s);
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.first().map_or(0, |s| s.t)
    }
}
