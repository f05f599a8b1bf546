use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{MiraError, Result};

/// Decoupled-weight-decay Adam.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(
        &self,
        param: &mut Tensor,
        grad: &Tensor,
        state: &mut OptimizerState,
    ) -> Result<()> {
        self.step_masked(param, grad, state, None)
    }

    /// Like [`AdamW::step`], but entries whose mask is `false` are left
    /// untouched (moments included).
    pub fn step_masked(
        &self,
        param: &mut Tensor,
        grad: &Tensor,
        state: &mut OptimizerState,
        mask: Option<&[bool]>,
    ) -> Result<()> {
        if grad.shape() != param.shape() || state.first_moment.shape() != param.shape() {
            return Err(MiraError::Shape(format!(
                "adamw: param {:?}, grad {:?}, state {:?}",
                param.shape(),
                grad.shape(),
                state.first_moment.shape()
            )));
        }
        if mask.is_some_and(|m| m.len() != param.len()) {
            return Err(MiraError::Shape("adamw: mask length".into()));
        }
        if !grad.is_finite() {
            return Err(MiraError::Numeric("non-finite gradient".into()));
        }
        state.step_count += 1;
        let t = state.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.learning_rate * self.weight_decay;
        let m = state.first_moment.data_mut();
        let v = state.second_moment.data_mut();
        for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            if mask.is_some_and(|mask| !mask[i]) {
                continue;
            }
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *p = *p * decay - self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn for_param(param: &Tensor) -> Self {
        Self {
            first_moment: Tensor::zeros(param.shape()),
            second_moment: Tensor::zeros(param.shape()),
            step_count: 0,
        }
    }
}

/// A trainable tensor with an explicitly managed gradient buffer.
///
/// Gradients accumulate until [`Parameter::zero_grad`] is called.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub state: OptimizerState,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        Self {
            grad: Tensor::zeros(value.shape()),
            state: OptimizerState::for_param(&value),
            value,
        }
    }

    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        self.grad.add_assign(g)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn apply(&mut self, opt: &AdamW) -> Result<()> {
        opt.step(&mut self.value, &self.grad, &mut self.state)
    }
}
