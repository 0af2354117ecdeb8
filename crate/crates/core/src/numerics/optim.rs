// Copyright 2026 The medbert authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

use super::{ParameterStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay, applied only to parameters registered with `decay = true`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParameterStore) -> Self {
        let zeros =
            |p: &ParameterStore| -> Vec<Tensor> { p.ids().map(|id| Tensor::zeros(p.value(id).shape())).collect() };
        OptimizerState {
            config,
            step: 0,
            first: zeros(params),
            second: zeros(params),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.second[i]
    }
}

/// One bias-corrected Adam update at rate `lr · lr_scale`, then zeroes all gradients.
pub fn adam_step(params: &mut ParameterStore, state: &mut OptimizerState, lr_scale: f64) {
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let lr = c.lr * lr_scale;
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let decay = if params.decays(id) { c.weight_decay } else { 0.0 };
        let (value, grad) = params.value_and_grad_mut(id);
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, (p, g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let update = m_hat / (v_hat.sqrt() + c.epsilon) + decay * *p;
            *p -= lr * update;
        }
        grad.fill(0.0);
    }
}

/// Linear warmup from 0 to `base_lr` over `[0, warmup]`, then linear decay to 0 at `total`.
pub fn lr_schedule(step: u64, warmup: u64, total: u64, base_lr: f64) -> f64 {
    let step = step.min(total);
    if warmup > 0 && step <= warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base_lr;
    }
    base_lr * (total - step) as f64 / (total - warmup) as f64
}
