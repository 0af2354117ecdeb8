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

//! Central finite-difference gradient checking.

use super::{Graph, NumericsError, ParameterStore, Var};

/// Per-parameter comparison of analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, or the absolute
    /// norm difference when both norms are below `1e-10`.
    pub relative_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries.iter().map(|e| e.relative_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error() < tolerance
    }
}

/// Compares the backward pass of `loss_fn` against central differences with step `h`.
///
/// `loss_fn` must build a scalar loss from the store's current values and be
/// deterministic (fixed dropout seeds and so on).
pub fn check_gradients<F>(store: &mut ParameterStore, h: f64, mut loss_fn: F) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&mut Graph, &ParameterStore) -> Result<Var, NumericsError>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.ids().map(|id| store.grad(id).data().to_vec()).collect();
    store.zero_grads();

    let mut eval = |s: &ParameterStore| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let ids: Vec<_> = store.ids().collect();
    let mut entries = Vec::with_capacity(ids.len());
    for (pi, id) in ids.into_iter().enumerate() {
        let n = store.value(id).len();
        let mut numeric = vec![0.0; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + h;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig - h;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let a = &analytic[pi];
        let diff = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let relative_error = if denom < 1e-10 { diff } else { diff / denom };
        let max_abs_error = a.iter().zip(&numeric).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        entries.push(GradCheckEntry {
            name: store.name(id).to_string(),
            relative_error,
            max_abs_error,
        });
    }
    Ok(GradCheckReport { entries })
}
