//! Adam with bias correction, keyed by parameter name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nn::Param;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    1e-8
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
}

/// One optimizer instance. Each parameter carries its own step count, so a
/// parameter that skips an update is not advanced.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub settings: AdamSettings,
    pub slots: BTreeMap<String, Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(settings: AdamSettings) -> Self {
        Self {
            settings,
            slots: BTreeMap::new(),
        }
    }

    /// Applies one update to `param` from its accumulated gradient.
    pub fn update(&mut self, name: &str, param: &mut Param<T>) {
        let s = self.settings;
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Moments {
            m: Tensor::zeros(param.value.shape()),
            v: Tensor::zeros(param.value.shape()),
            t: 0,
        });
        slot.t += 1;
        let (b1, b2) = (T::lit(s.beta1), T::lit(s.beta2));
        let bc1 = 1.0 - s.beta1.powi(slot.t as i32);
        let bc2 = 1.0 - s.beta2.powi(slot.t as i32);
        let step = T::lit(s.learning_rate / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(s.eps);
        let g = param.grad.data();
        let m = slot.m.data_mut();
        let v = slot.v.data_mut();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
        }
        if s.learning_rate == 0.0 {
            return;
        }
        for (p, (&mi, &vi)) in param.value.data_mut().iter_mut().zip(m.iter().zip(v.iter())) {
            *p -= step * mi / (vi.sqrt() / bc2_sqrt + eps);
        }
    }
}
