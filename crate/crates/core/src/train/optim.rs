use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Param, Parameterized, Tensor};

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied to matrix-shaped parameters only.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// AdamW with per-parameter moment buffers keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub steps: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, steps: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update of every parameter that received a gradient.
    pub fn step<P: Parameterized + ?Sized>(&mut self, model: &mut P, grads: &Gradients, lr: f64) {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        model.visit_params_mut(&mut |p: &mut Param| {
            let Some(g) = grads.param(&p.name) else {
                return;
            };
            let n = g.len();
            let m = self.m.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let decay = if p.value.rank() >= 2 { c.weight_decay } else { 0.0 };
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                *w -= lr * (update + decay * *w);
            }
        });
    }

    /// Moment buffers as named tensors, for checkpointing.
    pub fn state_tensors(&self) -> Vec<Param> {
        let pack = |prefix: &str, map: &BTreeMap<String, Vec<f64>>| {
            map.iter()
                .map(|(k, v)| Param::new(format!("{prefix}{k}"), Tensor::new(&[v.len()], v.clone()).expect("1-D")))
                .collect::<Vec<_>>()
        };
        let mut out = pack("adamw.m.", &self.m);
        out.extend(pack("adamw.v.", &self.v));
        out
    }

    pub fn from_state(config: AdamWConfig, steps: u64, tensors: &[Param]) -> Result<Self> {
        let mut opt = AdamW::new(config);
        opt.steps = steps;
        for p in tensors {
            let data = p.value.data().to_vec();
            if let Some(name) = p.name.strip_prefix("adamw.m.") {
                opt.m.insert(name.to_string(), data);
            } else if let Some(name) = p.name.strip_prefix("adamw.v.") {
                opt.v.insert(name.to_string(), data);
            } else {
                return Err(Error::Format(format!("unexpected optimizer tensor {}", p.name)));
            }
        }
        Ok(opt)
    }
}

/// Linear warm-up over the first `ceil(warmup_frac·total)` steps, then cosine
/// decay to zero. `step` is 0-based.
pub fn learning_rate(step: usize, total: usize, base: f64, warmup_frac: f64) -> f64 {
    let warmup = ((warmup_frac * total as f64).ceil() as usize).min(total);
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}
