//! AdamW with decoupled weight decay and the cosine schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::hal;
use crate::params::ParamStore;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
}

/// First and second moments per parameter plus the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// Decay applies to matrices only; biases, gains and scalars are exempt.
fn decays(shape: &[usize]) -> bool {
    shape.len() >= 2
}

/// One update over every parameter that has a gradient.
pub fn adamw_step(store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, state: &mut AdamState, h: &AdamHyper) -> Result<()> {
    for (name, g) in grads {
        let p = store.require(name)?;
        if p.len() != g.len() {
            return Err(Error::dim("adamw_step", format!("{name}: {} values vs {} grads", p.len(), g.len())));
        }
        if let Some(m) = state.m.get(name) {
            if m.len() != g.len() {
                return Err(Error::dim("adamw_step", format!("{name}: moment length {} vs {}", m.len(), g.len())));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for (name, g) in grads {
        let p = store.get_mut(name).expect("checked above");
        let decay = if decays(p.shape()) { 1.0 - h.lr * h.weight_decay } else { 1.0 };
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = h.beta1 * *mi + (1.0 - h.beta1) * gi;
            *vi = h.beta2 * *vi + (1.0 - h.beta2) * gi * gi;
            let step = (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            *x = *x * decay - h.lr * step;
        }
    }
    if let Some(lt) = store.get_mut(hal::LOG_TAU) {
        for x in lt.data_mut() {
            *x = hal::clamp_log_tau(*x);
        }
    }
    Ok(())
}

pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("cosine_lr: total_steps is 0"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!("cosine_lr: step {step} beyond total {total_steps}")));
    }
    Ok(base_lr * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}
