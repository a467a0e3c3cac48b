use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl From<&TrainConfig> for AdamW {
    fn from(c: &TrainConfig) -> Self {
        AdamW {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// One AdamW update of every parameter in `store`.
///
/// Decay `p ← p − lr·λ·p` comes first, then the bias-corrected Adam step.
/// Nothing is modified when a gradient is missing, misshapen or non-finite.
pub fn adamw_step(store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64, hp: &AdamW) -> Result<()> {
    for (name, p) in &store.params {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} at `{name}`[{i}] (step {}); update rejected",
                g.data()[i],
                store.step + 1
            )));
        }
    }
    store.step += 1;
    let t = store.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (name, p) in store.params.iter_mut() {
        let g = grads[name].data();
        let m = store.moments.get_mut(name).expect("moments exist for every parameter");
        let (pd, md, vd) = (p.data_mut(), m.m.data_mut(), m.v.data_mut());
        for i in 0..pd.len() {
            pd[i] -= lr * hp.weight_decay * pd[i];
            md[i] = hp.beta1 * md[i] + (1.0 - hp.beta1) * g[i];
            vd[i] = hp.beta2 * vd[i] + (1.0 - hp.beta2) * g[i] * g[i];
            let mhat = md[i] / c1;
            let vhat = vd[i] / c2;
            pd[i] -= lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// One-cycle schedule knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub warmup_frac: f64,
    pub start_div: f64,
    pub final_div: f64,
}

impl From<&TrainConfig> for OneCycle {
    fn from(c: &TrainConfig) -> Self {
        OneCycle {
            max_lr: c.max_lr,
            warmup_frac: c.warmup_frac,
            start_div: c.start_div,
            final_div: c.final_div,
        }
    }
}

fn cos_anneal(from: f64, to: f64, pct: f64) -> f64 {
    to + (from - to) / 2.0 * (1.0 + (PI * pct).cos())
}

/// Learning rate at `step` of `total_steps`.
///
/// Cosine ramp from `max_lr/start_div` at step 0 to `max_lr` at step
/// `warmup_frac·total − 1`, then cosine decay reaching `max_lr/final_div` at
/// the last step. With fewer steps than that the peak falls on step 0.
pub fn one_cycle_lr(step: u64, total_steps: u64, s: &OneCycle) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    let initial = s.max_lr / s.start_div;
    let last = (total_steps - 1) as f64;
    let peak = (s.warmup_frac * total_steps as f64 - 1.0).clamp(0.0, last);
    let x = step as f64;
    if x <= peak && peak > 0.0 {
        return Ok(cos_anneal(initial, s.max_lr, x / peak));
    }
    if last <= peak {
        return Ok(s.max_lr);
    }
    Ok(cos_anneal(s.max_lr, s.max_lr / s.final_div, (x - peak) / (last - peak)))
}
