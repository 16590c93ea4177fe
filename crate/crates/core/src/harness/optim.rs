//! AdamW with two parameter groups and a step learning-rate schedule.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::model::BACKBONE_PREFIX;
use crate::nn::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Multiplier applied to both base rates at `epoch`: `gamma^(epoch / step)`.
pub fn lr_factor(epoch: usize, sched_step: usize, gamma: f64) -> f64 {
    gamma.powi((epoch / sched_step.max(1)) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub backbone: f64,
    pub main: f64,
}

/// Rates for both groups at `epoch`.
pub fn lr_at(epoch: usize, base: GroupRates, sched_step: usize, gamma: f64) -> GroupRates {
    let f = lr_factor(epoch, sched_step, gamma);
    GroupRates {
        backbone: base.backbone * f,
        main: base.main * f,
    }
}

pub fn is_backbone_param(name: &str) -> bool {
    name == BACKBONE_PREFIX || name.starts_with(&format!("{BACKBONE_PREFIX}."))
}

pub struct AdamW {
    weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    /// Both groups must be non-empty.
    pub fn new(store: &ParamStore, weight_decay: f64) -> Result<Self> {
        let backbone = store.iter().filter(|(n, _)| is_backbone_param(n)).count();
        let rest = store.len() - backbone;
        if backbone == 0 || rest == 0 {
            return Err(Error::Config(format!(
                "optimizer needs two non-empty groups (backbone: {backbone}, other: {rest})"
            )));
        }
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in store.iter() {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
            v.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            weight_decay,
            step: 0,
            m,
            v,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient keep their value and moments.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, rates: GroupRates) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (name, var) in store.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients carry autograd history; keeping it in the moments
            // would chain every step's graph together.
            let g = &g.detach();
            let lr = if is_backbone_param(name) { rates.backbone } else { rates.main };
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            *m = ((&*m * BETA1)? + (g * (1.0 - BETA1))?)?;
            *v = ((&*v * BETA2)? + (g.sqr()? * (1.0 - BETA2))?)?;
            let update = ((&*m / bc1)? / ((&*v / bc2)?.sqrt()? + EPS)?)?;
            let p = var.as_tensor().detach();
            let next = ((&p * (1.0 - lr * self.weight_decay))? - (update * lr)?)?;
            var.set(&next)?;
        }
        Ok(())
    }

    /// Moments keyed by parameter name.
    pub fn state(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.m, &self.v)
    }

    pub fn restore(
        &mut self,
        step: u64,
        m: BTreeMap<String, Tensor>,
        v: BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (label, map, own) in [("first", &m, &self.m), ("second", &v, &self.v)] {
            if map.len() != own.len() || map.iter().any(|(k, t)| own.get(k).map(|o| o.dims()) != Some(t.dims())) {
                return Err(Error::Checkpoint(format!("{label} moments do not match the model parameters")));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
