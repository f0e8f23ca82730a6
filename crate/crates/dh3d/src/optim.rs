//! Adam optimizer over any [`ParamSet`] plus the two learning-rate
//! schedules used by the local and global training phases.

use crate::error::{Error, Result};
use crate::net::params::{collect, ParamSet};
use crate::scalar::Real;
use ndarray::ArrayD;
use std::collections::BTreeMap;

/// Adam with bias correction. Moments are keyed by parameter name so the
/// same state can drive any parameter subset.
#[derive(Debug, Clone)]
pub struct Adam<S: Real> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    step: u64,
    m: BTreeMap<String, ArrayD<S>>,
    v: BTreeMap<String, ArrayD<S>>,
}

impl<S: Real> Adam<S> {
    pub fn new(lr: S) -> Self {
        Self {
            lr,
            beta1: S::from_f64_lossy(0.9),
            beta2: S::from_f64_lossy(0.999),
            eps: S::from_f64_lossy(1e-8),
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter exposed by `params`, using gradients
    /// of the same shape from `grads`. `skip` filters parameters by name
    /// (frozen sub-trees return true).
    pub fn step_filtered<P: ParamSet<S>>(
        &mut self,
        params: &mut P,
        grads: &P,
        skip: &dyn Fn(&str) -> bool,
    ) -> Result<()> {
        let grad_map = collect(grads);
        // validate before mutating anything
        for (name, g) in &grad_map {
            if skip(name) {
                continue;
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric(name.clone(), "non-finite gradient"));
            }
        }
        self.step += 1;
        let t = self.step;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = S::one() - b1.powi(t as i32);
        let bc2 = S::one() - b2.powi(t as i32);
        let lr = self.lr;
        let eps = self.eps;
        let m = &mut self.m;
        let v = &mut self.v;
        let mut missing: Option<String> = None;
        params.visit_mut("", &mut |name, mut p| {
            if skip(name) {
                return;
            }
            let Some(g) = grad_map.get(name) else {
                missing.get_or_insert_with(|| name.to_string());
                return;
            };
            let mi = m
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let vi = v
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            for ((pv, gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(mi.iter_mut().zip(vi.iter_mut()))
            {
                *mv = b1 * *mv + (S::one() - b1) * *gv;
                *vv = b2 * *vv + (S::one() - b2) * *gv * *gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
        match missing {
            Some(name) => Err(Error::numeric(name, "gradient missing for parameter")),
            None => Ok(()),
        }
    }

    pub fn step<P: ParamSet<S>>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        self.step_filtered(params, grads, &|_| false)
    }
}

/// Phase-1 schedule: 1e-4 halved every 5 epochs.
pub fn lr_schedule_local(epoch: usize) -> f64 {
    1e-4 * 0.5f64.powi((epoch / 5) as i32)
}

/// Phase-2 schedule: 5e-4 decayed every 10 epochs, clamped at 1e-5.
pub fn lr_schedule_global(epoch: usize, decay: f64) -> f64 {
    (5e-4 * decay.powi((epoch / 10) as i32)).max(1e-5)
}
