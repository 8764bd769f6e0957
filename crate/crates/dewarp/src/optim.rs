//! Adam updates and the one-cycle learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias correction. Moments are kept per parameter name and the
/// step counter is shared, so a parameter that sits out a step keeps its
/// moments untouched.
///
/// A non-finite gradient (or a non-finite updated value) refuses the whole
/// update and poisons the state; every later call fails until the optimizer
/// is rebuilt. Training must not limp onward on garbage.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    m: BTreeMap<String, Tensor<S>>,
    v: BTreeMap<String, Tensor<S>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    poisoned: bool,
}

impl<S: Scalar> Default for Adam<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Adam<S> {
    pub fn new() -> Self {
        Adam {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            poisoned: false,
        }
    }

    /// Steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    /// First and second moments, name-keyed (for serialization).
    pub fn moments(&self) -> (&BTreeMap<String, Tensor<S>>, &BTreeMap<String, Tensor<S>>) {
        (&self.m, &self.v)
    }

    /// Rebuilds optimizer state from serialized parts.
    pub fn restore(step: u64, m: BTreeMap<String, Tensor<S>>, v: BTreeMap<String, Tensor<S>>) -> Result<Self> {
        if m.len() != v.len() || !m.keys().eq(v.keys()) {
            return Err(Error::Checkpoint("optimizer moment maps disagree on parameter names".into()));
        }
        let mut out = Self::new();
        out.step = step;
        out.m = m;
        out.v = v;
        Ok(out)
    }

    /// Applies one update at rate `lr` to every parameter that has a
    /// gradient. Nothing is written unless every new value checks out
    /// finite, so a refused update leaves parameters and moments exactly
    /// as they were.
    pub fn step(
        &mut self,
        params: &mut ParamMap<S>,
        grads: &BTreeMap<String, Tensor<S>>,
        lr: f64,
    ) -> Result<()> {
        if self.poisoned {
            return Err(Error::Poisoned(
                "optimizer refused the update: poisoned by an earlier non-finite value".into(),
            ));
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Validation(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Dim(format!(
                    "gradient for {name:?} has shape {:?}, parameter is {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                self.poisoned = true;
                return Err(Error::Poisoned(format!(
                    "non-finite gradient for {name:?}; update refused"
                )));
            }
        }
        let t = self.step + 1;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one = S::one();
        let bc1 = S::from_f64(1.0 / (1.0 - self.beta1.powi(t as i32)));
        let bc2 = S::from_f64(1.0 / (1.0 - self.beta2.powi(t as i32)));
        let lr_s = S::from_f64(lr);
        let eps = S::from_f64(self.eps);

        let mut staged: Vec<(&String, Tensor<S>, Tensor<S>, Tensor<S>)> = Vec::with_capacity(grads.len());
        for (name, g) in grads {
            let p = params.get(name)?;
            let zeros = || Tensor::zeros(g.shape());
            let m_old = self.m.get(name).cloned().unwrap_or_else(zeros);
            let v_old = self.v.get(name).cloned().unwrap_or_else(zeros);
            let mut m_new = m_old;
            let mut v_new = v_old;
            let mut p_new = p.clone();
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let m = b1 * m_new.data()[i] + (one - b1) * gi;
                let v = b2 * v_new.data()[i] + (one - b2) * gi * gi;
                m_new.data_mut()[i] = m;
                v_new.data_mut()[i] = v;
                let m_hat = m * bc1;
                let v_hat = v * bc2;
                p_new.data_mut()[i] = p_new.data()[i] - lr_s * m_hat / (v_hat.sqrt() + eps);
            }
            if !p_new.all_finite() {
                self.poisoned = true;
                return Err(Error::Poisoned(format!(
                    "update for {name:?} produced a non-finite value; update refused"
                )));
            }
            staged.push((name, p_new, m_new, v_new));
        }
        for (name, p_new, m_new, v_new) in staged {
            params.set(name, p_new)?;
            self.m.insert(name.clone(), m_new);
            self.v.insert(name.clone(), v_new);
        }
        self.step = t;
        Ok(())
    }
}

/// One-cycle learning-rate policy: linear ramp from `max_lr/25` up to
/// `max_lr` over `warmup_fraction` of the run, then cosine anneal down to
/// `max_lr/1e4`. The peak is hit exactly at the end of warmup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    max_lr: f64,
    total_steps: usize,
    warmup_steps: usize,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize, warmup_fraction: f64) -> Result<Self> {
        if !(max_lr.is_finite() && max_lr > 0.0) {
            return Err(Error::Validation(format!("max_lr must be positive and finite, got {max_lr}")));
        }
        if total_steps < 2 {
            return Err(Error::Validation(format!(
                "one-cycle needs at least 2 steps to ramp and anneal, got {total_steps}"
            )));
        }
        if !(warmup_fraction > 0.0 && warmup_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "warmup_fraction must lie in (0,1), got {warmup_fraction}"
            )));
        }
        // peak lands on an actual step index, clamped so both phases exist
        let warmup_steps = ((warmup_fraction * total_steps as f64).round() as usize).clamp(1, total_steps - 1);
        Ok(OneCycle { max_lr, total_steps, warmup_steps })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// Learning rate for `step` in `[0, total_steps)`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::Contract(format!(
                "schedule step {step} out of range 0..{}",
                self.total_steps
            )));
        }
        let start = self.max_lr / 25.0;
        let end = self.max_lr / 1e4;
        if step <= self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            Ok(start + (self.max_lr - start) * frac)
        } else {
            let span = (self.total_steps - 1 - self.warmup_steps) as f64;
            let frac = (step - self.warmup_steps) as f64 / span;
            Ok(end + (self.max_lr - end) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
        }
    }
}
