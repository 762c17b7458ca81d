//! Outer-loop optimizers over a [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("outer lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.kind == OptimizerKind::Adam {
            for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
                if !(0.0..1.0).contains(&b) {
                    return Err(Error::Config(format!("{n} must be in [0, 1), got {b}")));
                }
            }
            if !(self.eps > 0.0) {
                return Err(Error::Config("eps must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Optimizer with its running state. Adam moments are created lazily on
/// the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<F> {
    pub config: OptimizerConfig,
    pub steps: u64,
    pub first_moment: Option<ParamSet<F>>,
    pub second_moment: Option<ParamSet<F>>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            steps: 0,
            first_moment: None,
            second_moment: None,
        }
    }

    /// Applies one update to the trainable entries of `params`.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &ParamSet<F>) -> Result<()> {
        params.check_congruent(grads)?;
        self.steps += 1;
        let lr = F::of(self.config.lr);
        match self.config.kind {
            OptimizerKind::Sgd => {
                for i in 0..params.len() {
                    if !params.entry(i).trainable {
                        continue;
                    }
                    let g = grads.entry(i).value.data().to_vec();
                    for (p, gv) in params.entry_mut(i).value.data_mut().iter_mut().zip(g) {
                        *p = *p - lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (
                    F::of(self.config.beta1),
                    F::of(self.config.beta2),
                    F::of(self.config.eps),
                );
                let m = self.first_moment.get_or_insert_with(|| params.zeros_like());
                let v = self.second_moment.get_or_insert_with(|| params.zeros_like());
                m.check_congruent(params)?;
                let t = i32::try_from(self.steps).unwrap_or(i32::MAX);
                let c1 = F::one() - b1.powi(t);
                let c2 = F::one() - b2.powi(t);
                for i in 0..params.len() {
                    if !params.entry(i).trainable {
                        continue;
                    }
                    let g = grads.entry(i).value.data();
                    let md = m.entry_mut(i).value.data_mut();
                    let vd = v.entry_mut(i).value.data_mut();
                    let pd = params.entry_mut(i).value.data_mut();
                    for k in 0..g.len() {
                        md[k] = b1 * md[k] + (F::one() - b1) * g[k];
                        vd[k] = b2 * vd[k] + (F::one() - b2) * g[k] * g[k];
                        let mhat = md[k] / c1;
                        let vhat = vd[k] / c2;
                        pd[k] = pd[k] - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
