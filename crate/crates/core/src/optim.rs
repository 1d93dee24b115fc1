//! In-place first-order optimizers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Validation(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Optimizer hyperparameters plus the Adam moment buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

/// What a single update did.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    /// Largest per-coordinate `|Δw|` of the step.
    pub max_abs_update: f64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Validation(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, lr)
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Applies one update to the model using its current gradients.
    pub fn step(&mut self, model: &mut Model) -> Result<StepStats> {
        if !model.has_gradients() {
            return Err(Error::State("optimizer step without gradients; run backward first".into()));
        }
        self.step_tensors(model.params_and_grads_mut())
    }

    /// Applies one update to explicit `(parameter, gradient)` pairs. The
    /// sequence of shapes must stay the same across calls.
    pub fn step_tensors<'a, I>(&mut self, pairs: I) -> Result<StepStats>
    where
        I: IntoIterator<Item = (&'a mut Tensor, &'a Tensor)>,
    {
        match self.kind {
            OptimizerKind::Sgd => {
                self.t += 1;
                let mut stats = StepStats::default();
                for (p, g) in pairs {
                    check_congruent(p, g)?;
                    for (w, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                        let delta = self.lr * gi;
                        *w -= delta;
                        stats.max_abs_update = stats.max_abs_update.max(delta.abs());
                    }
                }
                Ok(stats)
            }
            OptimizerKind::Adam => self.adam_update(pairs),
        }
    }

    fn adam_update<'a, I>(&mut self, pairs: I) -> Result<StepStats>
    where
        I: IntoIterator<Item = (&'a mut Tensor, &'a Tensor)>,
    {
        let pairs: Vec<_> = pairs.into_iter().collect();
        for (p, g) in &pairs {
            check_congruent(p, g)?;
        }
        if self.m.is_empty() {
            self.m = pairs.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != pairs.len()
            || self.m.iter().zip(&pairs).any(|(m, (p, _))| m.len() != p.len())
        {
            return Err(Error::State("parameter layout changed under the optimizer".into()));
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let mut stats = StepStats::default();
        for ((p, g), (m, v)) in pairs.into_iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                let delta = lr * m_hat / (v_hat.sqrt() + eps);
                *w -= delta;
                stats.max_abs_update = stats.max_abs_update.max(delta.abs());
            }
        }
        Ok(stats)
    }
}

fn check_congruent(p: &Tensor, g: &Tensor) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::Shape(format!(
            "gradient {:?} does not match parameter {:?}",
            g.shape(),
            p.shape()
        )));
    }
    Ok(())
}

/// `w ← w − lr·g` for every parameter.
pub fn sgd_step(model: &mut Model, state: &mut OptimizerState) -> Result<StepStats> {
    if state.kind != OptimizerKind::Sgd {
        return Err(Error::State("sgd_step on a non-sgd optimizer state".into()));
    }
    state.step(model)
}

/// Bias-corrected Adam update with ε outside the square root.
pub fn adam_step(model: &mut Model, state: &mut OptimizerState) -> Result<StepStats> {
    if state.kind != OptimizerKind::Adam {
        return Err(Error::State("adam_step on a non-adam optimizer state".into()));
    }
    state.step(model)
}
