//! Dynamic loss weighting for the three training tasks. Each task keeps a
//! short loss history; weights are a temperature softmax over descent
//! ratios, so a task whose loss has stalled gets pushed harder.

use std::collections::VecDeque;

use crate::tape::{Tape, Value};
use crate::tensor::TensorError;

pub const TASKS: usize = 3;
pub const TASK_NAMES: [&str; TASKS] = ["identity", "pair", "semantic"];

/// How the descent ratio of a task is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioMode {
    /// Mean of the newer half of the window over mean of the older half.
    /// Smooths out batch noise.
    WindowHalves,
    /// Latest loss over the one before it.
    OneStep,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DwaConfig {
    pub temperature: f64,
    pub window: usize,
    pub eps: f64,
    pub mode: RatioMode,
}

impl Default for DwaConfig {
    fn default() -> Self {
        DwaConfig {
            temperature: 2.0,
            window: 50,
            eps: 1e-8,
            mode: RatioMode::WindowHalves,
        }
    }
}

impl DwaConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.temperature <= 0.0 {
            return Err(TensorError::arg(
                "dwa config",
                format!("temperature must be positive, got {}", self.temperature),
            ));
        }
        if self.window < 2 {
            return Err(TensorError::arg(
                "dwa config",
                format!("window must hold at least 2 losses, got {}", self.window),
            ));
        }
        if self.eps <= 0.0 {
            return Err(TensorError::arg(
                "dwa config",
                format!("eps must be positive, got {}", self.eps),
            ));
        }
        Ok(())
    }
}

/// Numerically stable softmax of r/t; always sums to 1.
pub fn softmax3(r: [f64; TASKS], t: f64) -> [f64; TASKS] {
    let scaled = r.map(|v| v / t);
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = scaled.map(|v| (v - m).exp());
    let sum: f64 = exps.iter().sum();
    exps.map(|e| e / sum)
}

#[derive(Debug, Clone)]
pub struct DwaState {
    cfg: DwaConfig,
    history: [VecDeque<f64>; TASKS],
    weights: [f64; TASKS],
    poisoned: bool,
}

impl DwaState {
    pub fn new(cfg: DwaConfig) -> Result<Self, TensorError> {
        cfg.validate()?;
        Ok(DwaState {
            history: std::array::from_fn(|_| VecDeque::with_capacity(cfg.window)),
            cfg,
            weights: [1.0 / TASKS as f64; TASKS],
            poisoned: false,
        })
    }

    pub fn weights(&self) -> [f64; TASKS] {
        self.weights
    }

    /// Descent ratios behind the current weights, or None while warming up.
    pub fn ratios(&self) -> Option<[f64; TASKS]> {
        if self.history.iter().any(|h| h.len() < 2) {
            return None;
        }
        let mut r = [0.0; TASKS];
        for (task, h) in self.history.iter().enumerate() {
            r[task] = match self.cfg.mode {
                RatioMode::WindowHalves => {
                    let mid = h.len() / 2;
                    let older: f64 = h.iter().take(mid).sum::<f64>() / mid as f64;
                    let newer: f64 = h.iter().skip(mid).sum::<f64>() / (h.len() - mid) as f64;
                    newer / (older + self.cfg.eps)
                }
                RatioMode::OneStep => {
                    let last = h[h.len() - 1];
                    let prev = h[h.len() - 2];
                    last / (prev + self.cfg.eps)
                }
            };
        }
        Some(r)
    }

    /// Record one step's losses and return the refreshed weights.
    /// Weights stay uniform until every task has two recorded losses.
    /// A non-finite loss poisons the state permanently.
    pub fn update(&mut self, losses: [f64; TASKS]) -> Result<[f64; TASKS], TensorError> {
        if self.poisoned {
            return Err(TensorError::arg(
                "dwa update",
                "state poisoned by an earlier non-finite loss",
            ));
        }
        for (task, &l) in losses.iter().enumerate() {
            if !l.is_finite() {
                self.poisoned = true;
                return Err(TensorError::NonFiniteEvaluation {
                    param: format!("{} loss", TASK_NAMES[task]),
                    index: task,
                });
            }
        }
        for (h, &l) in self.history.iter_mut().zip(&losses) {
            if h.len() == self.cfg.window {
                h.pop_front();
            }
            h.push_back(l);
        }
        self.weights = match self.ratios() {
            Some(r) => softmax3(r, self.cfg.temperature),
            None => [1.0 / TASKS as f64; TASKS],
        };
        Ok(self.weights)
    }

    pub fn log_row(&self, step: usize, losses: [f64; TASKS]) -> String {
        let w = self.weights;
        let total: f64 = losses.iter().zip(&w).map(|(l, wi)| l * wi).sum();
        format!(
            "step {step:>5}  id {:.4}  pair {:.4}  sem {:.4}  | w {:.4} {:.4} {:.4}  | total {:.4}",
            losses[0], losses[1], losses[2], w[0], w[1], w[2], total
        )
    }
}

/// Weighted sum of the three scalar losses on the tape. The weights are
/// treated as constants of the step, so gradients scale but do not flow
/// through the weighting itself.
pub fn weighted_total(
    tape: &mut Tape,
    losses: [Value; TASKS],
    weights: [f64; TASKS],
) -> Result<Value, TensorError> {
    for (i, &l) in losses.iter().enumerate() {
        if !tape.shape(l).is_empty() && tape.tensor(l).numel() != 1 {
            return Err(TensorError::arg(
                "weighted_total",
                format!("{} loss is not a scalar", TASK_NAMES[i]),
            ));
        }
    }
    let a = tape.affine_scalar(losses[0], weights[0], 0.0);
    let b = tape.affine_scalar(losses[1], weights[1], 0.0);
    let c = tape.affine_scalar(losses[2], weights[2], 0.0);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}
