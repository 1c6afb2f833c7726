//! Central-difference verification of tape gradients.
//!
//! A model is anything that can enumerate its parameters by name and rebuild
//! its forward pass on a fresh tape. The checker perturbs one coordinate at a
//! time on a cloned model, so the caller's state is never touched.

use crate::tape::{Tape, Value};
use crate::tensor::TensorError;
use crate::Tensor;

/// Mutable, named access to every trainable tensor of a model.
///
/// Names must be stable across calls and must match the binding names the
/// model registers on the tape during its forward pass.
pub trait HasParams {
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;
}

/// Deliberate corruption of one analytic gradient, used as a negative
/// control: a checker that cannot catch this offset proves nothing.
#[derive(Debug, Clone)]
pub struct Sabotage {
    pub param: String,
    pub offset: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Half-width of the central difference.
    pub step: f64,
    /// Maximum accepted relative error per coordinate.
    pub tolerance: f64,
    /// Probe at most this many evenly spaced coordinates per parameter.
    pub probe_limit: Option<usize>,
    pub sabotage: Option<Sabotage>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-6,
            probe_limit: None,
            sabotage: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Fixed-width table, one row per parameter, suitable for terminal output.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<28} {:>7} {:>13} {:>14} {:>14}  status\n",
            "param", "coords", "max rel err", "analytic", "numeric"
        ));
        for p in &self.params {
            let ok = p.max_rel_err <= self.tolerance;
            out.push_str(&format!(
                "{:<28} {:>7} {:>13.3e} {:>14.6e} {:>14.6e}  {}\n",
                p.name,
                p.coords_checked,
                p.max_rel_err,
                p.worst_analytic,
                p.worst_numeric,
                if ok { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "overall max rel err {:.3e} (tolerance {:.1e}): {}\n",
            self.max_rel_err,
            self.tolerance,
            if self.passed { "pass" } else { "FAIL" }
        ));
        out
    }
}

fn probe_indices(numel: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(m) if m > 0 && numel > m => {
            let step = numel as f64 / m as f64;
            (0..m).map(|k| (k as f64 * step) as usize).collect()
        }
        _ => (0..numel).collect(),
    }
}

/// Compare tape gradients against central differences of the scalar the
/// forward pass produces.
///
/// `forward` must rebuild the model's computation on the given tape and
/// return the scalar root plus the tape binding of every parameter, using
/// the same names as [`HasParams::params_mut`]. Randomness inside the
/// forward pass must be frozen (same batch, same masks) or the comparison
/// is meaningless.
pub fn grad_check<S, F>(
    state: &S,
    forward: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, TensorError>
where
    S: Clone + HasParams,
    F: Fn(&S, &mut Tape) -> Result<(Value, Vec<(String, Value)>), TensorError>,
{
    let loss_of = |s: &S| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let (root, _) = forward(s, &mut tape)?;
        Ok(tape.tensor(root).item())
    };

    // Analytic gradients at the base point.
    let base = state.clone();
    let mut tape = Tape::new();
    let (root, bindings) = forward(&base, &mut tape)?;
    if tape.tensor(root).numel() != 1 {
        return Err(TensorError::NonScalarRoot {
            shape: tape.shape(root).to_vec(),
        });
    }
    tape.backward(root)?;
    let mut analytic: Vec<(String, Vec<f64>)> = bindings
        .iter()
        .map(|(name, v)| {
            let g = tape
                .grad(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.tensor(*v).numel()]);
            (name.clone(), g)
        })
        .collect();

    if let Some(s) = &cfg.sabotage {
        let slot = analytic
            .iter_mut()
            .find(|(n, _)| n == &s.param)
            .ok_or_else(|| {
                TensorError::arg("sabotage", format!("no parameter named {}", s.param))
            })?;
        slot.1[0] += s.offset;
    }

    let h = cfg.step;
    let mut params = Vec::with_capacity(analytic.len());
    let mut overall = 0.0f64;
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let mut worst = ParamCheck {
            name: name.clone(),
            coords_checked: 0,
            max_rel_err: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for idx in probe_indices(grad.len(), cfg.probe_limit) {
            let nudge = |delta: f64| -> Result<f64, TensorError> {
                let mut probe = state.clone();
                {
                    let mut ps = probe.params_mut();
                    let (pname, t) = &mut ps[pi];
                    debug_assert_eq!(pname, name, "parameter order must be stable");
                    t.data_mut()[idx] += delta;
                }
                loss_of(&probe)
            };
            let numeric = (nudge(h)? - nudge(-h)?) / (2.0 * h);
            let a = grad[idx];
            if !numeric.is_finite() {
                return Err(TensorError::NonFiniteEvaluation {
                    param: name.clone(),
                    index: idx,
                });
            }
            // The floor absorbs central-difference roundoff (~|f|*eps/step,
            // about 1e-10 here) on coordinates whose true gradient is zero,
            // e.g. a conv bias that batch norm's mean subtraction cancels.
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            worst.coords_checked += 1;
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.worst_index = idx;
                worst.worst_analytic = a;
                worst.worst_numeric = numeric;
            }
        }
        overall = overall.max(worst.max_rel_err);
        params.push(worst);
    }

    Ok(GradCheckReport {
        params,
        max_rel_err: overall,
        tolerance: cfg.tolerance,
        passed: overall <= cfg.tolerance,
    })
}
