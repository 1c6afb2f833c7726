//! Layer building blocks that own their parameters as host tensors and
//! re-register them on a fresh tape every forward pass.
//!
//! Registration goes through a [`Binder`], which records a `(name, Value)`
//! pair per parameter. The names must line up with `HasParams::params_mut`
//! so the optimizer and the gradient checker can address parameters
//! uniformly.

use rand::Rng;

use crate::tape::{BnStats, Mode, Tape, Value};
use crate::tensor::{Tensor, TensorError};

/// Tape handle plus the named parameter bindings registered so far.
pub struct Binder<'t> {
    pub tape: &'t mut Tape,
    bindings: Vec<(String, Value)>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t mut Tape) -> Self {
        Binder {
            tape,
            bindings: Vec::new(),
        }
    }

    /// Register a trainable parameter under a stable name.
    pub fn param(&mut self, name: impl Into<String>, t: &Tensor) -> Value {
        let v = self.tape.param(t);
        self.bindings.push((name.into(), v));
        v
    }

    pub fn bindings(&self) -> &[(String, Value)] {
        &self.bindings
    }

    pub fn into_bindings(self) -> Vec<(String, Value)> {
        self.bindings
    }
}

/// Uniform init in ±1/sqrt(fan_in), the usual default for dense layers.
pub fn fan_in_uniform(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

#[derive(Debug, Clone)]
pub struct Conv1x1Layer {
    pub w: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv1x1Layer {
    pub fn new(rng: &mut impl Rng, c_in: usize, c_out: usize, bias: bool) -> Self {
        Conv1x1Layer {
            w: fan_in_uniform(rng, vec![c_out, c_in], c_in),
            bias: bias.then(|| fan_in_uniform(rng, vec![c_out], c_in)),
        }
    }

    pub fn forward(&self, b: &mut Binder, prefix: &str, x: Value) -> Result<Value, TensorError> {
        let w = b.param(format!("{prefix}.w"), &self.w);
        let bias = self
            .bias
            .as_ref()
            .map(|t| b.param(format!("{prefix}.b"), t));
        b.tape.conv1x1(x, w, bias)
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![(format!("{prefix}.w"), &mut self.w)];
        if let Some(bias) = &mut self.bias {
            out.push((format!("{prefix}.b"), bias));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.w.numel() + self.bias.as_ref().map(|b| b.numel()).unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct AffineLayer {
    pub w: Tensor,
    pub bias: Option<Tensor>,
}

impl AffineLayer {
    pub fn new(rng: &mut impl Rng, d_in: usize, d_out: usize, bias: bool) -> Self {
        AffineLayer {
            w: fan_in_uniform(rng, vec![d_out, d_in], d_in),
            bias: bias.then(|| fan_in_uniform(rng, vec![d_out], d_in)),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn forward(&self, b: &mut Binder, prefix: &str, x: Value) -> Result<Value, TensorError> {
        let w = b.param(format!("{prefix}.w"), &self.w);
        let bias = self
            .bias
            .as_ref()
            .map(|t| b.param(format!("{prefix}.b"), t));
        b.tape.affine(x, w, bias)
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![(format!("{prefix}.w"), &mut self.w)];
        if let Some(bias) = &mut self.bias {
            out.push((format!("{prefix}.b"), bias));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.w.numel() + self.bias.as_ref().map(|b| b.numel()).unwrap_or(0)
    }
}

/// Batch normalization with learnable affine and running statistics.
///
/// `forward` leaves the layer untouched and returns the advanced statistics
/// so the caller decides whether the step commits (training) or is discarded
/// (gradient probes, eval).
#[derive(Debug, Clone)]
pub struct BnLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: BnStats,
}

impl BnLayer {
    pub fn new(channels: usize) -> Self {
        BnLayer {
            gamma: Tensor::ones(vec![channels]),
            beta: Tensor::zeros(vec![channels]),
            stats: BnStats::new(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward(
        &self,
        b: &mut Binder,
        prefix: &str,
        x: Value,
        mode: Mode,
    ) -> Result<(Value, BnStats), TensorError> {
        let gamma = b.param(format!("{prefix}.gamma"), &self.gamma);
        let beta = b.param(format!("{prefix}.beta"), &self.beta);
        let mut stats = self.stats.clone();
        let y = b.tape.batchnorm(x, gamma, beta, &mut stats, mode)?;
        Ok((y, stats))
    }

    pub fn commit(&mut self, stats: BnStats) {
        self.stats = stats;
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{prefix}.gamma"), &mut self.gamma),
            (format!("{prefix}.beta"), &mut self.beta),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.gamma.numel() + self.beta.numel()
    }
}

/// Inverted-dropout multiplier vector, or `None` when dropout is inactive
/// (eval mode or zero rate) and the op should be skipped entirely.
pub fn dropout_mask(rng: &mut impl Rng, numel: usize, rate: f64, mode: Mode) -> Option<Vec<f64>> {
    if mode == Mode::Eval || rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some(
        (0..numel)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect(),
    )
}

/// Read the gradient of every binding off a swept tape; parameters the root
/// never touched get zero gradients.
pub fn collect_grads(tape: &Tape, bindings: &[(String, Value)]) -> Vec<(String, Vec<f64>)> {
    bindings
        .iter()
        .map(|(name, v)| {
            let g = tape
                .grad(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.tensor(*v).numel()]);
            (name.clone(), g)
        })
        .collect()
}

/// Plain gradient-descent step. Parameters and gradients must arrive in the
/// same named order; a mismatch means the model's registration and
/// enumeration orders have drifted apart, which would silently corrupt
/// training, so it is an error.
pub fn sgd_step(
    params: Vec<(String, &mut Tensor)>,
    grads: &[(String, Vec<f64>)],
    lr: f64,
) -> Result<(), TensorError> {
    if params.len() != grads.len() {
        return Err(TensorError::arg(
            "sgd_step",
            format!("{} parameters vs {} gradients", params.len(), grads.len()),
        ));
    }
    for ((pname, t), (gname, g)) in params.into_iter().zip(grads) {
        if &pname != gname {
            return Err(TensorError::arg(
                "sgd_step",
                format!("parameter order mismatch: {pname} vs {gname}"),
            ));
        }
        if t.numel() != g.len() {
            return Err(TensorError::dim(
                "sgd_step",
                format!("{} elements for {pname}", t.numel()),
                format!("{}", g.len()),
            ));
        }
        for (w, gv) in t.data_mut().iter_mut().zip(g) {
            *w -= lr * gv;
        }
    }
    Ok(())
}
