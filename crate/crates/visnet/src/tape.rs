//! Reverse-mode differentiation tape over [`Tensor`] values.
//!
//! Operations are recorded on a linear tape during the forward pass and
//! replayed in reverse to accumulate gradients. The op set is closed under
//! composition: every network and loss in this crate is expressed through
//! these primitives, so `backward` never needs a fallback path.
//!
//! A tape is confined to one thread from first record to backward; exactly
//! one backward pass is allowed per recording.

use crate::tensor::{Tensor, TensorError};

/// Forward-pass behaviour switch for batch normalization and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Value(pub(crate) usize);

/// Running statistics for a batch-normalization layer.
///
/// Normalization in train mode uses population batch statistics; the running
/// variance is updated with the unbiased estimate, matching the usual
/// convention so eval mode behaves like mainstream frameworks.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

enum Op {
    Leaf,
    Add(Value, Value),
    Mul(Value, Value),
    /// a*x + b elementwise; only the multiplier matters for the backward pass.
    AffineScalar(Value, f64),
    Relu(Value),
    Sigmoid(Value),
    Log(Value),
    Sqrt(Value),
    Recip(Value),
    Clamp(Value, f64, f64),
    Conv1x1 {
        x: Value,
        w: Value,
        bias: Option<Value>,
    },
    BatchNorm {
        x: Value,
        gamma: Value,
        beta: Value,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Resize {
        x: Value,
        taps_y: Vec<(usize, usize, f64)>,
        taps_x: Vec<(usize, usize, f64)>,
        identity: bool,
    },
    AvgPool {
        x: Value,
        k: usize,
    },
    Gap(Value),
    Affine {
        x: Value,
        w: Value,
        bias: Option<Value>,
    },
    LogSoftmax(Value),
    SumLast(Value),
    SumAll(Value),
    MeanAll(Value),
    RowScale {
        x: Value,
        s: Value,
    },
    PairwiseDist {
        x: Value,
        pairs: Vec<(usize, usize)>,
    },
    Fuse4 {
        maps: [Value; 4],
        w: Value,
    },
    Dropout {
        x: Value,
        mask: Vec<f64>,
    },
    FlattenLocations(Value),
}

struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Linear record of forward operations; replayed in reverse by [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn acc_slot(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

/// Interpolation taps for one output axis under the half-pixel-center
/// convention: source coordinate (dst + 0.5) * src/dst - 0.5, clamped.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let coord = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = coord.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, coord - i0 as f64)
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> Value {
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        Value(self.nodes.len() - 1)
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf; gradient participation follows `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Value {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    /// Record a trainable parameter leaf (clones the tensor data).
    pub fn param(&mut self, tensor: &Tensor) -> Value {
        let mut t = tensor.clone();
        t.requires_grad = true;
        t.grad = None;
        self.push(t, Op::Leaf, true)
    }

    /// Record a non-differentiable constant.
    pub fn constant(&mut self, mut tensor: Tensor) -> Value {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.push(tensor, Op::Leaf, false)
    }

    pub fn tensor(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn data(&self, v: Value) -> &[f64] {
        self.nodes[v.0].tensor.data()
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    /// Gradient of the backward root with respect to `v`, if one was computed.
    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    // ── Elementwise ───────────────────────────────────────────────────

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::dim(
                "add",
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::dim(
                "mul",
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    /// Elementwise `scale * x + offset`.
    pub fn affine_scalar(&mut self, x: Value, scale: f64, offset: f64) -> Value {
        let data: Vec<f64> = self.data(x).iter().map(|v| scale * v + offset).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::AffineScalar(x, scale), needs)
    }

    pub fn relu(&mut self, x: Value) -> Value {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Value) -> Value {
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Sigmoid(x), needs)
    }

    pub fn log(&mut self, x: Value) -> Value {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.ln()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Log(x), needs)
    }

    pub fn sqrt(&mut self, x: Value) -> Value {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.sqrt()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Sqrt(x), needs)
    }

    pub fn recip(&mut self, x: Value) -> Value {
        let data: Vec<f64> = self.data(x).iter().map(|v| 1.0 / v).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Recip(x), needs)
    }

    /// Clamp to `[lo, hi]`; gradient passes through where the input is inside
    /// the interval (inclusive) and is zero where it was clipped.
    pub fn clamp(&mut self, x: Value, lo: f64, hi: f64) -> Result<Value, TensorError> {
        if !(lo < hi) {
            return Err(TensorError::arg(
                "clamp",
                format!("lo {lo} must be < hi {hi}"),
            ));
        }
        let data: Vec<f64> = self.data(x).iter().map(|v| v.clamp(lo, hi)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Clamp(x, lo, hi), needs))
    }

    // ── Structured ops ────────────────────────────────────────────────

    /// Pointwise convolution: `out[b,o,h,w] = sum_c w[o,c] * x[b,c,h,w] (+ bias[o])`.
    pub fn conv1x1(
        &mut self,
        x: Value,
        w: Value,
        bias: Option<Value>,
    ) -> Result<Value, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::RankMismatch {
                context: "conv1x1 input".into(),
                expected: 4,
                got: xs,
            });
        }
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(TensorError::RankMismatch {
                context: "conv1x1 weight".into(),
                expected: 2,
                got: ws,
            });
        }
        let (b, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, wc) = (ws[0], ws[1]);
        if wc != c_in {
            return Err(TensorError::dim(
                "conv1x1 channels",
                format!("weight inner extent {c_in}"),
                format!("{wc}"),
            ));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [c_out] {
                return Err(TensorError::dim(
                    "conv1x1 bias",
                    format!("[{c_out}]"),
                    format!("{:?}", self.shape(bv)),
                ));
            }
        }
        let hw = h * wd;
        let mut out = vec![0.0; b * c_out * hw];
        {
            let xd = self.data(x);
            let wdat = self.data(w);
            let bd = bias.map(|bv| self.data(bv));
            for bi in 0..b {
                for o in 0..c_out {
                    let dst = &mut out[(bi * c_out + o) * hw..(bi * c_out + o + 1) * hw];
                    if let Some(bd) = bd {
                        dst.fill(bd[o]);
                    }
                    for ci in 0..c_in {
                        let wv = wdat[o * c_in + ci];
                        let src = &xd[(bi * c_in + ci) * hw..(bi * c_in + ci + 1) * hw];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, c_out, h, wd], out)?;
        let needs =
            self.needs(x) || self.needs(w) || bias.map(|bv| self.needs(bv)).unwrap_or(false);
        Ok(self.push(t, Op::Conv1x1 { x, w, bias }, needs))
    }

    /// Batch normalization over the channel axis.
    ///
    /// Accepts `[N, C]` (per-feature over N) or `[B, C, H, W]` (per-channel
    /// over B*H*W). Train mode normalizes by batch statistics and advances
    /// `stats`; eval mode normalizes by the running statistics.
    pub fn batchnorm(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
        stats: &mut BnStats,
        mode: Mode,
    ) -> Result<Value, TensorError> {
        let xs = self.shape(x).to_vec();
        let channels = match xs.len() {
            2 => xs[1],
            4 => xs[1],
            _ => {
                return Err(TensorError::RankMismatch {
                    context: "batchnorm input".into(),
                    expected: 2,
                    got: xs,
                })
            }
        };
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [channels] {
                return Err(TensorError::dim(
                    &format!("batchnorm {name}"),
                    format!("[{channels}]"),
                    format!("{:?}", self.shape(v)),
                ));
            }
        }
        if stats.channels() != channels {
            return Err(TensorError::dim(
                "batchnorm running stats",
                format!("{channels} channels"),
                format!("{}", stats.channels()),
            ));
        }
        let numel = self.tensor(x).numel();
        let per_channel = numel / channels;
        let train = mode == Mode::Train;
        if train && per_channel < 2 {
            return Err(TensorError::DegenerateBatch { count: per_channel });
        }

        let (mean, var): (Vec<f64>, Vec<f64>) = if train {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            self.for_each_channel(x, |c, v| mean[c] += v);
            for m in &mut mean {
                *m /= per_channel as f64;
            }
            self.for_each_channel(x, |c, v| {
                let d = v - mean[c];
                var[c] += d * d;
            });
            for v in &mut var {
                *v /= per_channel as f64;
            }
            (mean, var)
        } else {
            (stats.running_mean.clone(), stats.running_var.clone())
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();

        let mut xhat = vec![0.0; numel];
        let mut out = vec![0.0; numel];
        {
            let gd = self.data(gamma);
            let bd = self.data(beta);
            let xd = self.data(x);
            for (i, c) in ChannelIndices::new(&xs) {
                let h = (xd[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                out[i] = gd[c] * h + bd[c];
            }
        }

        if train {
            let m = stats.momentum;
            let bessel = per_channel as f64 / (per_channel as f64 - 1.0);
            for c in 0..channels {
                stats.running_mean[c] = (1.0 - m) * stats.running_mean[c] + m * mean[c];
                stats.running_var[c] = (1.0 - m) * stats.running_var[c] + m * var[c] * bessel;
            }
        }

        let t = Tensor::new(xs, out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            needs,
        ))
    }

    fn for_each_channel(&self, x: Value, mut f: impl FnMut(usize, f64)) {
        let xd = self.data(x);
        for (i, c) in ChannelIndices::new(self.shape(x)) {
            f(c, xd[i]);
        }
    }

    /// Bilinear resampling of a `[B, C, h, w]` map to `(H, W)` with
    /// half-pixel centers; handles both enlarging and shrinking.
    pub fn bilinear_resize(
        &mut self,
        x: Value,
        target: (usize, usize),
    ) -> Result<Value, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::RankMismatch {
                context: "bilinear_resize input".into(),
                expected: 4,
                got: xs,
            });
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (th, tw) = target;
        if th == 0 || tw == 0 {
            return Err(TensorError::arg("bilinear_resize", "target extent is zero"));
        }
        let identity = (th, tw) == (h, w);
        let needs = self.needs(x);
        if identity {
            let t = self.tensor(x).clone();
            let t = Tensor::new(vec![b, c, th, tw], t.data().to_vec())?;
            return Ok(self.push(
                t,
                Op::Resize {
                    x,
                    taps_y: Vec::new(),
                    taps_x: Vec::new(),
                    identity: true,
                },
                needs,
            ));
        }
        let taps_y = bilinear_taps(h, th);
        let taps_x = bilinear_taps(w, tw);
        let mut out = vec![0.0; b * c * th * tw];
        {
            let xd = self.data(x);
            for bi in 0..b {
                for ci in 0..c {
                    let plane = &xd[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    let dst = &mut out[(bi * c + ci) * th * tw..(bi * c + ci + 1) * th * tw];
                    for (oy, &(y0, y1, ty)) in taps_y.iter().enumerate() {
                        for (ox, &(x0, x1, tx)) in taps_x.iter().enumerate() {
                            let top = (1.0 - tx) * plane[y0 * w + x0] + tx * plane[y0 * w + x1];
                            let bot = (1.0 - tx) * plane[y1 * w + x0] + tx * plane[y1 * w + x1];
                            dst[oy * tw + ox] = (1.0 - ty) * top + ty * bot;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, c, th, tw], out)?;
        Ok(self.push(
            t,
            Op::Resize {
                x,
                taps_y,
                taps_x,
                identity: false,
            },
            needs,
        ))
    }

    /// Bilinear upsampling; refuses targets smaller than the source.
    pub fn bilinear_upsample(
        &mut self,
        x: Value,
        target: (usize, usize),
    ) -> Result<Value, TensorError> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(TensorError::RankMismatch {
                context: "bilinear_upsample input".into(),
                expected: 4,
                got: xs.to_vec(),
            });
        }
        let (h, w) = (xs[2], xs[3]);
        if target.0 < h || target.1 < w {
            return Err(TensorError::UnsupportedDownsample {
                from: (h, w),
                to: target,
            });
        }
        self.bilinear_resize(x, target)
    }

    /// Non-overlapping k*k average pooling.
    pub fn avg_pool(&mut self, x: Value, k: usize) -> Result<Value, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::RankMismatch {
                context: "avg_pool input".into(),
                expected: 4,
                got: xs,
            });
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(TensorError::arg(
                "avg_pool",
                format!("window {k} must divide spatial extents {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; b * c * oh * ow];
        {
            let xd = self.data(x);
            for bc in 0..b * c {
                let plane = &xd[bc * h * w..(bc + 1) * h * w];
                let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                s += plane[(oy * k + dy) * w + ox * k + dx];
                            }
                        }
                        dst[oy * ow + ox] = s * inv;
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, c, oh, ow], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::AvgPool { x, k }, needs))
    }

    /// Global average pooling: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Value) -> Result<Value, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::RankMismatch {
                context: "global_avg_pool input".into(),
                expected: 4,
                got: xs,
            });
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let inv = 1.0 / (h * w) as f64;
        let xd = self.data(x);
        let mut out = vec![0.0; b * c];
        for bc in 0..b * c {
            out[bc] = xd[bc * h * w..(bc + 1) * h * w].iter().sum::<f64>() * inv;
        }
        let t = Tensor::new(vec![b, c], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Gap(x), needs))
    }

    /// Dense affine map: `out[n,o] = sum_i x[n,i] * w[o,i] (+ bias[o])`.
    pub fn affine(
        &mut self,
        x: Value,
        w: Value,
        bias: Option<Value>,
    ) -> Result<Value, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(TensorError::RankMismatch {
                context: "affine".into(),
                expected: 2,
                got: if xs.len() != 2 { xs } else { ws },
            });
        }
        let (n, inp) = (xs[0], xs[1]);
        let (out_dim, w_in) = (ws[0], ws[1]);
        if w_in != inp {
            return Err(TensorError::dim(
                "affine input extent",
                format!("{inp}"),
                format!("{w_in}"),
            ));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [out_dim] {
                return Err(TensorError::dim(
                    "affine bias",
                    format!("[{out_dim}]"),
                    format!("{:?}", self.shape(bv)),
                ));
            }
        }
        let mut out = vec![0.0; n * out_dim];
        {
            let xd = self.data(x);
            let wd = self.data(w);
            let bd = bias.map(|bv| self.data(bv));
            for ni in 0..n {
                let row = &xd[ni * inp..(ni + 1) * inp];
                for o in 0..out_dim {
                    let wrow = &wd[o * inp..(o + 1) * inp];
                    let mut s = bd.map(|bd| bd[o]).unwrap_or(0.0);
                    for (xv, wv) in row.iter().zip(wrow) {
                        s += xv * wv;
                    }
                    out[ni * out_dim + o] = s;
                }
            }
        }
        let t = Tensor::new(vec![n, out_dim], out)?;
        let needs =
            self.needs(x) || self.needs(w) || bias.map(|bv| self.needs(bv)).unwrap_or(false);
        Ok(self.push(t, Op::Affine { x, w, bias }, needs))
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Value) -> Result<Value, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(TensorError::RankMismatch {
                context: "log_softmax input".into(),
                expected: 2,
                got: xs,
            });
        }
        let cols = *xs.last().unwrap();
        let rows = self.tensor(x).numel() / cols;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let t = Tensor::new(xs, out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::LogSoftmax(x), needs))
    }

    /// Sum over the last axis of a rank>=2 tensor.
    pub fn sum_last(&mut self, x: Value) -> Result<Value, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(TensorError::RankMismatch {
                context: "sum_last input".into(),
                expected: 2,
                got: xs,
            });
        }
        let cols = *xs.last().unwrap();
        let rows = self.tensor(x).numel() / cols;
        let xd = self.data(x);
        let out: Vec<f64> = (0..rows)
            .map(|r| xd[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let t = Tensor::new(xs[..xs.len() - 1].to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::SumLast(x), needs))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum_all(&mut self, x: Value) -> Value {
        let s: f64 = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs)
    }

    /// Arithmetic mean of all elements, as a one-element tensor.
    pub fn mean_all(&mut self, x: Value) -> Value {
        let n = self.tensor(x).numel() as f64;
        let s: f64 = self.data(x).iter().sum::<f64>() / n;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), needs)
    }

    /// Scale each row of `x[R, C]` by `s[R]`.
    pub fn row_scale(&mut self, x: Value, s: Value) -> Result<Value, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(TensorError::RankMismatch {
                context: "row_scale input".into(),
                expected: 2,
                got: xs,
            });
        }
        if self.shape(s) != [xs[0]] {
            return Err(TensorError::dim(
                "row_scale scales",
                format!("[{}]", xs[0]),
                format!("{:?}", self.shape(s)),
            ));
        }
        let (rows, cols) = (xs[0], xs[1]);
        let xd = self.data(x);
        let sd = self.data(s);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = xd[r * cols + c] * sd[r];
            }
        }
        let t = Tensor::new(xs, out)?;
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(t, Op::RowScale { x, s }, needs))
    }

    /// Euclidean distance for each row pair of `x[B, D]`.
    ///
    /// The gradient at an exactly-zero distance is defined as zero.
    pub fn pairwise_dist(
        &mut self,
        x: Value,
        pairs: &[(usize, usize)],
    ) -> Result<Value, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(TensorError::RankMismatch {
                context: "pairwise_dist input".into(),
                expected: 2,
                got: xs,
            });
        }
        let (b, d) = (xs[0], xs[1]);
        for &(i, j) in pairs {
            if i >= b || j >= b {
                return Err(TensorError::arg(
                    "pairwise_dist",
                    format!("pair ({i},{j}) out of range for batch {b}"),
                ));
            }
        }
        let xd = self.data(x);
        let out: Vec<f64> = pairs
            .iter()
            .map(|&(i, j)| {
                let mut s = 0.0;
                for k in 0..d {
                    let diff = xd[i * d + k] - xd[j * d + k];
                    s += diff * diff;
                }
                s.sqrt()
            })
            .collect();
        let t = Tensor::new(vec![pairs.len()], out)?;
        let needs = self.needs(x);
        Ok(self.push(
            t,
            Op::PairwiseDist {
                x,
                pairs: pairs.to_vec(),
            },
            needs,
        ))
    }

    /// Attention-weighted sum of four equally shaped maps:
    /// `out[b] = sum_i w[b,i] * maps[i][b]` with `w` of shape `[B, 4]`.
    pub fn fuse4(&mut self, maps: [Value; 4], w: Value) -> Result<Value, TensorError> {
        let s0 = self.shape(maps[0]).to_vec();
        if s0.len() != 4 {
            return Err(TensorError::RankMismatch {
                context: "fuse4 maps".into(),
                expected: 4,
                got: s0,
            });
        }
        for m in &maps[1..] {
            if self.shape(*m) != s0 {
                return Err(TensorError::dim(
                    "fuse4 map shapes",
                    format!("{s0:?}"),
                    format!("{:?}", self.shape(*m)),
                ));
            }
        }
        let b = s0[0];
        if self.shape(w) != [b, 4] {
            return Err(TensorError::dim(
                "fuse4 weights",
                format!("[{b}, 4]"),
                format!("{:?}", self.shape(w)),
            ));
        }
        let per = s0[1] * s0[2] * s0[3];
        let wd = self.data(w);
        let mut out = vec![0.0; b * per];
        for (mi, m) in maps.iter().enumerate() {
            let md = self.data(*m);
            for bi in 0..b {
                let wv = wd[bi * 4 + mi];
                let dst = &mut out[bi * per..(bi + 1) * per];
                let src = &md[bi * per..(bi + 1) * per];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += wv * s;
                }
            }
        }
        let t = Tensor::new(s0, out)?;
        let needs = maps.iter().any(|m| self.needs(*m)) || self.needs(w);
        Ok(self.push(t, Op::Fuse4 { maps, w }, needs))
    }

    /// Elementwise multiply by a fixed mask (inverted-dropout scaling is the
    /// caller's responsibility when building the mask).
    pub fn dropout_mask(&mut self, x: Value, mask: Vec<f64>) -> Result<Value, TensorError> {
        if mask.len() != self.tensor(x).numel() {
            return Err(TensorError::dim(
                "dropout mask",
                format!("{} elements", self.tensor(x).numel()),
                format!("{}", mask.len()),
            ));
        }
        let data: Vec<f64> = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Dropout { x, mask }, needs))
    }

    /// Reshape `[B, C, H, W]` into `[B*H*W, C]`, one row per spatial location.
    pub fn flatten_locations(&mut self, x: Value) -> Result<Value, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::RankMismatch {
                context: "flatten_locations input".into(),
                expected: 4,
                got: xs,
            });
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xd = self.data(x);
        let mut out = vec![0.0; b * c * h * w];
        for bi in 0..b {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        let row = (bi * h + hi) * w + wi;
                        out[row * c + ci] = xd[((bi * c + ci) * h + hi) * w + wi];
                    }
                }
            }
        }
        let t = Tensor::new(vec![b * h * w, c], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::FlattenLocations(x), needs))
    }

    // ── Backward ──────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root; fills `grad` on every
    /// gradient-bearing node reachable from the root. A tape may be swept
    /// exactly once.
    pub fn backward(&mut self, root: Value) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::TapeReused);
        }
        if self.nodes[root.0].tensor.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: self.nodes[root.0].tensor.shape().to_vec(),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            {
                let nodes = &self.nodes;
                let node = &nodes[i];
                let add_to =
                    |grads: &mut Vec<Option<Vec<f64>>>, v: Value, f: &mut dyn FnMut(&mut [f64])| {
                        if nodes[v.0].needs_grad {
                            let slot = acc_slot(&mut grads[v.0], nodes[v.0].tensor.numel());
                            f(slot);
                        }
                    };
                match &node.op {
                    Op::Leaf => {}
                    Op::Add(a, b) => {
                        add_to(&mut grads, *a, &mut |s| {
                            for (acc, gv) in s.iter_mut().zip(&g) {
                                *acc += gv;
                            }
                        });
                        add_to(&mut grads, *b, &mut |s| {
                            for (acc, gv) in s.iter_mut().zip(&g) {
                                *acc += gv;
                            }
                        });
                    }
                    Op::Mul(a, b) => {
                        let ad = nodes[a.0].tensor.data();
                        let bd = nodes[b.0].tensor.data();
                        add_to(&mut grads, *a, &mut |s| {
                            for k in 0..s.len() {
                                s[k] += g[k] * bd[k];
                            }
                        });
                        add_to(&mut grads, *b, &mut |s| {
                            for k in 0..s.len() {
                                s[k] += g[k] * ad[k];
                            }
                        });
                    }
                    Op::AffineScalar(a, scale) => {
                        let scale = *scale;
                        add_to(&mut grads, *a, &mut |s| {
                            for k in 0..s.len() {
                                s[k] += g[k] * scale;
                            }
                        });
                    }
                    Op::Relu(a) => {
                        let ad = nodes[a.0].tensor.data();
                        add_to(&mut grads, *a, &mut |s| {
                            for k in 0..s.len() {
                                if ad[k] > 0.0 {
                                    s[k] += g[k];
                                }
                            }
                        });
                    }
                    Op::Sigmoid(a) => {
                        let yd = node.tensor.data();
                        add_to(&mut grads, *a, &mut |s| {
                            for k in 0..s.len() {
                                s[k] += g[k] * yd[k] * (1.0 - yd[k]);
                            }
                        });
                    }
                    Op::Log(a) => {
                        let ad = nodes[a.0].tensor.data();
                        add_to(&mut grads, *a, &mut |s| {
                            for k in 0..s.len() {
                                s[k] += g[k] / ad[k];
                            }
                        });
                    }
                    Op::Sqrt(a) => {
                        let yd = node.tensor.data();
                        add_to(&mut grads, *a, &mut |s| {
                            for k in 0..s.len() {
                                s[k] += g[k] / (2.0 * yd[k]);
                            }
                        });
                    }
                    Op::Recip(a) => {
                        let yd = node.tensor.data();
                        add_to(&mut grads, *a, &mut |s| {
                            for k in 0..s.len() {
                                s[k] -= g[k] * yd[k] * yd[k];
                            }
                        });
                    }
                    Op::Clamp(a, lo, hi) => {
                        let ad = nodes[a.0].tensor.data();
                        let (lo, hi) = (*lo, *hi);
                        add_to(&mut grads, *a, &mut |s| {
                            for k in 0..s.len() {
                                if ad[k] >= lo && ad[k] <= hi {
                                    s[k] += g[k];
                                }
                            }
                        });
                    }
                    Op::Conv1x1 { x, w, bias } => {
                        let xs = nodes[x.0].tensor.shape();
                        let (b, c_in, h, wd_) = (xs[0], xs[1], xs[2], xs[3]);
                        let c_out = nodes[w.0].tensor.shape()[0];
                        let hw = h * wd_;
                        let xd = nodes[x.0].tensor.data();
                        let wdat = nodes[w.0].tensor.data();
                        add_to(&mut grads, *x, &mut |s| {
                            for bi in 0..b {
                                for o in 0..c_out {
                                    let go = &g[(bi * c_out + o) * hw..(bi * c_out + o + 1) * hw];
                                    for ci in 0..c_in {
                                        let wv = wdat[o * c_in + ci];
                                        let dst = &mut s
                                            [(bi * c_in + ci) * hw..(bi * c_in + ci + 1) * hw];
                                        for (dv, gv) in dst.iter_mut().zip(go) {
                                            *dv += wv * gv;
                                        }
                                    }
                                }
                            }
                        });
                        add_to(&mut grads, *w, &mut |s| {
                            for bi in 0..b {
                                for o in 0..c_out {
                                    let go = &g[(bi * c_out + o) * hw..(bi * c_out + o + 1) * hw];
                                    for ci in 0..c_in {
                                        let src =
                                            &xd[(bi * c_in + ci) * hw..(bi * c_in + ci + 1) * hw];
                                        let mut acc = 0.0;
                                        for (gv, xv) in go.iter().zip(src) {
                                            acc += gv * xv;
                                        }
                                        s[o * c_in + ci] += acc;
                                    }
                                }
                            }
                        });
                        if let Some(bv) = bias {
                            add_to(&mut grads, *bv, &mut |s| {
                                for bi in 0..b {
                                    for o in 0..c_out {
                                        s[o] += g[(bi * c_out + o) * hw..(bi * c_out + o + 1) * hw]
                                            .iter()
                                            .sum::<f64>();
                                    }
                                }
                            });
                        }
                    }
                    Op::BatchNorm {
                        x,
                        gamma,
                        beta,
                        xhat,
                        inv_std,
                        train,
                    } => {
                        let xs = nodes[x.0].tensor.shape();
                        let channels = inv_std.len();
                        let n = node.tensor.numel() / channels;
                        let gd = nodes[gamma.0].tensor.data();
                        let mut sum_g = vec![0.0; channels];
                        let mut sum_gx = vec![0.0; channels];
                        for (k, c) in ChannelIndices::new(xs) {
                            sum_g[c] += g[k];
                            sum_gx[c] += g[k] * xhat[k];
                        }
                        add_to(&mut grads, *gamma, &mut |s| {
                            for c in 0..channels {
                                s[c] += sum_gx[c];
                            }
                        });
                        add_to(&mut grads, *beta, &mut |s| {
                            for c in 0..channels {
                                s[c] += sum_g[c];
                            }
                        });
                        if *train {
                            let inv_n = 1.0 / n as f64;
                            add_to(&mut grads, *x, &mut |s| {
                                for (k, c) in ChannelIndices::new(xs) {
                                    s[k] += gd[c]
                                        * inv_std[c]
                                        * (g[k] - sum_g[c] * inv_n - xhat[k] * sum_gx[c] * inv_n);
                                }
                            });
                        } else {
                            add_to(&mut grads, *x, &mut |s| {
                                for (k, c) in ChannelIndices::new(xs) {
                                    s[k] += g[k] * gd[c] * inv_std[c];
                                }
                            });
                        }
                    }
                    Op::Resize {
                        x,
                        taps_y,
                        taps_x,
                        identity,
                    } => {
                        if *identity {
                            add_to(&mut grads, *x, &mut |s| {
                                for (sv, gv) in s.iter_mut().zip(&g) {
                                    *sv += gv;
                                }
                            });
                        } else {
                            let xs = nodes[x.0].tensor.shape();
                            let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                            let (th, tw) = (taps_y.len(), taps_x.len());
                            add_to(&mut grads, *x, &mut |s| {
                                for bc in 0..b * c {
                                    let go = &g[bc * th * tw..(bc + 1) * th * tw];
                                    let dst = &mut s[bc * h * w..(bc + 1) * h * w];
                                    for (oy, &(y0, y1, ty)) in taps_y.iter().enumerate() {
                                        for (ox, &(x0, x1, tx)) in taps_x.iter().enumerate() {
                                            let gv = go[oy * tw + ox];
                                            dst[y0 * w + x0] += gv * (1.0 - ty) * (1.0 - tx);
                                            dst[y0 * w + x1] += gv * (1.0 - ty) * tx;
                                            dst[y1 * w + x0] += gv * ty * (1.0 - tx);
                                            dst[y1 * w + x1] += gv * ty * tx;
                                        }
                                    }
                                }
                            });
                        }
                    }
                    Op::AvgPool { x, k } => {
                        let xs = nodes[x.0].tensor.shape();
                        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                        let k = *k;
                        let (oh, ow) = (h / k, w / k);
                        let inv = 1.0 / (k * k) as f64;
                        add_to(&mut grads, *x, &mut |s| {
                            for bc in 0..b * c {
                                let go = &g[bc * oh * ow..(bc + 1) * oh * ow];
                                let dst = &mut s[bc * h * w..(bc + 1) * h * w];
                                for oy in 0..oh {
                                    for ox in 0..ow {
                                        let gv = go[oy * ow + ox] * inv;
                                        for dy in 0..k {
                                            for dx in 0..k {
                                                dst[(oy * k + dy) * w + ox * k + dx] += gv;
                                            }
                                        }
                                    }
                                }
                            }
                        });
                    }
                    Op::Gap(x) => {
                        let xs = nodes[x.0].tensor.shape();
                        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                        let inv = 1.0 / (h * w) as f64;
                        add_to(&mut grads, *x, &mut |s| {
                            for bc in 0..b * c {
                                let gv = g[bc] * inv;
                                for sv in &mut s[bc * h * w..(bc + 1) * h * w] {
                                    *sv += gv;
                                }
                            }
                        });
                    }
                    Op::Affine { x, w, bias } => {
                        let xs = nodes[x.0].tensor.shape();
                        let (n, inp) = (xs[0], xs[1]);
                        let out_dim = nodes[w.0].tensor.shape()[0];
                        let xd = nodes[x.0].tensor.data();
                        let wd = nodes[w.0].tensor.data();
                        add_to(&mut grads, *x, &mut |s| {
                            for ni in 0..n {
                                for o in 0..out_dim {
                                    let gv = g[ni * out_dim + o];
                                    let wrow = &wd[o * inp..(o + 1) * inp];
                                    let dst = &mut s[ni * inp..(ni + 1) * inp];
                                    for (dv, wv) in dst.iter_mut().zip(wrow) {
                                        *dv += gv * wv;
                                    }
                                }
                            }
                        });
                        add_to(&mut grads, *w, &mut |s| {
                            for ni in 0..n {
                                let xrow = &xd[ni * inp..(ni + 1) * inp];
                                for o in 0..out_dim {
                                    let gv = g[ni * out_dim + o];
                                    let dst = &mut s[o * inp..(o + 1) * inp];
                                    for (dv, xv) in dst.iter_mut().zip(xrow) {
                                        *dv += gv * xv;
                                    }
                                }
                            }
                        });
                        if let Some(bv) = bias {
                            add_to(&mut grads, *bv, &mut |s| {
                                for ni in 0..n {
                                    for o in 0..out_dim {
                                        s[o] += g[ni * out_dim + o];
                                    }
                                }
                            });
                        }
                    }
                    Op::LogSoftmax(x) => {
                        let yd = node.tensor.data();
                        let cols = *node.tensor.shape().last().unwrap();
                        let rows = yd.len() / cols;
                        add_to(&mut grads, *x, &mut |s| {
                            for r in 0..rows {
                                let gsum: f64 = g[r * cols..(r + 1) * cols].iter().sum();
                                for c in 0..cols {
                                    let p = yd[r * cols + c].exp();
                                    s[r * cols + c] += g[r * cols + c] - p * gsum;
                                }
                            }
                        });
                    }
                    Op::SumLast(x) => {
                        let cols = *nodes[x.0].tensor.shape().last().unwrap();
                        add_to(&mut grads, *x, &mut |s| {
                            for (k, sv) in s.iter_mut().enumerate() {
                                *sv += g[k / cols];
                            }
                        });
                    }
                    Op::SumAll(x) => {
                        add_to(&mut grads, *x, &mut |s| {
                            for sv in s.iter_mut() {
                                *sv += g[0];
                            }
                        });
                    }
                    Op::MeanAll(x) => {
                        let inv = 1.0 / nodes[x.0].tensor.numel() as f64;
                        add_to(&mut grads, *x, &mut |s| {
                            for sv in s.iter_mut() {
                                *sv += g[0] * inv;
                            }
                        });
                    }
                    Op::RowScale { x, s: sc } => {
                        let xs = nodes[x.0].tensor.shape();
                        let (rows, cols) = (xs[0], xs[1]);
                        let xd = nodes[x.0].tensor.data();
                        let sd = nodes[sc.0].tensor.data();
                        add_to(&mut grads, *x, &mut |s| {
                            for r in 0..rows {
                                for c in 0..cols {
                                    s[r * cols + c] += g[r * cols + c] * sd[r];
                                }
                            }
                        });
                        add_to(&mut grads, *sc, &mut |s| {
                            for r in 0..rows {
                                let mut acc = 0.0;
                                for c in 0..cols {
                                    acc += g[r * cols + c] * xd[r * cols + c];
                                }
                                s[r] += acc;
                            }
                        });
                    }
                    Op::PairwiseDist { x, pairs } => {
                        let d = nodes[x.0].tensor.shape()[1];
                        let xd = nodes[x.0].tensor.data();
                        let dist = node.tensor.data();
                        add_to(&mut grads, *x, &mut |s| {
                            for (p, &(i, j)) in pairs.iter().enumerate() {
                                let coef = g[p] / dist[p].max(1e-12);
                                for k in 0..d {
                                    let diff = xd[i * d + k] - xd[j * d + k];
                                    s[i * d + k] += coef * diff;
                                    s[j * d + k] -= coef * diff;
                                }
                            }
                        });
                    }
                    Op::Fuse4 { maps, w } => {
                        let per = {
                            let s = nodes[maps[0].0].tensor.shape();
                            s[1] * s[2] * s[3]
                        };
                        let b = nodes[maps[0].0].tensor.shape()[0];
                        let wd = nodes[w.0].tensor.data();
                        for (mi, m) in maps.iter().enumerate() {
                            add_to(&mut grads, *m, &mut |s| {
                                for bi in 0..b {
                                    let wv = wd[bi * 4 + mi];
                                    let go = &g[bi * per..(bi + 1) * per];
                                    let dst = &mut s[bi * per..(bi + 1) * per];
                                    for (dv, gv) in dst.iter_mut().zip(go) {
                                        *dv += wv * gv;
                                    }
                                }
                            });
                        }
                        add_to(&mut grads, *w, &mut |s| {
                            for (mi, m) in maps.iter().enumerate() {
                                let md = nodes[m.0].tensor.data();
                                for bi in 0..b {
                                    let go = &g[bi * per..(bi + 1) * per];
                                    let src = &md[bi * per..(bi + 1) * per];
                                    let mut acc = 0.0;
                                    for (gv, sv) in go.iter().zip(src) {
                                        acc += gv * sv;
                                    }
                                    s[bi * 4 + mi] += acc;
                                }
                            }
                        });
                    }
                    Op::Dropout { x, mask } => {
                        add_to(&mut grads, *x, &mut |s| {
                            for k in 0..s.len() {
                                s[k] += g[k] * mask[k];
                            }
                        });
                    }
                    Op::FlattenLocations(x) => {
                        let xs = nodes[x.0].tensor.shape();
                        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                        add_to(&mut grads, *x, &mut |s| {
                            for bi in 0..b {
                                for ci in 0..c {
                                    for hi in 0..h {
                                        for wi in 0..w {
                                            let row = (bi * h + hi) * w + wi;
                                            s[((bi * c + ci) * h + hi) * w + wi] += g[row * c + ci];
                                        }
                                    }
                                }
                            }
                        });
                    }
                }
            }
            self.nodes[i].tensor.grad = Some(g);
        }
        Ok(())
    }
}

/// Iterator yielding `(flat_index, channel)` for the batchnorm layouts
/// `[N, C]` and `[B, C, H, W]`.
struct ChannelIndices {
    total: usize,
    i: usize,
    channels: usize,
    plane: usize,
}

impl ChannelIndices {
    fn new(shape: &[usize]) -> Self {
        let (channels, plane) = match shape.len() {
            2 => (shape[1], 1),
            4 => (shape[1], shape[2] * shape[3]),
            _ => unreachable!("batchnorm layouts are rank 2 or 4"),
        };
        ChannelIndices {
            total: shape.iter().product(),
            i: 0,
            channels,
            plane,
        }
    }
}

impl Iterator for ChannelIndices {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        if self.i >= self.total {
            return None;
        }
        let i = self.i;
        self.i += 1;
        let c = if self.plane == 1 {
            i % self.channels
        } else {
            (i / self.plane) % self.channels
        };
        Some((i, c))
    }
}
