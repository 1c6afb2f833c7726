//! The three training losses, all recorded on the tape: identity
//! cross-entropy with label smoothing, a symmetric alpha-divergence loss
//! over every batch pair, and per-location semantic cross-entropy.

use crate::semantics::PseudoLabelMap;
use crate::tape::{Tape, Value};
use crate::tensor::{Tensor, TensorError};

/// Mean cross-entropy with a smoothed target distribution
/// q = (1-eps) * onehot + eps/N.
pub fn ce_label_smoothing(
    tape: &mut Tape,
    logits: Value,
    targets: &[usize],
    eps: f64,
) -> Result<Value, TensorError> {
    if !(0.0..1.0).contains(&eps) {
        return Err(TensorError::arg(
            "ce_label_smoothing",
            format!("smoothing {eps} outside [0, 1)"),
        ));
    }
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::RankMismatch {
            context: "ce logits".into(),
            expected: 2,
            got: shape,
        });
    }
    let (b, n) = (shape[0], shape[1]);
    if targets.len() != b {
        return Err(TensorError::dim(
            "ce targets",
            format!("{b}"),
            format!("{}", targets.len()),
        ));
    }
    let mut q = vec![eps / n as f64; b * n];
    for (row, &t) in targets.iter().enumerate() {
        if t >= n {
            return Err(TensorError::TargetOutOfRange {
                target: t,
                classes: n,
            });
        }
        q[row * n + t] += 1.0 - eps;
    }
    let qv = tape.constant(Tensor::new(vec![b, n], q)?);
    let ls = tape.log_softmax(logits)?;
    let weighted = tape.mul(ls, qv)?;
    let per_row = tape.sum_last(weighted)?;
    let mean = tape.mean_all(per_row);
    Ok(tape.affine_scalar(mean, -1.0, 0.0))
}

/// Configuration of the pairwise divergence loss. The learned relationship
/// is u = sigmoid((bias - distance) / scale): close pairs map near 1,
/// distant pairs near 0.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FidiConfig {
    pub alpha: f64,
    pub scale: f64,
    pub bias: f64,
    pub clamp_eps: f64,
}

impl Default for FidiConfig {
    fn default() -> Self {
        FidiConfig {
            alpha: 2.0,
            scale: 0.25,
            bias: 1.0,
            clamp_eps: 1e-7,
        }
    }
}

impl FidiConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.alpha <= 1.0 {
            return Err(TensorError::arg(
                "fidi config",
                format!("alpha must exceed 1, got {}", self.alpha),
            ));
        }
        if self.scale <= 0.0 {
            return Err(TensorError::arg(
                "fidi config",
                format!("scale must be positive, got {}", self.scale),
            ));
        }
        if !(0.0 < self.clamp_eps && self.clamp_eps < 0.5) {
            return Err(TensorError::arg(
                "fidi config",
                format!("clamp epsilon {} outside (0, 0.5)", self.clamp_eps),
            ));
        }
        Ok(())
    }
}

/// Scalar oracle for one pair:
/// u*log(alpha*u / ((alpha-1)*u + k)) + k*log(alpha*k / ((alpha-1)*k + u)),
/// with the k = 0 second direction defined as 0.
pub fn fidi_pair_term(u: f64, k: u8, alpha: f64) -> Result<f64, TensorError> {
    if alpha <= 1.0 {
        return Err(TensorError::arg(
            "fidi_pair_term",
            format!("alpha must exceed 1, got {alpha}"),
        ));
    }
    if !(0.0 < u && u < 1.0) {
        return Err(TensorError::arg(
            "fidi_pair_term",
            format!("u {u} outside (0, 1)"),
        ));
    }
    let kf = k as f64;
    let first = u * (alpha * u / ((alpha - 1.0) * u + kf)).ln();
    let second = if k == 1 {
        (alpha / (alpha - 1.0 + u)).ln()
    } else {
        0.0
    };
    Ok(first + second)
}

/// Every unordered pair of a batch, with its same-identity indicator.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub pairs: Vec<(usize, usize)>,
    pub same: Vec<bool>,
}

impl PairSet {
    pub fn from_ids(ids: &[i64]) -> Self {
        let b = ids.len();
        let mut pairs = Vec::with_capacity(b * (b - 1) / 2);
        let mut same = Vec::with_capacity(b * (b - 1) / 2);
        for i in 0..b {
            for j in i + 1..b {
                pairs.push((i, j));
                same.push(ids[i] == ids[j]);
            }
        }
        PairSet { pairs, same }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.same.iter().filter(|&&s| s).count()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FidiLoss {
    pub value: Value,
    /// True when the batch lacks positive or negative pairs; the loss is
    /// still defined, but it cannot push in both directions.
    pub degenerate: bool,
}

/// Pairwise divergence loss over all unordered pairs of the batch.
///
/// Embeddings are unit-normalized on the tape, pair distances are Euclidean,
/// and u = sigmoid((bias - d) / scale) clamped into (0, 1). The k = 0
/// reverse direction is multiplied by the indicator constant, so it
/// contributes exactly zero value and gradient without evaluating log(0).
pub fn fidi_loss(
    tape: &mut Tape,
    embeddings: Value,
    ids: &[i64],
    cfg: &FidiConfig,
) -> Result<FidiLoss, TensorError> {
    cfg.validate()?;
    let shape = tape.shape(embeddings).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::RankMismatch {
            context: "fidi embeddings".into(),
            expected: 2,
            got: shape,
        });
    }
    let b = shape[0];
    if b < 2 {
        return Err(TensorError::arg(
            "fidi_loss",
            format!("need at least 2 embeddings, got {b}"),
        ));
    }
    if ids.len() != b {
        return Err(TensorError::dim(
            "fidi ids",
            format!("{b}"),
            format!("{}", ids.len()),
        ));
    }
    let pair_set = PairSet::from_ids(ids);
    let degenerate = pair_set.positives() == 0 || pair_set.positives() == pair_set.len();

    // Unit-normalize rows; the norm is clamped away from zero so a zero
    // embedding cannot produce a non-finite gradient.
    let sq = tape.mul(embeddings, embeddings)?;
    let norms_sq = tape.sum_last(sq)?;
    let norms = tape.sqrt(norms_sq);
    let norms = tape.clamp(norms, 1e-12, f64::MAX)?;
    let inv = tape.recip(norms);
    let normed = tape.row_scale(embeddings, inv)?;

    let d = tape.pairwise_dist(normed, &pair_set.pairs)?;
    let u_raw = tape.affine_scalar(d, -1.0 / cfg.scale, cfg.bias / cfg.scale);
    let u_sig = tape.sigmoid(u_raw);
    let u = tape.clamp(u_sig, cfg.clamp_eps, 1.0 - cfg.clamp_eps)?;

    let a = cfg.alpha;
    let p = pair_set.len();
    let k_vec: Vec<f64> = pair_set
        .same
        .iter()
        .map(|&s| if s { 1.0 } else { 0.0 })
        .collect();
    let k = tape.constant(Tensor::new(vec![p], k_vec.clone())?);

    // First direction: u * log(alpha*u / ((alpha-1)*u + k)).
    let num1 = tape.affine_scalar(u, a, 0.0);
    let den_base = tape.affine_scalar(u, a - 1.0, 0.0);
    let den1 = tape.add(den_base, k)?;
    let log_num1 = tape.log(num1);
    let log_den1 = tape.log(den1);
    let neg_log_den1 = tape.affine_scalar(log_den1, -1.0, 0.0);
    let log_ratio1 = tape.add(log_num1, neg_log_den1)?;
    let t1 = tape.mul(u, log_ratio1)?;

    // Second direction: k * log(alpha*k / ((alpha-1)*k + u)). The numerator
    // log is a constant (ln alpha where k = 1, and a placeholder 0 where
    // k = 0 that the k multiplier cancels exactly).
    let log_num2: Vec<f64> = k_vec
        .iter()
        .map(|&kf| if kf == 1.0 { a.ln() } else { 0.0 })
        .collect();
    let log_num2 = tape.constant(Tensor::new(vec![p], log_num2)?);
    let den2_k: Vec<f64> = k_vec.iter().map(|&kf| (a - 1.0) * kf).collect();
    let den2_k = tape.constant(Tensor::new(vec![p], den2_k)?);
    let den2 = tape.add(den2_k, u)?;
    let log_den2 = tape.log(den2);
    let neg_log_den2 = tape.affine_scalar(log_den2, -1.0, 0.0);
    let log_ratio2 = tape.add(log_num2, neg_log_den2)?;
    let t2 = tape.mul(k, log_ratio2)?;

    let terms = tape.add(t1, t2)?;
    let value = tape.mean_all(terms);
    Ok(FidiLoss { value, degenerate })
}

/// Plain mean cross-entropy of per-location logits against pseudo-labels
/// (no smoothing on this branch).
pub fn semantic_loss(
    tape: &mut Tape,
    logits: Value,
    labels: &PseudoLabelMap,
) -> Result<Value, TensorError> {
    let rows = tape.shape(logits)[0];
    let flat = labels.flat_labels();
    if rows != flat.len() {
        return Err(TensorError::dim(
            "semantic_loss rows",
            format!("{} labeled locations", flat.len()),
            format!("{rows}"),
        ));
    }
    let targets: Vec<usize> = flat.iter().map(|&l| l as usize).collect();
    ce_label_smoothing(tape, logits, &targets, 0.0)
}
