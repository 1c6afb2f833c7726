//! Rule-based per-location pseudo-labels over a fused feature map, and the
//! MLP head that classifies every spatial location independently.
//!
//! Labels come from two fixed rules: a vertical three-way body partition
//! (upper / lower / shoes) and a feature-magnitude foreground test. They are
//! recomputed from the current features every batch and are never
//! differentiated through.

use image::RgbImage;
use rand::Rng;

use crate::nn::{dropout_mask, AffineLayer, Binder, BnLayer};
use crate::tape::{BnStats, Mode, Value};
use crate::tensor::{Tensor, TensorError};

pub const UPPER: u8 = 0;
pub const LOWER: u8 = 1;
pub const SHOES: u8 = 2;
pub const BACKGROUND: u8 = 3;

/// Per-location classes for one batch, plus the mask and statistics that
/// produced them. Every location carries exactly one label; label 3 appears
/// exactly where the mask is background.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMap {
    labels: Vec<u8>,
    foreground: Vec<bool>,
    /// Per-image (mean, population std) of the channel-norm magnitudes.
    pub stats: Vec<(f64, f64)>,
    batch: usize,
    h: usize,
    w: usize,
}

impl PseudoLabelMap {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.h, self.w)
    }

    pub fn label(&self, b: usize, y: usize, x: usize) -> u8 {
        self.labels[(b * self.h + y) * self.w + x]
    }

    pub fn is_foreground(&self, b: usize, y: usize, x: usize) -> bool {
        self.foreground[(b * self.h + y) * self.w + x]
    }

    /// Labels flattened in the same `[B*H*W]` order the semantic head emits
    /// its logit rows.
    pub fn flat_labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn foreground_count(&self) -> usize {
        self.foreground.iter().filter(|&&f| f).count()
    }

    pub fn class_count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

/// Vertical body partition of a normalized row coordinate in [0, 1):
/// top 40% upper body, next 40% lower body, bottom 20% shoes. Boundaries
/// belong to the lower region.
pub fn spatial_class(y_norm: f64) -> Result<u8, TensorError> {
    if !(0.0..1.0).contains(&y_norm) {
        return Err(TensorError::arg(
            "spatial_class",
            format!("normalized coordinate {y_norm} outside [0, 1)"),
        ));
    }
    Ok(if y_norm < 0.4 {
        UPPER
    } else if y_norm < 0.8 {
        LOWER
    } else {
        SHOES
    })
}

/// Compensated summation; keeps the mean of identical magnitudes exact so
/// the uniform-map case degenerates to std 0 and an all-background mask.
fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Channel-norm foreground test: a location is foreground iff its L2
/// magnitude strictly exceeds mean + 0.5 * std of the magnitudes of its own
/// image (population std, no Bessel correction).
pub fn foreground_mask(fused: &Tensor) -> Result<(Vec<bool>, Vec<(f64, f64)>), TensorError> {
    let s = fused.shape();
    if s.len() != 4 {
        return Err(TensorError::RankMismatch {
            context: "foreground_mask input".into(),
            expected: 4,
            got: s.to_vec(),
        });
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let mut mask = vec![false; b * hw];
    let mut stats = Vec::with_capacity(b);
    for bi in 0..b {
        let mut mags = vec![0.0f64; hw];
        for ci in 0..c {
            let plane = &fused.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for (m, v) in mags.iter_mut().zip(plane) {
                *m += v * v;
            }
        }
        for m in &mut mags {
            *m = m.sqrt();
        }
        let mean = kahan_sum(mags.iter().copied()) / hw as f64;
        let var = kahan_sum(mags.iter().map(|m| (m - mean) * (m - mean))) / hw as f64;
        let std = var.sqrt();
        let threshold = mean + 0.5 * std;
        for (k, m) in mags.iter().enumerate() {
            mask[bi * hw + k] = *m > threshold;
        }
        stats.push((mean, std));
    }
    Ok((mask, stats))
}

/// Combine a foreground mask with the vertical partition: background
/// locations get label 3, foreground locations their body-region class at
/// y_norm = row / H.
pub fn labels_from_mask(
    mask: &[bool],
    batch: usize,
    h: usize,
    w: usize,
) -> Result<Vec<u8>, TensorError> {
    if mask.len() != batch * h * w {
        return Err(TensorError::dim(
            "labels_from_mask",
            format!("{} locations", batch * h * w),
            format!("{}", mask.len()),
        ));
    }
    let mut labels = vec![BACKGROUND; mask.len()];
    for bi in 0..batch {
        for y in 0..h {
            let class = spatial_class(y as f64 / h as f64)?;
            for x in 0..w {
                let i = (bi * h + y) * w + x;
                if mask[i] {
                    labels[i] = class;
                }
            }
        }
    }
    Ok(labels)
}

/// Full pseudo-label generation for a fused map. The result is host data,
/// detached from any tape: targets for this batch, not differentiable.
pub fn pseudo_labels(fused: &Tensor) -> Result<PseudoLabelMap, TensorError> {
    let s = fused.shape();
    let (batch, h, w) = (s[0], s[2], s[3]);
    let (foreground, stats) = foreground_mask(fused)?;
    let labels = labels_from_mask(&foreground, batch, h, w)?;
    Ok(PseudoLabelMap {
        labels,
        foreground,
        stats,
        batch,
        h,
        w,
    })
}

/// Debug rendering of one image's labels: upper red, lower green, shoes
/// blue, background black.
pub fn label_map_image(map: &PseudoLabelMap, image_index: usize) -> RgbImage {
    let (_, h, w) = map.dims();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        match map.label(image_index, y as usize, x as usize) {
            UPPER => image::Rgb([255, 0, 0]),
            LOWER => image::Rgb([0, 255, 0]),
            SHOES => image::Rgb([0, 0, 255]),
            _ => image::Rgb([0, 0, 0]),
        }
    })
}

/// Three-layer MLP over flattened locations with BN and dropout after the
/// two hidden layers. At full scale (2048 -> 1024 -> 512 -> 4) it folds to
/// 2,628,100 parameters.
#[derive(Debug, Clone)]
pub struct SemanticHead {
    pub fc1: AffineLayer,
    pub bn1: BnLayer,
    pub fc2: AffineLayer,
    pub bn2: BnLayer,
    pub fc3: AffineLayer,
    pub dropout: f64,
}

impl SemanticHead {
    pub fn new(rng: &mut impl Rng, d: usize, hidden1: usize, hidden2: usize) -> Self {
        SemanticHead {
            fc1: AffineLayer::new(rng, d, hidden1, true),
            bn1: BnLayer::new(hidden1),
            fc2: AffineLayer::new(rng, hidden1, hidden2, true),
            bn2: BnLayer::new(hidden2),
            fc3: AffineLayer::new(rng, hidden2, 4, true),
            dropout: 0.1,
        }
    }

    pub fn full_scale(rng: &mut impl Rng, d: usize) -> Self {
        Self::new(rng, d, 1024, 512)
    }

    /// Per-location logits `[B*H*W, 4]`. Every location is an independent
    /// sample; BN runs over the flattened location batch. Dropout draws from
    /// `rng` only in train mode, so eval forwards are deterministic.
    pub fn forward(
        &self,
        b: &mut Binder,
        fused: Value,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<(Value, Vec<BnStats>), TensorError> {
        let d = b.tape.shape(fused)[1];
        if d != self.fc1.w.shape()[1] {
            return Err(TensorError::dim(
                "semantic head input channels",
                format!("{}", self.fc1.w.shape()[1]),
                format!("{d}"),
            ));
        }
        let x = b.tape.flatten_locations(fused)?;
        let h1 = self.fc1.forward(b, "sem.fc1", x)?;
        let (h1, st1) = self.bn1.forward(b, "sem.bn1", h1, mode)?;
        let mut h1 = b.tape.relu(h1);
        if let Some(mask) = dropout_mask(rng, b.tape.tensor(h1).numel(), self.dropout, mode) {
            h1 = b.tape.dropout_mask(h1, mask)?;
        }
        let h2 = self.fc2.forward(b, "sem.fc2", h1)?;
        let (h2, st2) = self.bn2.forward(b, "sem.bn2", h2, mode)?;
        let mut h2 = b.tape.relu(h2);
        if let Some(mask) = dropout_mask(rng, b.tape.tensor(h2).numel(), self.dropout, mode) {
            h2 = b.tape.dropout_mask(h2, mask)?;
        }
        let logits = self.fc3.forward(b, "sem.fc3", h2)?;
        Ok((logits, vec![st1, st2]))
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.fc1.params_mut("sem.fc1");
        out.extend(self.bn1.params_mut("sem.bn1"));
        out.extend(self.fc2.params_mut("sem.fc2"));
        out.extend(self.bn2.params_mut("sem.bn2"));
        out.extend(self.fc3.params_mut("sem.fc3"));
        out
    }

    pub fn commit_bn(&mut self, stats: Vec<BnStats>) {
        let mut it = stats.into_iter();
        if let Some(s) = it.next() {
            self.bn1.commit(s);
        }
        if let Some(s) = it.next() {
            self.bn2.commit(s);
        }
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count()
            + self.bn1.param_count()
            + self.fc2.param_count()
            + self.bn2.param_count()
            + self.fc3.param_count()
    }
}
