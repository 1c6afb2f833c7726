//! Multi-scale fusion: per-stage projection to a common width, alignment to
//! the coarsest grid, learned per-scale gates, weighted summation, and the
//! identity head that turns the fused map into an embedding and logits.

use rand::Rng;

use crate::nn::{AffineLayer, Binder, BnLayer, Conv1x1Layer};
use crate::tape::{BnStats, Mode, Tape, Value};
use crate::tensor::{Tensor, TensorError};

/// The four backbone stage outputs, finest to coarsest. Spatial extents must
/// halve stage-to-stage; channel widths are checked against the fusion
/// config at projection time.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    stages: [Tensor; 4],
}

impl FeaturePyramid {
    pub fn new(stages: [Tensor; 4]) -> Result<Self, TensorError> {
        for (i, s) in stages.iter().enumerate() {
            if s.shape().len() != 4 {
                return Err(TensorError::RankMismatch {
                    context: format!("pyramid stage {i}"),
                    expected: 4,
                    got: s.shape().to_vec(),
                });
            }
        }
        let batch = stages[0].shape()[0];
        for (i, s) in stages.iter().enumerate().skip(1) {
            if s.shape()[0] != batch {
                return Err(TensorError::dim(
                    &format!("pyramid stage {i} batch"),
                    format!("{batch}"),
                    format!("{}", s.shape()[0]),
                ));
            }
            let (ph, pw) = (stages[i - 1].shape()[2], stages[i - 1].shape()[3]);
            let (h, w) = (s.shape()[2], s.shape()[3]);
            if h * 2 != ph || w * 2 != pw {
                return Err(TensorError::dim(
                    &format!("pyramid stage {i} spatial"),
                    format!("{}x{}", ph / 2, pw / 2),
                    format!("{h}x{w}"),
                ));
            }
        }
        Ok(FeaturePyramid { stages })
    }

    pub fn stages(&self) -> &[Tensor; 4] {
        &self.stages
    }

    pub fn channels(&self) -> [usize; 4] {
        [
            self.stages[0].shape()[1],
            self.stages[1].shape()[1],
            self.stages[2].shape()[1],
            self.stages[3].shape()[1],
        ]
    }

    /// Register every stage as a non-differentiable tape input.
    pub fn register(&self, tape: &mut Tape) -> [Value; 4] {
        [
            tape.constant(self.stages[0].clone()),
            tape.constant(self.stages[1].clone()),
            tape.constant(self.stages[2].clone()),
            tape.constant(self.stages[3].clone()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionConfig {
    pub in_channels: [usize; 4],
    /// Common projection width.
    pub d: usize,
    /// Hidden width of the attention MLP.
    pub attn_hidden: usize,
    /// Projection convs may carry a bias; BN follows, so it is redundant but
    /// kept switchable for parameter-count experiments.
    pub projection_bias: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            in_channels: [256, 512, 1024, 2048],
            d: 2048,
            attn_hidden: 512,
            projection_bias: true,
        }
    }
}

/// Per-scale sigmoid gates, shape `[B, 4]` on the tape. Each gate lies in
/// (0, 1); the four are independent and do not sum to one.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    value: Value,
}

impl AttentionWeights {
    pub fn value(&self) -> Value {
        self.value
    }

    /// Wrap externally chosen constant gates; each must lie in [0, 1].
    pub fn from_constant(tape: &mut Tape, rows: &[[f64; 4]]) -> Result<Self, TensorError> {
        for row in rows {
            for &w in row {
                if !(0.0..=1.0).contains(&w) {
                    return Err(TensorError::arg(
                        "attention weights",
                        format!("gate {w} outside [0, 1]"),
                    ));
                }
            }
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        let t = Tensor::new(vec![rows.len(), 4], data)?;
        Ok(AttentionWeights {
            value: tape.constant(t),
        })
    }

    /// One `[w_1..w_4]` row per batch element.
    pub fn rows(&self, tape: &Tape) -> Vec<[f64; 4]> {
        tape.data(self.value)
            .chunks_exact(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect()
    }
}

/// Learnable state of the fusion block: four projection convs with their BN,
/// plus the two-layer attention MLP producing exactly four gates.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub cfg: FusionConfig,
    pub proj: [Conv1x1Layer; 4],
    pub proj_bn: [BnLayer; 4],
    pub attn1: AffineLayer,
    pub attn2: AffineLayer,
}

impl FusionParams {
    pub fn new(cfg: FusionConfig, rng: &mut impl Rng) -> Self {
        let proj = [
            Conv1x1Layer::new(rng, cfg.in_channels[0], cfg.d, cfg.projection_bias),
            Conv1x1Layer::new(rng, cfg.in_channels[1], cfg.d, cfg.projection_bias),
            Conv1x1Layer::new(rng, cfg.in_channels[2], cfg.d, cfg.projection_bias),
            Conv1x1Layer::new(rng, cfg.in_channels[3], cfg.d, cfg.projection_bias),
        ];
        let proj_bn = [
            BnLayer::new(cfg.d),
            BnLayer::new(cfg.d),
            BnLayer::new(cfg.d),
            BnLayer::new(cfg.d),
        ];
        let attn1 = AffineLayer::new(rng, cfg.d, cfg.attn_hidden, true);
        let attn2 = AffineLayer::new(rng, cfg.attn_hidden, 4, true);
        FusionParams {
            cfg,
            proj,
            proj_bn,
            attn1,
            attn2,
        }
    }

    /// Project every stage to width D: conv1x1, then BN, then ReLU. Returns
    /// the maps plus the advanced BN statistics in stage order.
    pub fn project_scales(
        &self,
        b: &mut Binder,
        stages: [Value; 4],
        mode: Mode,
    ) -> Result<([Value; 4], Vec<BnStats>), TensorError> {
        let mut out = Vec::with_capacity(4);
        let mut stats = Vec::with_capacity(4);
        for i in 0..4 {
            let got = b.tape.shape(stages[i])[1];
            if got != self.cfg.in_channels[i] {
                return Err(TensorError::dim(
                    &format!("projection {i} channels"),
                    format!("{}", self.cfg.in_channels[i]),
                    format!("{got}"),
                ));
            }
            let c = self.proj[i].forward(b, &format!("fusion.proj{i}"), stages[i])?;
            let (n, st) = self.proj_bn[i].forward(b, &format!("fusion.bn{i}"), c, mode)?;
            out.push(b.tape.relu(n));
            stats.push(st);
        }
        Ok(([out[0], out[1], out[2], out[3]], stats))
    }

    /// Gate computation: mean the four aligned maps, pool globally, then a
    /// two-layer MLP ending in a sigmoid over exactly four outputs.
    pub fn scale_attention(
        &self,
        b: &mut Binder,
        aligned: [Value; 4],
    ) -> Result<AttentionWeights, TensorError> {
        if self.attn2.out_dim() != 4 {
            return Err(TensorError::arg(
                "scale_attention",
                format!(
                    "attention must emit 4 gates, layer emits {}",
                    self.attn2.out_dim()
                ),
            ));
        }
        let s01 = b.tape.add(aligned[0], aligned[1])?;
        let s23 = b.tape.add(aligned[2], aligned[3])?;
        let sum = b.tape.add(s01, s23)?;
        let mean = b.tape.affine_scalar(sum, 0.25, 0.0);
        let pooled = b.tape.global_avg_pool(mean)?;
        let h = self.attn1.forward(b, "fusion.attn1", pooled)?;
        let h = b.tape.relu(h);
        let gates = self.attn2.forward(b, "fusion.attn2", h)?;
        let value = b.tape.sigmoid(gates);
        Ok(AttentionWeights { value })
    }

    /// Binder registration order of `project_scales` + `scale_attention`.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, (conv, bn)) in self
            .proj
            .iter_mut()
            .zip(self.proj_bn.iter_mut())
            .enumerate()
        {
            out.extend(conv.params_mut(&format!("fusion.proj{i}")));
            out.extend(bn.params_mut(&format!("fusion.bn{i}")));
        }
        out.extend(self.attn1.params_mut("fusion.attn1"));
        out.extend(self.attn2.params_mut("fusion.attn2"));
        out
    }

    pub fn commit_bn(&mut self, stats: Vec<BnStats>) {
        for (bn, st) in self.proj_bn.iter_mut().zip(stats) {
            bn.commit(st);
        }
    }

    pub fn param_count(&self) -> usize {
        self.proj.iter().map(|l| l.param_count()).sum::<usize>()
            + self.proj_bn.iter().map(|l| l.param_count()).sum::<usize>()
            + self.attn1.param_count()
            + self.attn2.param_count()
    }
}

/// Resample every projected map onto the coarsest (last) stage's grid. The
/// last map passes through bit-identically.
pub fn align_scales(tape: &mut Tape, projected: [Value; 4]) -> Result<[Value; 4], TensorError> {
    let target = {
        let s = tape.shape(projected[3]);
        (s[2], s[3])
    };
    let batch = tape.shape(projected[0])[0];
    let chans = tape.shape(projected[0])[1];
    for (i, p) in projected.iter().enumerate().skip(1) {
        let s = tape.shape(*p);
        if s[0] != batch || s[1] != chans {
            return Err(TensorError::dim(
                &format!("align_scales map {i}"),
                format!("batch {batch}, channels {chans}"),
                format!("batch {}, channels {}", s[0], s[1]),
            ));
        }
    }
    Ok([
        tape.bilinear_resize(projected[0], target)?,
        tape.bilinear_resize(projected[1], target)?,
        tape.bilinear_resize(projected[2], target)?,
        tape.bilinear_resize(projected[3], target)?,
    ])
}

/// Weighted sum of the aligned maps under the per-scale gates.
pub fn fuse(
    tape: &mut Tape,
    aligned: [Value; 4],
    w: &AttentionWeights,
) -> Result<Value, TensorError> {
    tape.fuse4(aligned, w.value())
}

/// Pooled embedding, BN-neck, and bias-free linear classifier.
#[derive(Debug, Clone)]
pub struct IdentityHead {
    pub neck: BnLayer,
    pub classifier: AffineLayer,
}

impl IdentityHead {
    pub fn new(d: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        IdentityHead {
            neck: BnLayer::new(d),
            classifier: AffineLayer::new(rng, d, num_classes, false),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_dim()
    }

    /// The classifier must stay bias-free: its parameter budget is exactly
    /// D * classes.
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.classifier.bias.is_some() {
            return Err(TensorError::arg(
                "identity head",
                "classifier carries a bias term; it must be bias-free",
            ));
        }
        Ok(())
    }

    /// Returns (embedding `[B, D]`, logits `[B, classes]`, advanced neck
    /// statistics). The embedding is the BN output; in eval mode it uses the
    /// running statistics and is the retrieval feature.
    pub fn forward(
        &self,
        b: &mut Binder,
        fused: Value,
        mode: Mode,
    ) -> Result<(Value, Value, BnStats), TensorError> {
        self.validate()?;
        let pooled = b.tape.global_avg_pool(fused)?;
        let (embedding, stats) = self.neck.forward(b, "head.neck", pooled, mode)?;
        let logits = self.classifier.forward(b, "head.classifier", embedding)?;
        Ok((embedding, logits, stats))
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.neck.params_mut("head.neck");
        out.extend(self.classifier.params_mut("head.classifier"));
        out
    }

    pub fn param_count(&self) -> usize {
        self.neck.param_count() + self.classifier.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> FusionConfig {
        FusionConfig {
            in_channels: [3, 5, 7, 9],
            d: 6,
            attn_hidden: 4,
            projection_bias: true,
        }
    }

    fn tiny_pyramid(rng: &mut ChaCha8Rng, batch: usize, channels: [usize; 4]) -> FeaturePyramid {
        let sizes = [(16, 8), (8, 4), (4, 2), (2, 1)];
        let mk = |rng: &mut ChaCha8Rng, c: usize, (h, w): (usize, usize)| {
            Tensor::from_fn(vec![batch, c, h, w], |_| rng.gen_range(-1.0..1.0))
        };
        FeaturePyramid::new([
            mk(rng, channels[0], sizes[0]),
            mk(rng, channels[1], sizes[1]),
            mk(rng, channels[2], sizes[2]),
            mk(rng, channels[3], sizes[3]),
        ])
        .unwrap()
    }

    #[test]
    fn pyramid_rejects_non_halving_extents() {
        let stages = [
            Tensor::zeros(vec![1, 2, 16, 8]),
            Tensor::zeros(vec![1, 2, 8, 4]),
            Tensor::zeros(vec![1, 2, 4, 2]),
            Tensor::zeros(vec![1, 2, 3, 1]),
        ];
        assert!(FeaturePyramid::new(stages).is_err());
    }

    #[test]
    fn projection_zero_input_zero_output_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stages = || {
            FeaturePyramid::new([
                Tensor::zeros(vec![2, 3, 16, 8]),
                Tensor::zeros(vec![2, 5, 8, 4]),
                Tensor::zeros(vec![2, 7, 4, 2]),
                Tensor::zeros(vec![2, 9, 2, 1]),
            ])
            .unwrap()
        };
        // Without a projection bias the zero map normalizes to beta = 0 exactly.
        let cfg = FusionConfig {
            projection_bias: false,
            ..tiny_cfg()
        };
        let params = FusionParams::new(cfg, &mut rng);
        let mut tape = Tape::new();
        let vals = stages().register(&mut tape);
        let mut b = Binder::new(&mut tape);
        let (proj, _) = params.project_scales(&mut b, vals, Mode::Train).unwrap();
        for p in proj {
            assert!(tape.data(p).iter().all(|&v| v == 0.0));
        }
        // With a bias the channel is constant, so BN still collapses it to
        // beta = 0, up to the rounding of the batch mean.
        let params = FusionParams::new(tiny_cfg(), &mut rng);
        let mut tape = Tape::new();
        let vals = stages().register(&mut tape);
        let mut b = Binder::new(&mut tape);
        let (proj, _) = params.project_scales(&mut b, vals, Mode::Train).unwrap();
        for p in proj {
            assert!(tape.data(p).iter().all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn projection_identity_stats_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = FusionConfig {
            in_channels: [3, 3, 3, 3],
            d: 3,
            attn_hidden: 2,
            projection_bias: false,
        };
        let mut params = FusionParams::new(cfg, &mut rng);
        for conv in &mut params.proj {
            let d = conv.w.shape()[0];
            conv.w = Tensor::from_fn(vec![d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
        }
        let pyr = tiny_pyramid(&mut rng, 2, [3, 3, 3, 3]);
        let mut tape = Tape::new();
        let vals = pyr.register(&mut tape);
        let mut b = Binder::new(&mut tape);
        let (proj, _) = params.project_scales(&mut b, vals, Mode::Eval).unwrap();
        let scale = 1.0 / (1.0 + params.proj_bn[0].stats.eps).sqrt();
        for (p, stage) in proj.iter().zip(pyr.stages()) {
            for (got, x) in tape.data(*p).iter().zip(stage.data()) {
                assert!((got - (x * scale).max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn projection_common_width_all_stages() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = tiny_cfg();
        let params = FusionParams::new(cfg.clone(), &mut rng);
        let pyr = tiny_pyramid(&mut rng, 2, cfg.in_channels);
        let mut tape = Tape::new();
        let vals = pyr.register(&mut tape);
        let mut b = Binder::new(&mut tape);
        let (proj, _) = params.project_scales(&mut b, vals, Mode::Train).unwrap();
        for (p, stage) in proj.iter().zip(pyr.stages()) {
            let s = tape.shape(*p);
            assert_eq!(s[1], cfg.d);
            assert_eq!(&s[2..], &stage.shape()[2..]);
        }
    }

    #[test]
    fn projection_channel_mismatch_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = FusionParams::new(tiny_cfg(), &mut rng);
        let pyr = tiny_pyramid(&mut rng, 2, [4, 5, 7, 9]);
        let mut tape = Tape::new();
        let vals = pyr.register(&mut tape);
        let mut b = Binder::new(&mut tape);
        assert!(params.project_scales(&mut b, vals, Mode::Train).is_err());
    }

    #[test]
    fn alignment_targets_last_stage_and_passes_it_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = tiny_cfg();
        let params = FusionParams::new(cfg.clone(), &mut rng);
        let pyr = tiny_pyramid(&mut rng, 2, cfg.in_channels);
        let mut tape = Tape::new();
        let vals = pyr.register(&mut tape);
        let mut b = Binder::new(&mut tape);
        let (proj, _) = params.project_scales(&mut b, vals, Mode::Train).unwrap();
        let last = tape.data(proj[3]).to_vec();
        let aligned = align_scales(&mut tape, proj).unwrap();
        for a in aligned {
            assert_eq!(&tape.shape(a)[2..], &[2, 1]);
        }
        assert_eq!(tape.data(aligned[3]), &last[..]);
    }

    #[test]
    fn alignment_preserves_constant_maps() {
        let mut tape = Tape::new();
        let maps = [
            tape.constant(Tensor::full(vec![1, 2, 16, 8], 1.5)),
            tape.constant(Tensor::full(vec![1, 2, 8, 4], -0.5)),
            tape.constant(Tensor::full(vec![1, 2, 4, 2], 3.0)),
            tape.constant(Tensor::full(vec![1, 2, 2, 1], 9.0)),
        ];
        let aligned = align_scales(&mut tape, maps).unwrap();
        for (a, want) in aligned.iter().zip([1.5, -0.5, 3.0, 9.0]) {
            assert!(tape.data(*a).iter().all(|&v| (v - want).abs() < 1e-12));
        }
    }

    #[test]
    fn attention_zero_params_give_half_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = tiny_cfg();
        let mut params = FusionParams::new(cfg.clone(), &mut rng);
        params.attn1.w = Tensor::zeros(params.attn1.w.shape().to_vec());
        params.attn1.bias = Some(Tensor::zeros(vec![cfg.attn_hidden]));
        params.attn2.w = Tensor::zeros(params.attn2.w.shape().to_vec());
        params.attn2.bias = Some(Tensor::zeros(vec![4]));
        let maps = aligned_fixture(&mut rng, &cfg);
        let mut tape = Tape::new();
        let vals = register4(&mut tape, &maps);
        let mut b = Binder::new(&mut tape);
        let w = params.scale_attention(&mut b, vals).unwrap();
        for row in w.rows(&tape) {
            for g in row {
                assert_eq!(g, 0.5);
            }
        }
    }

    fn aligned_fixture(rng: &mut ChaCha8Rng, cfg: &FusionConfig) -> [Tensor; 4] {
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::from_fn(vec![2, cfg.d, 2, 1], |_| rng.gen_range(-1.0..1.0))
        };
        [mk(rng), mk(rng), mk(rng), mk(rng)]
    }

    fn register4(tape: &mut Tape, maps: &[Tensor; 4]) -> [Value; 4] {
        [
            tape.constant(maps[0].clone()),
            tape.constant(maps[1].clone()),
            tape.constant(maps[2].clone()),
            tape.constant(maps[3].clone()),
        ]
    }

    #[test]
    fn attention_gates_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = tiny_cfg();
        let params = FusionParams::new(cfg.clone(), &mut rng);
        let maps = aligned_fixture(&mut rng, &cfg);
        let mut tape = Tape::new();
        let vals = register4(&mut tape, &maps);
        let mut b = Binder::new(&mut tape);
        let w = params.scale_attention(&mut b, vals).unwrap();
        for row in w.rows(&tape) {
            for g in row {
                assert!(g > 0.0 && g < 1.0);
            }
        }
    }

    #[test]
    fn attention_invariant_to_permuting_identical_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = tiny_cfg();
        let params = FusionParams::new(cfg.clone(), &mut rng);
        let m = Tensor::from_fn(vec![2, cfg.d, 2, 1], |_| rng.gen_range(-1.0..1.0));
        let run = |order: [usize; 4]| {
            let mut tape = Tape::new();
            let vals: Vec<Value> = order.iter().map(|_| tape.constant(m.clone())).collect();
            let mut b = Binder::new(&mut tape);
            let w = params
                .scale_attention(&mut b, [vals[0], vals[1], vals[2], vals[3]])
                .unwrap();
            w.rows(&tape)
        };
        assert_eq!(run([0, 1, 2, 3]), run([2, 0, 3, 1]));
    }

    #[test]
    fn attention_wrong_gate_count_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = tiny_cfg();
        let mut params = FusionParams::new(cfg.clone(), &mut rng);
        params.attn2 = AffineLayer::new(&mut rng, cfg.attn_hidden, 3, true);
        let maps = aligned_fixture(&mut rng, &cfg);
        let mut tape = Tape::new();
        let vals = register4(&mut tape, &maps);
        let mut b = Binder::new(&mut tape);
        assert!(params.scale_attention(&mut b, vals).is_err());
    }

    #[test]
    fn fuse_selector_and_doubling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = Tensor::from_fn(vec![1, 3, 2, 2], |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let vals = register4(&mut tape, &[m.clone(), m.clone(), m.clone(), m.clone()]);
        let selector = AttentionWeights::from_constant(&mut tape, &[[1.0, 0.0, 0.0, 0.0]]).unwrap();
        let fused = fuse(&mut tape, vals, &selector).unwrap();
        assert_eq!(tape.data(fused), m.data());

        let halves = AttentionWeights::from_constant(&mut tape, &[[0.5; 4]]).unwrap();
        let doubled = fuse(&mut tape, vals, &halves).unwrap();
        for (got, x) in tape.data(doubled).iter().zip(m.data()) {
            assert!((got - 2.0 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_is_linear_in_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mk =
            |rng: &mut ChaCha8Rng| Tensor::from_fn(vec![1, 2, 2, 2], |_| rng.gen_range(-1.0..1.0));
        let a: [Tensor; 4] = [mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng)];
        let b_: [Tensor; 4] = [mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng)];
        let w_rows = [[0.3, 0.9, 0.1, 0.7]];
        let mut tape = Tape::new();
        let av = register4(&mut tape, &a);
        let bv = register4(&mut tape, &b_);
        let sums = [
            tape.add(av[0], bv[0]).unwrap(),
            tape.add(av[1], bv[1]).unwrap(),
            tape.add(av[2], bv[2]).unwrap(),
            tape.add(av[3], bv[3]).unwrap(),
        ];
        let w = AttentionWeights::from_constant(&mut tape, &w_rows).unwrap();
        let lhs = fuse(&mut tape, sums, &w).unwrap();
        let fa = fuse(&mut tape, av, &w).unwrap();
        let fb = fuse(&mut tape, bv, &w).unwrap();
        let rhs = tape.add(fa, fb).unwrap();
        for (x, y) in tape.data(lhs).iter().zip(tape.data(rhs)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn head_constant_map_constant_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let head = IdentityHead::new(3, 5, &mut rng);
        let mut tape = Tape::new();
        let fused = tape.constant(Tensor::from_fn(vec![2, 3, 2, 2], |i| (i / 4) as f64));
        let mut b = Binder::new(&mut tape);
        let (emb, logits, _) = head.forward(&mut b, fused, Mode::Eval).unwrap();
        assert_eq!(tape.shape(emb), &[2, 3]);
        assert_eq!(tape.shape(logits), &[2, 5]);
        // GAP of a per-channel-constant map keeps the per-channel value.
        let e = tape.data(emb);
        let scale = 1.0 / (1.0 + head.neck.stats.eps).sqrt();
        for bi in 0..2 {
            for c in 0..3 {
                let want = (bi * 3 + c) as f64 * scale;
                assert!((e[bi * 3 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_logits_linear_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let head = IdentityHead::new(4, 6, &mut rng);
        let base = Tensor::from_fn(vec![2, 4, 2, 1], |_| rng.gen_range(-1.0..1.0));
        let scaled = Tensor::new(
            base.shape().to_vec(),
            base.data().iter().map(|v| 3.0 * v).collect(),
        )
        .unwrap();
        let run = |t: &Tensor| {
            let mut tape = Tape::new();
            let fused = tape.constant(t.clone());
            let mut b = Binder::new(&mut tape);
            let (_, logits, _) = head.forward(&mut b, fused, Mode::Eval).unwrap();
            tape.data(logits).to_vec()
        };
        let l1 = run(&base);
        let l3 = run(&scaled);
        for (a, b_) in l1.iter().zip(&l3) {
            assert!((3.0 * a - b_).abs() < 1e-9);
        }
    }

    #[test]
    fn head_rejects_classifier_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut head = IdentityHead::new(3, 5, &mut rng);
        head.classifier.bias = Some(Tensor::zeros(vec![5]));
        assert!(head.validate().is_err());
        let mut tape = Tape::new();
        let fused = tape.constant(Tensor::zeros(vec![2, 3, 2, 2]));
        let mut b = Binder::new(&mut tape);
        assert!(head.forward(&mut b, fused, Mode::Eval).is_err());
    }

    #[test]
    fn default_layout_parameter_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let params = FusionParams::new(FusionConfig::default(), &mut rng);
        // 4 projections (with bias) + 4 BN pairs + D->512 + 512->4 MLP.
        assert_eq!(params.param_count(), 8_940_036);
        let head = IdentityHead::new(2048, 751, &mut rng);
        assert_eq!(head.param_count(), 4_096 + 1_538_048);
    }
}
