//! End-to-end training demonstration at desk scale: a tiny convolutional
//! stem builds a four-level pyramid from small synthetic images, and
//! fusion plus both heads train jointly under the dynamically weighted
//! three-task objective with identity-balanced batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalkit::{
    cmc_map, distance_matrix, l2_normalize, EmbeddingSet, EvalError, RankingReport, RowMeta,
};
use crate::fusion::{align_scales, fuse, FusionConfig, FusionParams, IdentityHead};
use crate::gradcheck::HasParams;
use crate::losses::{ce_label_smoothing, fidi_loss, semantic_loss, FidiConfig};
use crate::nn::{collect_grads, sgd_step, Binder, BnLayer, Conv1x1Layer};
use crate::sampling::{DatasetManifest, ManifestRecord, PkSampler, SamplingError, Split};
use crate::schedule::{weighted_total, DwaConfig, DwaState};
use crate::semantics::{pseudo_labels, PseudoLabelMap, SemanticHead};
use crate::tape::{BnStats, Mode, Tape, Value};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("training diverged at step {step}; last finite total {last_good}")]
    Diverged { step: usize, last_good: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("demo config: {0}")]
    Config(String),
}

/// Synthetic dataset layout: per identity, three horizontal color bands
/// (boundaries at 40% and 80% of the height, matching the semantic
/// partition) plus per-image brightness wobble and Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub identities: usize,
    pub images_per_identity: usize,
    pub height: usize,
    pub width: usize,
    pub cameras: i64,
    /// Held-out images per identity (taken from the tail).
    pub eval_per_identity: usize,
    /// Of the held-out images, how many become queries; the rest gallery.
    pub queries_per_identity: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            identities: 20,
            images_per_identity: 30,
            height: 64,
            width: 32,
            cameras: 4,
            eval_per_identity: 6,
            queries_per_identity: 2,
            noise: 0.05,
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DemoError> {
        if self.identities < 2 {
            return Err(DemoError::Config("need at least 2 identities".into()));
        }
        if self.eval_per_identity >= self.images_per_identity {
            return Err(DemoError::Config(
                "eval images per identity must leave training images".into(),
            ));
        }
        if self.queries_per_identity == 0 || self.queries_per_identity >= self.eval_per_identity {
            return Err(DemoError::Config(
                "queries per identity must be in 1..eval_per_identity".into(),
            ));
        }
        if self.cameras < 2 {
            return Err(DemoError::Config("need at least 2 cameras".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(DemoError::Config("image extents must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub images: Vec<Tensor>,
    pub manifest: DatasetManifest,
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset, DemoError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("positive sigma");
    let (h, w) = (cfg.height, cfg.width);
    let mut images = Vec::new();
    let mut records = Vec::new();
    let train_count = cfg.images_per_identity - cfg.eval_per_identity;
    for pid in 0..cfg.identities as i64 {
        let bands: [[f64; 3]; 3] =
            std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(0.2..1.0)));
        for img in 0..cfg.images_per_identity {
            let camid = img as i64 % cfg.cameras;
            let brightness = rng.gen_range(0.85..1.15);
            let mut data = vec![0.0; 3 * h * w];
            for y in 0..h {
                let band = match y as f64 / h as f64 {
                    t if t < 0.4 => 0,
                    t if t < 0.8 => 1,
                    _ => 2,
                };
                for x in 0..w {
                    for c in 0..3 {
                        data[c * h * w + y * w + x] =
                            bands[band][c] * brightness + noise.sample(&mut rng);
                    }
                }
            }
            images.push(Tensor::new(vec![3, h, w], data)?);
            let split = if img < train_count {
                Split::Train
            } else if img < train_count + cfg.queries_per_identity {
                Split::Query
            } else {
                Split::Gallery
            };
            records.push(ManifestRecord {
                path: format!("synthetic/{pid:04}_c{camid}_{img:02}"),
                pid,
                camid,
                split,
            });
        }
    }
    Ok(SyntheticDataset {
        images,
        manifest: DatasetManifest::from_records(records)?,
    })
}

/// Stacks dataset images (each [3,H,W]) into one [B,3,H,W] batch.
pub fn batch_tensor(dataset: &SyntheticDataset, indices: &[usize]) -> Result<Tensor, TensorError> {
    if indices.is_empty() {
        return Err(TensorError::arg("batch_tensor", "empty index list"));
    }
    let shape = dataset.images[indices[0]].shape().to_vec();
    let mut data = Vec::with_capacity(indices.len() * dataset.images[indices[0]].numel());
    for &i in indices {
        if dataset.images[i].shape() != shape.as_slice() {
            return Err(TensorError::dim(
                "batch_tensor",
                format!("{shape:?}"),
                format!("{:?}", dataset.images[i].shape()),
            ));
        }
        data.extend_from_slice(dataset.images[i].data());
    }
    Tensor::new(vec![indices.len(), shape[0], shape[1], shape[2]], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoNetConfig {
    /// Average-pool factor in front of each stem stage.
    pub pools: [usize; 4],
    pub stem_channels: [usize; 4],
    /// Common channel width after projection.
    pub d: usize,
    pub attn_hidden: usize,
    pub sem_hidden: (usize, usize),
    pub classes: usize,
}

impl Default for DemoNetConfig {
    fn default() -> Self {
        DemoNetConfig {
            pools: [4, 2, 2, 2],
            stem_channels: [8, 12, 16, 24],
            d: 48,
            attn_hidden: 16,
            sem_hidden: (32, 16),
            classes: 20,
        }
    }
}

#[derive(Debug, Clone)]
struct StemStage {
    conv: Conv1x1Layer,
    bn: BnLayer,
    pool: usize,
}

/// Pyramid stem + fusion + identity head + semantic head.
#[derive(Debug, Clone)]
pub struct DemoNet {
    stem: Vec<StemStage>,
    fusion: FusionParams,
    head: IdentityHead,
    sem: SemanticHead,
}

/// Batch-statistic advances gathered during one training forward; commit
/// them only when the step is actually taken.
#[derive(Debug, Clone)]
pub struct DemoStats {
    stem: Vec<BnStats>,
    fusion: Vec<BnStats>,
    head: BnStats,
    sem: Vec<BnStats>,
}

#[derive(Debug)]
pub struct DemoForward {
    pub bindings: Vec<(String, Value)>,
    pub embedding: Value,
    pub logits: Value,
    pub sem_logits: Value,
    /// Detached fused map, input to the pseudo-label rules.
    pub fused_host: Tensor,
    pub attention_rows: Vec<[f64; 4]>,
    pub stats: DemoStats,
}

impl DemoNet {
    pub fn new(cfg: &DemoNetConfig, rng: &mut impl Rng) -> Self {
        let mut stem = Vec::with_capacity(4);
        let mut c_in = 3;
        for i in 0..4 {
            let c_out = cfg.stem_channels[i];
            stem.push(StemStage {
                conv: Conv1x1Layer::new(rng, c_in, c_out, true),
                bn: BnLayer::new(c_out),
                pool: cfg.pools[i],
            });
            c_in = c_out;
        }
        let fusion = FusionParams::new(
            FusionConfig {
                in_channels: cfg.stem_channels,
                d: cfg.d,
                attn_hidden: cfg.attn_hidden,
                projection_bias: true,
            },
            rng,
        );
        let head = IdentityHead::new(cfg.d, cfg.classes, rng);
        let sem = SemanticHead::new(rng, cfg.d, cfg.sem_hidden.0, cfg.sem_hidden.1);
        DemoNet {
            stem,
            fusion,
            head,
            sem,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        mode: Mode,
        dropout_rng: &mut impl Rng,
    ) -> Result<DemoForward, TensorError> {
        let mut b = Binder::new(tape);
        let mut x = b.tape.constant(images.clone());
        let mut stages = Vec::with_capacity(4);
        let mut stem_stats = Vec::with_capacity(4);
        for (i, stage) in self.stem.iter().enumerate() {
            x = b.tape.avg_pool(x, stage.pool)?;
            let c = stage.conv.forward(&mut b, &format!("stem{i}.conv"), x)?;
            let (n, st) = stage.bn.forward(&mut b, &format!("stem{i}.bn"), c, mode)?;
            x = b.tape.relu(n);
            stages.push(x);
            stem_stats.push(st);
        }
        let pyramid = [stages[0], stages[1], stages[2], stages[3]];
        let (projected, fusion_stats) = self.fusion.project_scales(&mut b, pyramid, mode)?;
        let aligned = align_scales(b.tape, projected)?;
        let attn = self.fusion.scale_attention(&mut b, aligned)?;
        let fused = fuse(b.tape, aligned, &attn)?;
        let attention_rows = attn.rows(b.tape);
        let fused_host = b.tape.tensor(fused).clone();
        let (embedding, logits, head_stats) = self.head.forward(&mut b, fused, mode)?;
        let (sem_logits, sem_stats) = self.sem.forward(&mut b, fused, mode, dropout_rng)?;
        Ok(DemoForward {
            bindings: b.into_bindings(),
            embedding,
            logits,
            sem_logits,
            fused_host,
            attention_rows,
            stats: DemoStats {
                stem: stem_stats,
                fusion: fusion_stats,
                head: head_stats,
                sem: sem_stats,
            },
        })
    }

    pub fn commit_stats(&mut self, stats: DemoStats) {
        for (stage, st) in self.stem.iter_mut().zip(stats.stem) {
            stage.bn.commit(st);
        }
        self.fusion.commit_bn(stats.fusion);
        self.head.neck.commit(stats.head);
        self.sem.commit_bn(stats.sem);
    }

    pub fn param_count(&self) -> usize {
        self.stem
            .iter()
            .map(|s| s.conv.param_count() + s.bn.param_count())
            .sum::<usize>()
            + self.fusion.param_count()
            + self.head.param_count()
            + self.sem.param_count()
    }
}

impl HasParams for DemoNet {
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, stage) in self.stem.iter_mut().enumerate() {
            out.extend(stage.conv.params_mut(&format!("stem{i}.conv")));
            out.extend(stage.bn.params_mut(&format!("stem{i}.bn")));
        }
        out.extend(self.fusion.params_mut());
        out.extend(self.head.params_mut());
        out.extend(self.sem.params_mut());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub data: SyntheticConfig,
    pub net: DemoNetConfig,
    pub fidi: FidiConfig,
    pub dwa: DwaConfig,
    pub p: usize,
    pub k: usize,
    pub steps: usize,
    pub lr: f64,
    pub smoothing: f64,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            data: SyntheticConfig::default(),
            net: DemoNetConfig::default(),
            fidi: FidiConfig::default(),
            dwa: DwaConfig::default(),
            p: 8,
            k: 12,
            steps: 300,
            lr: 0.05,
            smoothing: 0.1,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DemoReport {
    pub steps: usize,
    pub totals: Vec<f64>,
    pub loss_at_10: f64,
    pub loss_at_end: f64,
    pub max_weight_sum_err: f64,
    pub attention_min: f64,
    pub attention_max: f64,
    pub ranking: RankingReport,
    pub log: Vec<String>,
}

impl DemoReport {
    pub fn attention_in_bounds(&self) -> bool {
        self.attention_min > 0.0 && self.attention_max < 1.0
    }

    pub fn render_summary(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("steps={}\n", self.steps));
        out.push_str(&format!("loss_step10={:.6}\n", self.loss_at_10));
        out.push_str(&format!("loss_final={:.6}\n", self.loss_at_end));
        out.push_str(&format!("weight_sum_err={:.3e}\n", self.max_weight_sum_err));
        out.push_str(&format!(
            "attention_range=({:.6},{:.6})\n",
            self.attention_min, self.attention_max
        ));
        out.push_str(&self.ranking.render_rows());
        out
    }
}

/// Embedding matrix plus aligned metadata for one evaluation split.
#[derive(Debug, Clone)]
pub struct SplitEmbeddings {
    pub data: Vec<f64>,
    pub n: usize,
    pub dim: usize,
    pub meta: Vec<RowMeta>,
}

#[derive(Debug, Clone)]
pub struct DemoArtifacts {
    pub query: SplitEmbeddings,
    pub gallery: SplitEmbeddings,
    pub manifest: DatasetManifest,
}

fn embed_split(
    net: &DemoNet,
    dataset: &SyntheticDataset,
    indices: &[usize],
) -> Result<SplitEmbeddings, DemoError> {
    let mut data = Vec::new();
    let mut dim = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(0); // eval path draws nothing
    for chunk in indices.chunks(96) {
        let batch = batch_tensor(dataset, chunk)?;
        let mut tape = Tape::new();
        let fwd = net.forward(&mut tape, &batch, Mode::Eval, &mut rng)?;
        let emb = tape.tensor(fwd.embedding);
        dim = emb.shape()[1];
        data.extend_from_slice(emb.data());
    }
    let meta = indices
        .iter()
        .map(|&i| {
            let r = &dataset.manifest.records()[i];
            RowMeta {
                pid: r.pid,
                camid: r.camid,
            }
        })
        .collect::<Vec<_>>();
    Ok(SplitEmbeddings {
        data,
        n: indices.len(),
        dim,
        meta,
    })
}

/// Retrieval evaluation of a trained net on the held-out splits.
pub fn evaluate_demo(
    net: &DemoNet,
    dataset: &SyntheticDataset,
) -> Result<(RankingReport, DemoArtifacts), DemoError> {
    let q_idx = dataset.manifest.split_indices(Split::Query);
    let g_idx = dataset.manifest.split_indices(Split::Gallery);
    if q_idx.is_empty() || g_idx.is_empty() {
        return Err(DemoError::Config(
            "dataset lacks query or gallery split".into(),
        ));
    }
    let query = embed_split(net, dataset, &q_idx)?;
    let gallery = embed_split(net, dataset, &g_idx)?;
    let manifest = dataset.manifest.clone();
    let qset = l2_normalize(&EmbeddingSet::new(
        query.data.clone(),
        query.dim,
        query.meta.clone(),
    )?)?;
    let gset = l2_normalize(&EmbeddingSet::new(
        gallery.data.clone(),
        gallery.dim,
        gallery.meta.clone(),
    )?)?;
    let dist = distance_matrix(&qset, &gset)?;
    let report = cmc_map(&dist, qset.meta(), gset.meta())?;
    Ok((
        report,
        DemoArtifacts {
            query,
            gallery,
            manifest,
        },
    ))
}

/// Trains the demo net and evaluates retrieval on the held-out split.
/// Non-finite losses abort with the last finite total.
pub fn run_demo(cfg: &DemoConfig) -> Result<(DemoReport, DemoArtifacts), DemoError> {
    cfg.data.validate()?;
    if cfg.net.classes != cfg.data.identities {
        return Err(DemoError::Config(format!(
            "classifier has {} classes but the dataset has {} identities",
            cfg.net.classes, cfg.data.identities
        )));
    }
    if cfg.steps == 0 {
        return Err(DemoError::Config("need at least one step".into()));
    }
    let dataset = generate_synthetic(&cfg.data)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = DemoNet::new(&cfg.net, &mut init_rng);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut sampler = PkSampler::new(&dataset.manifest, cfg.p, cfg.k, cfg.seed)?;
    let mut dwa = DwaState::new(cfg.dwa.clone())?;

    // Identity -> classifier index over the train split.
    let classes: Vec<i64> = dataset
        .manifest
        .identities(Split::Train)
        .into_keys()
        .collect();
    let class_of = |pid: i64| -> usize {
        classes.binary_search(&pid).expect("train pid") // keys are sorted
    };

    let mut queue: Vec<_> = Vec::new();
    let mut totals = Vec::with_capacity(cfg.steps);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut max_weight_sum_err: f64 = 0.0;
    let mut attention_min = f64::INFINITY;
    let mut attention_max = f64::NEG_INFINITY;
    let mut last_good = f64::NAN;

    for step in 1..=cfg.steps {
        if queue.is_empty() {
            queue = sampler.epoch();
            queue.reverse(); // pop from the back keeps epoch order
        }
        let batch_spec = queue.pop().expect("epoch is never empty");
        let batch = batch_tensor(&dataset, &batch_spec.indices)?;
        let pids = batch_spec.pids(&dataset.manifest);
        let targets: Vec<usize> = pids.iter().map(|&p| class_of(p)).collect();

        let mut tape = Tape::new();
        let fwd = net.forward(&mut tape, &batch, Mode::Train, &mut dropout_rng)?;
        let labels = pseudo_labels(&fwd.fused_host)?;
        let id_loss = ce_label_smoothing(&mut tape, fwd.logits, &targets, cfg.smoothing)?;
        let pair = fidi_loss(&mut tape, fwd.embedding, &pids, &cfg.fidi)?;
        let sem = semantic_loss(&mut tape, fwd.sem_logits, &labels)?;

        let losses = [
            tape.tensor(id_loss).item(),
            tape.tensor(pair.value).item(),
            tape.tensor(sem).item(),
        ];
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(DemoError::Diverged { step, last_good });
        }
        let weights = dwa.update(losses)?;
        let sum_err = (weights.iter().sum::<f64>() - 1.0).abs();
        max_weight_sum_err = max_weight_sum_err.max(sum_err);

        for row in &fwd.attention_rows {
            for &g in row {
                attention_min = attention_min.min(g);
                attention_max = attention_max.max(g);
            }
        }

        let total = weighted_total(&mut tape, [id_loss, pair.value, sem], weights)?;
        let total_v = tape.tensor(total).item();
        if !total_v.is_finite() {
            return Err(DemoError::Diverged { step, last_good });
        }
        last_good = total_v;
        totals.push(total_v);
        log.push(dwa.log_row(step, losses));

        tape.backward(total)?;
        let grads = collect_grads(&tape, &fwd.bindings);
        sgd_step(net.params_mut(), &grads, cfg.lr)?;
        net.commit_stats(fwd.stats);
    }

    let (ranking, artifacts) = evaluate_demo(&net, &dataset)?;
    let report = DemoReport {
        steps: cfg.steps,
        loss_at_10: totals[(10.min(cfg.steps)) - 1],
        loss_at_end: *totals.last().expect("at least one step"),
        totals,
        max_weight_sum_err,
        attention_min,
        attention_max,
        ranking,
        log,
    };
    Ok((report, artifacts))
}

/// Frozen tiny instance for finite-difference checking of the composed
/// model and all three losses. Targets, pair identities, pseudo-labels,
/// task weights, and dropout draws stay fixed across probe evaluations, so
/// the objective is a smooth function of the parameters alone.
#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub net: DemoNet,
    pub batch: Tensor,
    pub targets: Vec<usize>,
    pub pids: Vec<i64>,
    pub labels: PseudoLabelMap,
    pub weights: [f64; 3],
    pub fidi: FidiConfig,
    pub smoothing: f64,
    pub mask_seed: u64,
}

impl HasParams for GradCheckInstance {
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.net.params_mut()
    }
}

/// Forward pass used by the gradient checker; rebuilt on a fresh tape for
/// every probe.
pub fn instance_forward(
    state: &GradCheckInstance,
    tape: &mut Tape,
) -> Result<(Value, Vec<(String, Value)>), TensorError> {
    let mut mask_rng = ChaCha8Rng::seed_from_u64(state.mask_seed);
    let fwd = state
        .net
        .forward(tape, &state.batch, Mode::Train, &mut mask_rng)?;
    let id_loss = ce_label_smoothing(tape, fwd.logits, &state.targets, state.smoothing)?;
    let pair = fidi_loss(tape, fwd.embedding, &state.pids, &state.fidi)?;
    let sem = semantic_loss(tape, fwd.sem_logits, &state.labels)?;
    let total = weighted_total(tape, [id_loss, pair.value, sem], state.weights)?;
    Ok((total, fwd.bindings))
}

/// Seeded random instance: 6 images of 32x16, three identities, the demo
/// architecture shrunk to a few channels per stage.
pub fn grad_check_instance(seed: u64) -> Result<GradCheckInstance, DemoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net_cfg = DemoNetConfig {
        pools: [2, 2, 2, 2],
        stem_channels: [4, 5, 6, 7],
        d: 12,
        attn_hidden: 5,
        sem_hidden: (6, 5),
        classes: 3,
    };
    let net = DemoNet::new(&net_cfg, &mut rng);
    let batch = Tensor::from_fn(vec![6, 3, 32, 16], |_| rng.gen_range(-1.0..1.0));
    let pids: Vec<i64> = vec![0, 0, 1, 1, 2, 2];
    let targets: Vec<usize> = pids.iter().map(|&p| p as usize).collect();

    // Pseudo-labels frozen from the initial fused map.
    let mut tape = Tape::new();
    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let fwd = net.forward(&mut tape, &batch, Mode::Train, &mut mask_rng)?;
    let labels = pseudo_labels(&fwd.fused_host)?;

    Ok(GradCheckInstance {
        net,
        batch,
        targets,
        pids,
        labels,
        weights: [1.0 / 3.0; 3],
        fidi: FidiConfig::default(),
        smoothing: 0.1,
        mask_seed: seed ^ 0x5eed,
    })
}
