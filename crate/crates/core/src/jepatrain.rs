//! Latent-prediction pretraining with an EMA target encoder, and supervised
//! fine-tuning of the pooled backbone plus grasp head.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::GraspSample;
use crate::encoder::{
    attention_pool, encode, encode_object, init_backbone, init_pool, init_predictor, predict_targets, tau_at, tokenize,
    EmaPair, EncoderConfig, ENCODER, POOL, PREDICTOR, TOKENIZER,
};
use crate::grasphead::{
    head_forward, hypothesis_sets, init_head, squared_error_loss, wta_loss, HeadConfig, HypothesisSet, HEAD,
    NUM_JOINTS, POSE_DIM,
};
use crate::metrics::{evaluate, CoverageNorm, EvalReport};
use crate::pointops::{make_patches, Point, PointCloud, TokenizerConfig};
use crate::sequencing::{sample_mask, sequence_centers, MaskConfig, MaskPlan};
use crate::tensorcore::{Adam, AdamConfig, GradStore, Graph, ParamGroup, ParamStore, Tensor, TensorError, Var};
use crate::{rng, Error};

/// One object as the encoder sees it: sequenced patches and their centers.
#[derive(Clone, Debug)]
pub struct ObjectTokens {
    pub object_id: String,
    /// Center-relative member coordinates, `(G*S) x 3`, patches in sequence order.
    pub rel: Tensor<f32>,
    /// Patch centers in sequence order.
    pub positions: Vec<Point>,
    pub group_size: usize,
}

impl ObjectTokens {
    pub fn num_tokens(&self) -> usize {
        self.positions.len()
    }

    /// Member coordinates of the patches at sequence positions `idx`.
    fn rel_rows(&self, idx: &[usize]) -> Tensor<f32> {
        let s = self.group_size;
        let mut data = Vec::with_capacity(idx.len() * s * 3);
        for &i in idx {
            data.extend_from_slice(&self.rel.data()[i * s * 3..(i + 1) * s * 3]);
        }
        Tensor::new(&[idx.len() * s, 3], data).expect("patch rows")
    }
}

pub fn prepare_object(cloud: &PointCloud, cfg: &TokenizerConfig) -> Result<ObjectTokens, Error> {
    let patches = make_patches(cloud, cfg)?;
    let centers = patches.center_points(cloud);
    let order = sequence_centers(&centers);
    Ok(ObjectTokens {
        object_id: cloud.object_id.clone(),
        rel: patches.relative_coords(cloud, &order),
        positions: order.iter().map(|&i| centers[i]).collect(),
        group_size: cfg.group_size,
    })
}

pub fn prepare_objects(clouds: &[PointCloud], cfg: &TokenizerConfig) -> Result<Vec<ObjectTokens>, Error> {
    clouds.par_iter().map(|c| prepare_object(c, cfg)).collect()
}

/// One line of the training metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRecord {
    pub const CSV_HEADER: &'static str = "step,split,metric,value";

    fn new(step: usize, split: &str, metric: &str, value: f64) -> Self {
        Self { step, split: split.into(), metric: metric.into(), value }
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.split, self.metric, self.value)
    }
}

pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut out = format!("{}\n", MetricRecord::CSV_HEADER);
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Multiplier on the base learning rates at `step` of `steps`.
pub fn lr_scale(cosine: bool, step: usize, steps: usize) -> f64 {
    if !cosine || steps <= 1 {
        return 1.0;
    }
    0.5 * (1.0 + (PI * step as f64 / steps as f64).cos())
}

fn sample_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut v = index::sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

fn numeric(e: TensorError) -> Error {
    Error::from(e)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentLoss {
    SmoothL1,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub mask: MaskConfig,
    pub loss: LatentLoss,
    pub smooth_l1_beta: f64,
    /// Layer-normalize target latents (no affine) before the loss.
    pub target_layernorm: bool,
    pub cosine: bool,
    pub log_every: usize,
    /// Objects in the pooled-embedding collapse probe.
    pub probe_objects: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            lr: 5e-4,
            tau_start: 0.996,
            tau_end: 1.0,
            mask: MaskConfig::default(),
            loss: LatentLoss::SmoothL1,
            smooth_l1_beta: 1.0,
            target_layernorm: false,
            cosine: false,
            log_every: 25,
            probe_objects: 64,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("pretrain steps and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("pretrain lr must be > 0, got {}", self.lr)));
        }
        for t in [self.tau_start, self.tau_end] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("tau {t} outside [0, 1]")));
            }
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Config("smooth_l1_beta must be > 0".into()));
        }
        self.mask.validate()
    }
}

/// Context encoder (tokenizer, encoder, predictor) with its EMA target.
pub fn init_jepa(tok: &TokenizerConfig, enc: &EncoderConfig, seed: u64, tau: f64) -> EmaPair<f32> {
    let mut r = rng::stream(seed, &[rng::tag("jepa-init")]);
    let mut store = ParamStore::new();
    init_backbone(&mut store, tok, enc, &mut r);
    init_predictor(&mut store, enc, &mut r);
    EmaPair::new(store, tau)
}

pub fn pretrain_optimizer(pair: &EmaPair<f32>, lr: f64) -> Result<Adam<f32>, Error> {
    let groups = vec![ParamGroup::new("context", &[TOKENIZER, ENCODER, PREDICTOR], lr)];
    Adam::new(&pair.context, groups, AdamConfig::default()).map_err(numeric)
}

fn standardize<T: crate::tensorcore::Real>(g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
    let d = g.value(x).cols();
    let ones = g.input(Tensor::full(&[d], T::one()));
    let zeros = g.input(Tensor::zeros(&[d]));
    g.layernorm(x, ones, zeros)
}

/// Builds the latent-prediction loss for one object and mask.
///
/// The target encoder sees every token; its output is detached. The context
/// encoder sees only the context tokens and the predictor fills the target slots.
pub fn pretrain_loss_graph(
    g: &mut Graph<f32>,
    pair: &EmaPair<f32>,
    enc: &EncoderConfig,
    cfg: &PretrainConfig,
    obj: &ObjectTokens,
    plan: &MaskPlan,
) -> Result<Var, TensorError> {
    let targets = plan.target_indices();
    let full = encode_object(g, &pair.target, enc, &obj.rel, &obj.positions, obj.group_size)?;
    let full = g.detach(full)?;
    let mut target = g.gather_rows(full, &targets)?;
    if cfg.target_layernorm {
        target = standardize(g, target)?;
    }

    let ctx_pos: Vec<Point> = plan.context_indices.iter().map(|&i| obj.positions[i]).collect();
    let tgt_pos: Vec<Point> = targets.iter().map(|&i| obj.positions[i]).collect();
    let tokens = tokenize(g, &pair.context, &obj.rel_rows(&plan.context_indices), obj.group_size)?;
    let context = encode(g, &pair.context, enc, tokens, &ctx_pos)?;
    let pred = predict_targets(g, &pair.context, enc, context, &ctx_pos, &tgt_pos)?;
    match cfg.loss {
        LatentLoss::SmoothL1 => g.smooth_l1(pred, target, cfg.smooth_l1_beta),
        LatentLoss::Mse => g.mse(pred, target),
    }
}

/// One optimizer step on a batch, then one EMA update at `tau`. Returns the mean loss.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step(
    pair: &mut EmaPair<f32>,
    opt: &mut Adam<f32>,
    enc: &EncoderConfig,
    cfg: &PretrainConfig,
    batch: &[&ObjectTokens],
    tau: f64,
    lr_mult: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, Error> {
    if batch.is_empty() {
        return Err(Error::Config("empty pretraining batch".into()));
    }
    let plans = batch.iter().map(|o| sample_mask(o.num_tokens(), &cfg.mask, rng)).collect::<Result<Vec<_>, _>>()?;
    let weight = 1.0 / batch.len() as f64;
    let shared: &EmaPair<f32> = pair;
    let parts = batch
        .par_iter()
        .zip(&plans)
        .map(|(obj, plan)| {
            let mut g = Graph::new();
            let loss = pretrain_loss_graph(&mut g, shared, enc, cfg, obj, plan)?;
            let value = g.value(loss).item() as f64;
            let scaled = g.scale(loss, weight)?;
            let grads = g.backward(scaled)?;
            let mut acc = GradStore::zeros_like(&shared.context);
            acc.accumulate_graph(&g, &grads, &shared.context);
            Ok((value, acc))
        })
        .collect::<Result<Vec<_>, TensorError>>()
        .map_err(numeric)?;
    let mut total = GradStore::zeros_like(&pair.context);
    let mut loss = 0.0;
    for (v, gs) in &parts {
        loss += v * weight;
        total.merge(gs);
    }
    opt.step_scaled(&mut pair.context, &total, lr_mult).map_err(numeric)?;
    pair.tau = tau;
    pair.update()?;
    Ok(loss)
}

/// Mean-pooled encoder latents for each object, `n x D`.
pub fn pooled_embeddings(
    store: &ParamStore<f32>,
    enc: &EncoderConfig,
    objects: &[&ObjectTokens],
) -> Result<Vec<Vec<f64>>, Error> {
    objects
        .par_iter()
        .map(|o| {
            let mut g = Graph::new();
            let lat = encode_object(&mut g, store, enc, &o.rel, &o.positions, o.group_size)?;
            let m = g.mean_axis(lat, 0)?;
            Ok(g.value(m).data().iter().map(|&v| v as f64).collect())
        })
        .collect::<Result<Vec<_>, TensorError>>()
        .map_err(numeric)
}

/// Per-dimension standard deviation across rows, averaged over dimensions.
pub fn embedding_spread(rows: &[Vec<f64>]) -> f64 {
    if rows.len() < 2 {
        return 0.0;
    }
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mut total = 0.0;
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        total += var.sqrt();
    }
    total / d as f64
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub pair: EmaPair<f32>,
    pub losses: Vec<f64>,
    pub log: Vec<MetricRecord>,
}

/// Runs the full pretraining loop over unlabeled objects.
pub fn pretrain(
    tok: &TokenizerConfig,
    enc: &EncoderConfig,
    cfg: &PretrainConfig,
    objects: &[ObjectTokens],
) -> Result<PretrainOutcome, Error> {
    cfg.validate()?;
    enc.validate()?;
    if objects.is_empty() {
        return Err(Error::Config("no objects to pretrain on".into()));
    }
    let mut pair = init_jepa(tok, enc, cfg.seed, cfg.tau_start);
    let mut opt = pretrain_optimizer(&pair, cfg.lr)?;
    let mut r = rng::stream(cfg.seed, &[rng::tag("pretrain")]);
    let probe: Vec<&ObjectTokens> = objects.iter().take(cfg.probe_objects.max(2)).collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut log = Vec::new();
    let log_every = cfg.log_every.max(1);
    for step in 0..cfg.steps {
        let idx = sample_indices(&mut r, objects.len(), cfg.batch_size);
        let batch: Vec<&ObjectTokens> = idx.iter().map(|&i| &objects[i]).collect();
        let tau = tau_at(cfg.tau_start, cfg.tau_end, step, cfg.steps);
        let loss =
            pretrain_step(&mut pair, &mut opt, enc, cfg, &batch, tau, lr_scale(cfg.cosine, step, cfg.steps), &mut r)?;
        losses.push(loss);
        if step % log_every == 0 || step + 1 == cfg.steps {
            let spread = embedding_spread(&pooled_embeddings(&pair.context, enc, &probe)?);
            log.push(MetricRecord::new(step, "train", "jepa_loss", loss));
            log.push(MetricRecord::new(step, "probe", "embedding_std", spread));
            log.push(MetricRecord::new(step, "train", "tau", tau));
        }
    }
    Ok(PretrainOutcome { pair, losses, log })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub lr_backbone: f64,
    pub lr_head: f64,
    /// Backbone learning rate used instead of `lr_backbone` for a randomly initialized backbone.
    pub scratch_lr_backbone: Option<f64>,
    pub steps: usize,
    pub objects_per_batch: usize,
    pub grasps_per_object: usize,
    pub head: HeadConfig,
    pub freeze_backbone: bool,
    pub freeze_tokenizer: bool,
    pub cosine: bool,
    /// Validation interval in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-5,
            lr_head: 1e-3,
            scratch_lr_backbone: None,
            steps: 800,
            objects_per_batch: 8,
            grasps_per_object: 8,
            head: HeadConfig::default(),
            freeze_backbone: false,
            freeze_tokenizer: false,
            cosine: false,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), Error> {
        for (name, lr) in [("lr_backbone", self.lr_backbone), ("lr_head", self.lr_head)]
            .into_iter()
            .chain(self.scratch_lr_backbone.map(|v| ("scratch_lr_backbone", v)))
        {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {lr}")));
            }
        }
        if self.steps == 0 || self.objects_per_batch == 0 || self.grasps_per_object == 0 {
            return Err(Error::Config("finetune steps and batch sizes must be >= 1".into()));
        }
        self.head.validate()
    }

    pub fn backbone_lr(&self, pretrained: bool) -> f64 {
        match (pretrained, self.scratch_lr_backbone) {
            (false, Some(lr)) => lr,
            _ => self.lr_backbone,
        }
    }
}

/// Backbone, attention pool and head in one store. A `pretrained` store
/// replaces the randomly initialized tokenizer and encoder.
pub fn init_finetune_store(
    tok: &TokenizerConfig,
    enc: &EncoderConfig,
    head: &HeadConfig,
    pretrained: Option<&ParamStore<f32>>,
    seed: u64,
) -> Result<ParamStore<f32>, Error> {
    let mut r = rng::stream(seed, &[rng::tag("finetune-init")]);
    let mut store = ParamStore::new();
    init_backbone(&mut store, tok, enc, &mut r);
    init_pool(&mut store, enc.embed_dim, &mut r);
    init_head(&mut store, enc.embed_dim, head, &mut r);
    if let Some(src) = pretrained {
        for (_, name, t) in store.iter().filter(|(_, n, _)| n.starts_with(TOKENIZER) || n.starts_with(ENCODER)) {
            match src.get(name) {
                Some(s) if s.shape() == t.shape() => {}
                Some(s) => {
                    return Err(Error::Config(format!(
                        "pretrained {name} has shape {:?}, model expects {:?}",
                        s.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("pretrained checkpoint is missing {name}"))),
            }
        }
        store.copy_prefix_from(src, TOKENIZER);
        store.copy_prefix_from(src, ENCODER);
    }
    Ok(store)
}

pub fn finetune_groups(cfg: &FinetuneConfig, pretrained: bool) -> Vec<ParamGroup> {
    let mut groups = vec![ParamGroup::new("head", &[POOL, HEAD], cfg.lr_head)];
    if !cfg.freeze_backbone {
        let prefixes: &[&str] = if cfg.freeze_tokenizer { &[ENCODER] } else { &[TOKENIZER, ENCODER] };
        groups.push(ParamGroup::new("backbone", prefixes, cfg.backbone_lr(pretrained)));
    }
    groups
}

/// An object with the labeled grasps that may be drawn for it.
#[derive(Clone, Debug)]
pub struct LabeledObject {
    pub tokens: ObjectTokens,
    pub samples: Vec<GraspSample>,
}

fn pose_tensor(samples: &[&GraspSample]) -> Tensor<f32> {
    let data = samples.iter().flat_map(|s| s.pose.features()).map(|v| v as f32).collect();
    Tensor::new(&[samples.len(), POSE_DIM], data).expect("pose rows")
}

fn joint_tensor(samples: &[&GraspSample]) -> Tensor<f32> {
    let data = samples.iter().flat_map(|s| s.joints).map(|v| v as f32).collect();
    Tensor::new(&[samples.len(), NUM_JOINTS], data).expect("joint rows")
}

/// Which objective a fine-tuning graph minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadLoss {
    WinnerTakesAll,
    SquaredError,
}

/// Head outputs for `poses` on one object: `(joints, logits)`.
pub fn object_forward(
    g: &mut Graph<f32>,
    store: &ParamStore<f32>,
    enc: &EncoderConfig,
    head: &HeadConfig,
    obj: &ObjectTokens,
    poses: Tensor<f32>,
    detach_backbone: bool,
) -> Result<(Var, Var), TensorError> {
    let n = poses.rows();
    let mut lat = encode_object(g, store, enc, &obj.rel, &obj.positions, obj.group_size)?;
    if detach_backbone {
        lat = g.detach(lat)?;
    }
    let pooled = attention_pool(g, store, lat)?;
    let emb = g.gather_rows(pooled, &vec![0; n])?;
    let poses = g.input(poses);
    head_forward(g, store, head, emb, poses)
}

/// Loss on one object's rows, weighted by `weight`.
#[allow(clippy::too_many_arguments)]
pub fn finetune_loss_graph(
    g: &mut Graph<f32>,
    store: &ParamStore<f32>,
    enc: &EncoderConfig,
    head: &HeadConfig,
    obj: &ObjectTokens,
    samples: &[&GraspSample],
    kind: HeadLoss,
    detach_backbone: bool,
) -> Result<Var, TensorError> {
    let (joints, logits) = object_forward(g, store, enc, head, obj, pose_tensor(samples), detach_backbone)?;
    let truth = joint_tensor(samples);
    match kind {
        HeadLoss::WinnerTakesAll => wta_loss(g, joints, logits, &truth, head.alpha).map(|(l, _)| l),
        HeadLoss::SquaredError => squared_error_loss(g, joints, &truth),
    }
}

/// Loss and gradients of one batch, averaged over every grasp row.
pub fn batch_gradients(
    store: &ParamStore<f32>,
    enc: &EncoderConfig,
    head: &HeadConfig,
    batch: &[(&ObjectTokens, Vec<&GraspSample>)],
    kind: HeadLoss,
    detach_backbone: bool,
) -> Result<(f64, GradStore<f32>), Error> {
    let rows: usize = batch.iter().map(|(_, s)| s.len()).sum();
    if rows == 0 {
        return Err(Error::Config("empty fine-tuning batch".into()));
    }
    let parts = batch
        .par_iter()
        .map(|(obj, samples)| {
            let w = samples.len() as f64 / rows as f64;
            let mut g = Graph::new();
            let loss = finetune_loss_graph(&mut g, store, enc, head, obj, samples, kind, detach_backbone)?;
            let value = g.value(loss).item() as f64;
            let scaled = g.scale(loss, w)?;
            let grads = g.backward(scaled)?;
            let mut acc = GradStore::zeros_like(store);
            acc.accumulate_graph(&g, &grads, store);
            Ok((value * w, acc))
        })
        .collect::<Result<Vec<_>, TensorError>>()
        .map_err(numeric)?;
    let mut total = GradStore::zeros_like(store);
    let mut loss = 0.0;
    for (v, gs) in &parts {
        loss += v;
        total.merge(gs);
    }
    Ok((loss, total))
}

/// One optimizer step on the WTA objective. Returns the batch loss.
pub fn finetune_step(
    store: &mut ParamStore<f32>,
    opt: &mut Adam<f32>,
    enc: &EncoderConfig,
    cfg: &FinetuneConfig,
    batch: &[(&ObjectTokens, Vec<&GraspSample>)],
    lr_mult: f64,
) -> Result<f64, Error> {
    let (loss, grads) = batch_gradients(store, enc, &cfg.head, batch, HeadLoss::WinnerTakesAll, cfg.freeze_backbone)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("fine-tuning loss {loss}")));
    }
    opt.step_scaled(store, &grads, lr_mult).map_err(numeric)?;
    Ok(loss)
}

/// Hypothesis sets for each of `samples` on one object.
pub fn predict_object(
    store: &ParamStore<f32>,
    enc: &EncoderConfig,
    head: &HeadConfig,
    obj: &ObjectTokens,
    samples: &[&GraspSample],
) -> Result<Vec<HypothesisSet>, Error> {
    let mut g = Graph::new();
    let (j, l) = object_forward(&mut g, store, enc, head, obj, pose_tensor(samples), true).map_err(numeric)?;
    Ok(hypothesis_sets(g.value(j), g.value(l)))
}

/// Predictions paired with ground truth, in object then sample order.
pub fn predict_split(
    store: &ParamStore<f32>,
    enc: &EncoderConfig,
    head: &HeadConfig,
    objects: &[LabeledObject],
) -> Result<Vec<(HypothesisSet, crate::JointVector)>, Error> {
    let per_object = objects
        .par_iter()
        .map(|o| {
            let samples: Vec<&GraspSample> = o.samples.iter().collect();
            if samples.is_empty() {
                return Ok(Vec::new());
            }
            let sets = predict_object(store, enc, head, &o.tokens, &samples)?;
            Ok(sets.into_iter().zip(samples.iter().map(|s| s.joints)).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(per_object.into_iter().flatten().collect())
}

pub fn evaluate_split(
    store: &ParamStore<f32>,
    enc: &EncoderConfig,
    head: &HeadConfig,
    objects: &[LabeledObject],
    threshold: f64,
    norm: CoverageNorm,
) -> Result<EvalReport, Error> {
    evaluate(&predict_split(store, enc, head, objects)?, threshold, norm)
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub store: ParamStore<f32>,
    pub losses: Vec<f64>,
    pub log: Vec<MetricRecord>,
    pub val: Option<EvalReport>,
}

fn log_eval(log: &mut Vec<MetricRecord>, step: usize, r: &EvalReport) {
    log.push(MetricRecord::new(step, "val", "rmse_top_logit", r.rmse_top_logit));
    log.push(MetricRecord::new(step, "val", "rmse_best_of_k", r.rmse_best_of_k));
    log.push(MetricRecord::new(step, "val", "selection_gap", r.selection_gap));
    log.push(MetricRecord::new(step, "val", "coverage", r.coverage_at_threshold));
}

/// Fine-tunes `store` on `train`, evaluating on `val` when given.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    mut store: ParamStore<f32>,
    pretrained: bool,
    enc: &EncoderConfig,
    cfg: &FinetuneConfig,
    train: &[LabeledObject],
    val: Option<&[LabeledObject]>,
    threshold: f64,
    norm: CoverageNorm,
) -> Result<FinetuneOutcome, Error> {
    cfg.validate()?;
    let train: Vec<&LabeledObject> = train.iter().filter(|o| !o.samples.is_empty()).collect();
    if train.is_empty() {
        return Err(Error::Config("no labeled training grasps".into()));
    }
    let mut opt = Adam::new(&store, finetune_groups(cfg, pretrained), AdamConfig::default()).map_err(numeric)?;
    let mut r = rng::stream(cfg.seed, &[rng::tag("finetune")]);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let objs = sample_indices(&mut r, train.len(), cfg.objects_per_batch);
        let batch: Vec<(&ObjectTokens, Vec<&GraspSample>)> = objs
            .iter()
            .map(|&i| {
                let o = train[i];
                let picks = sample_indices(&mut r, o.samples.len(), cfg.grasps_per_object);
                (&o.tokens, picks.iter().map(|&k| &o.samples[k]).collect())
            })
            .collect();
        let loss = finetune_step(&mut store, &mut opt, enc, cfg, &batch, lr_scale(cfg.cosine, step, cfg.steps))?;
        losses.push(loss);
        let done = step + 1 == cfg.steps;
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 || done {
            log.push(MetricRecord::new(step + 1, "train", "wta_loss", loss));
            if let (Some(v), false) = (val, done) {
                log_eval(&mut log, step + 1, &evaluate_split(&store, enc, &cfg.head, v, threshold, norm)?);
            }
        }
    }
    let val_report = match val {
        Some(v) => {
            let rep = evaluate_split(&store, enc, &cfg.head, v, threshold, norm)?;
            log_eval(&mut log, cfg.steps, &rep);
            Some(rep)
        }
        None => None,
    };
    Ok(FinetuneOutcome { store, losses, log, val: val_report })
}

/// Groups samples under their prepared objects, keeping only `object_ids`.
pub fn labeled_objects(
    tokens: &BTreeMap<String, ObjectTokens>,
    samples: &[GraspSample],
    object_ids: &[String],
) -> Result<Vec<LabeledObject>, Error> {
    let mut by_object: BTreeMap<&str, Vec<GraspSample>> = BTreeMap::new();
    for s in samples {
        by_object.entry(s.object_id.as_str()).or_default().push(s.clone());
    }
    object_ids
        .iter()
        .map(|id| {
            let t = tokens.get(id).ok_or_else(|| Error::Ingestion(format!("no cloud prepared for {id}")))?;
            Ok(LabeledObject { tokens: t.clone(), samples: by_object.remove(id.as_str()).unwrap_or_default() })
        })
        .collect()
}

/// Draws a random batch of labeled rows; used by property tests and benches.
pub fn random_batch<'a>(
    objects: &'a [LabeledObject],
    rows_per_object: usize,
    rng: &mut impl Rng,
) -> Vec<(&'a ObjectTokens, Vec<&'a GraspSample>)> {
    objects
        .iter()
        .filter(|o| !o.samples.is_empty())
        .map(|o| {
            let picks: Vec<&GraspSample> =
                (0..rows_per_object).map(|_| &o.samples[rng.gen_range(0..o.samples.len())]).collect();
            (&o.tokens, picks)
        })
        .collect()
}

/// Loads and tokenizes the clouds of `object_ids`, keyed by object id.
pub fn prepare_dataset_objects(
    ds: &crate::datasets::Dataset,
    object_ids: &[String],
    cfg: &TokenizerConfig,
) -> Result<BTreeMap<String, ObjectTokens>, Error> {
    object_ids
        .par_iter()
        .map(|id| {
            let cloud = ds.load_cloud(id)?;
            Ok((id.clone(), prepare_object(&cloud, cfg)?))
        })
        .collect()
}
