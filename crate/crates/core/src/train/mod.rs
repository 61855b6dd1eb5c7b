//! Desk-scale pretraining: AdamW with warmup + cosine schedule, EMA weights,
//! color dropout, deterministic batching and checkpoints.

mod check;
mod data;
mod eval;

pub use check::{grad_check, tiny_encoder_config, CheckedOp};
pub use data::{
    class_anchors, generate_dataset, FixtureConfig, GenConfig, GenReport, LabeledMesh, ObjectInfo, TripletDataset,
    TripletRecord,
};
pub use eval::{embed_clouds, linear_probe, probe_eval, top_k_accuracy, zero_shot_classify, zero_shot_eval, TopK};

use crate::align::{AlignHeads, LossBreakdown, Reduction};
use crate::duomamba::{embed_patches_cached, encoder_backward, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::impl_parameters;
use crate::meshgen::stream_rng;
use crate::store::{Container, TensorData};
use crate::tensor::{Parameters, Tensor};
use crate::tokenizer::{build_patches, PatchSet};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::borrow::Cow;

const INIT_STREAM: u64 = 1;
const EPOCH_STREAM_BASE: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub color_drop_prob: f64,
    pub color_constant: f64,
    pub reduction: Reduction,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 200,
            warmup_epochs: 10,
            base_lr: 7e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.9995,
            color_drop_prob: 0.5,
            color_constant: 0.4,
            reduction: Reduction::Mean,
            seed: 0,
        }
    }

    /// 50 epochs over the 16-object toy set in object-distinct batches of 4
    /// (2,000 steps on ten views per object). Telling two instances of a class
    /// apart takes more than a thousand updates, so the desk run trades batch
    /// width for step count; the EMA horizon is shortened to match.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 4,
            epochs: 50,
            base_lr: 2e-3,
            ema_decay: 0.99,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::InvalidConfig(format!("{field}: {msg}")));
        if self.batch_size < 2 {
            return bad("batch_size", format!("{} is below 2", self.batch_size));
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs", format!("{} exceeds epochs = {}", self.warmup_epochs, self.epochs));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr", format!("{} is not a finite non-negative rate", self.base_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("{} is not finite and non-negative", self.weight_decay));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(name, format!("{v} is outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", format!("{} is not positive", self.adam_eps));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay", format!("{} is outside [0, 1]", self.ema_decay));
        }
        if !(0.0..=1.0).contains(&self.color_drop_prob) {
            return bad("color_drop_prob", format!("{} is outside [0, 1]", self.color_drop_prob));
        }
        if !(0.0..=1.0).contains(&self.color_constant) {
            return bad("color_constant", format!("{} is outside [0, 1]", self.color_constant));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_records: usize) -> usize {
        n_records.div_ceil(self.batch_size)
    }

    pub fn schedule(&self, n_records: usize) -> Schedule {
        let spe = self.steps_per_epoch(n_records);
        Schedule {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_epochs * spe,
            total_steps: self.epochs * spe,
        }
    }
}

/// Linear warmup from 0 to `base_lr`, then a half cosine down to 0 at
/// `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Point encoder plus alignment heads and temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub heads: AlignHeads,
}

impl_parameters!(Model { encoder, heads });

impl Model {
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, INIT_STREAM);
        Ok(Model {
            encoder: EncoderParams::new(config, &mut rng)?,
            heads: AlignHeads::identity(config.embed_dim),
        })
    }
}

/// Weight decay applies to matrices and convolution kernels only.
pub fn is_decayed(name: &str) -> bool {
    name.ends_with("weight") || name.ends_with("kernel")
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Model,
    pub v: Model,
    /// Number of updates applied so far.
    pub t: u64,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        OptimizerState {
            m: model.zeros_like(),
            v: model.zeros_like(),
            t: 0,
        }
    }

    /// One decoupled-weight-decay Adam update with bias correction.
    pub fn step(&mut self, model: &mut Model, grad: &Model, lr: f64, config: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - config.beta1.powi(self.t as i32);
        let bc2 = 1.0 - config.beta2.powi(self.t as i32);
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        let grads = grad.named_tensors();
        let params = model.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((p, (_, g)), m), v), name) in params.into_iter().zip(grads).zip(ms).zip(vs).zip(&names) {
            let decay = if is_decayed(name) { lr * config.weight_decay } else { 0.0 };
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= decay * p[i];
                p[i] -= lr * mhat / (vhat.sqrt() + config.adam_eps);
            }
        }
    }
}

/// `shadow ← decay·shadow + (1−decay)·param` for every tensor, written as an
/// increment so a shadow equal to its parameter stays bitwise unchanged.
pub fn ema_update(shadow: &mut Model, model: &Model, decay: f64) {
    let src = model.named_tensors();
    for (s, (_, p)) in shadow.tensors_mut().into_iter().zip(src) {
        for (a, b) in s.data_mut().iter_mut().zip(p.data()) {
            *a += (1.0 - decay) * (b - *a);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub encoder_config: EncoderConfig,
    pub config: TrainConfig,
    pub model: Model,
    pub ema: Model,
    pub opt: OptimizerState,
    pub step: usize,
    pub epoch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub tau: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Point embeddings of a batch (`[B, D]`, not normalized) and the
/// per-example encoder caches.
fn embed_batch(
    model: &Model,
    config: &EncoderConfig,
    patches: &[&PatchSet],
) -> Result<(Tensor, Vec<crate::duomamba::EncoderCache>)> {
    let mut zp = Tensor::zeros(&[patches.len(), config.embed_dim]);
    let mut caches = Vec::with_capacity(patches.len());
    for (r, p) in patches.iter().enumerate() {
        let (z, cache) = embed_patches_cached(p, config, &model.encoder)?;
        zp.row_mut(r).copy_from_slice(&z);
        caches.push(cache);
    }
    Ok((zp, caches))
}

/// Total loss of one batch.
pub fn batch_loss(
    model: &Model,
    config: &EncoderConfig,
    patches: &[&PatchSet],
    image: &Tensor,
    text: &Tensor,
    reduction: Reduction,
) -> Result<LossBreakdown> {
    let (zp, _) = embed_batch(model, config, patches)?;
    model.heads.loss(&zp, image, text, reduction)
}

/// Total loss of one batch and its gradient for every model tensor.
pub fn batch_loss_and_grad(
    model: &Model,
    config: &EncoderConfig,
    patches: &[&PatchSet],
    image: &Tensor,
    text: &Tensor,
    reduction: Reduction,
) -> Result<(LossBreakdown, Model)> {
    if patches.len() < 2 {
        return Err(Error::invalid("a contrastive batch needs at least two examples"));
    }
    let (zp, caches) = embed_batch(model, config, patches)?;
    let mut grad = model.zeros_like();
    let (loss, d_zp) = model.heads.loss_and_backward(&zp, image, text, reduction, &mut grad.heads)?;
    if !loss.total.is_finite() {
        let culprit = model.all_finite().unwrap_or_else(|| "point embeddings".into());
        return Err(Error::Numerical {
            step: 0,
            msg: format!("non-finite loss; first non-finite tensor: {culprit}"),
        });
    }
    for (r, cache) in caches.iter().enumerate() {
        encoder_backward(&model.encoder, cache, d_zp.row(r), &mut grad.encoder);
    }
    Ok((loss, grad))
}

/// One training example: cached patches plus the frozen features.
pub struct Example<'a> {
    pub patches: &'a PatchSet,
    pub image: &'a [f64],
    pub text: &'a [Vec<f64>],
}

/// Farthest-point patches for every cloud (colors kept; dropout happens per
/// step).
pub fn prepare_patches(dataset: &TripletDataset, indices: &[usize], config: &EncoderConfig) -> Result<Vec<PatchSet>> {
    indices
        .iter()
        .map(|&i| {
            let cloud = &dataset.records[i].point_cloud;
            build_patches(&cloud.points, cloud.colors.as_deref(), config.s_tokens, config.k_neighbors)
        })
        .collect()
}

fn drop_colors(patches: &PatchSet, value: f64) -> PatchSet {
    PatchSet {
        patch_colors: Some(
            patches
                .relative_points
                .iter()
                .map(|r| vec![[value; 3]; r.len()])
                .collect(),
        ),
        ..patches.clone()
    }
}

/// Splits records into batches so that no batch repeats an object while
/// `batch_size` does not exceed the object count: each object's views are
/// shuffled, then dealt out in rounds of one view per object (object order
/// shuffled per round).
pub fn epoch_batches(object_ids: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let n_obj = object_ids.iter().copied().max().map_or(0, |m| m + 1);
    let mut per_object: Vec<Vec<usize>> = vec![Vec::new(); n_obj];
    for (i, &o) in object_ids.iter().enumerate() {
        per_object[o].push(i);
    }
    for views in &mut per_object {
        views.shuffle(rng);
    }
    let rounds = per_object.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(object_ids.len());
    let mut objs: Vec<usize> = (0..n_obj).collect();
    for r in 0..rounds {
        objs.shuffle(rng);
        // objects already in the batch being filled go to the back of the round
        let open = &order[order.len() - order.len() % batch_size..];
        let in_open = |o: &usize| open.iter().any(|&i| object_ids[i] == *o);
        objs.sort_by_key(|o| in_open(o));
        for &o in &objs {
            if let Some(&i) = per_object[o].get(r) {
                order.push(i);
            }
        }
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

impl TrainState {
    pub fn new(encoder_config: &EncoderConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        encoder_config.validate()?;
        let model = Model::new(encoder_config, config.seed)?;
        Ok(TrainState {
            encoder_config: encoder_config.clone(),
            config: config.clone(),
            ema: model.clone(),
            opt: OptimizerState::new(&model),
            model,
            step: 0,
            epoch: 0,
        })
    }

    /// Forward, backward, AdamW and EMA on one batch.
    pub fn train_step(&mut self, batch: &[Example], lr: f64, rng: &mut ChaCha8Rng) -> Result<StepMetrics> {
        let cfg = &self.config;
        let d = self.encoder_config.embed_dim;
        let b = batch.len();
        let mut image = Tensor::zeros(&[b, d]);
        let mut text = Tensor::zeros(&[b, d]);
        let mut patches = Vec::with_capacity(b);
        for (r, ex) in batch.iter().enumerate() {
            patches.push(if rng.random::<f64>() < cfg.color_drop_prob {
                Cow::Owned(drop_colors(ex.patches, cfg.color_constant))
            } else {
                Cow::Borrowed(ex.patches)
            });
            if ex.image.len() != d || ex.text.is_empty() {
                return Err(Error::shape(format!("record {r} has features that do not match embed_dim {d}")));
            }
            image.row_mut(r).copy_from_slice(ex.image);
            let t = &ex.text[rng.random_range(0..ex.text.len())];
            if t.len() != d {
                return Err(Error::shape(format!("record {r} has a text feature of width {}", t.len())));
            }
            text.row_mut(r).copy_from_slice(t);
        }
        let refs: Vec<&PatchSet> = patches.iter().map(|p| p.as_ref()).collect();
        let (loss, grad) = batch_loss_and_grad(&self.model, &self.encoder_config, &refs, &image, &text, cfg.reduction)
            .map_err(|e| match e {
                Error::Numerical { msg, .. } => Error::Numerical { step: self.step, msg },
                other => other,
            })?;
        if let Some(name) = grad.all_finite() {
            return Err(Error::Numerical {
                step: self.step,
                msg: format!("non-finite gradient in {name}"),
            });
        }
        let tau = self.model.heads.temperature.tau();
        self.opt.step(&mut self.model, &grad, lr, cfg);
        ema_update(&mut self.ema, &self.model, cfg.ema_decay);
        let metrics = StepMetrics {
            epoch: self.epoch,
            step: self.step,
            lr,
            tau,
            loss,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Runs one epoch; the batch order depends only on `(seed, epoch)`.
    pub fn run_epoch(
        &mut self,
        dataset: &TripletDataset,
        indices: &[usize],
        patches: &[PatchSet],
        on_step: &mut dyn FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>> {
        let schedule = self.config.schedule(indices.len());
        let mut rng = stream_rng(self.config.seed, EPOCH_STREAM_BASE + self.epoch as u64);
        let objects: Vec<usize> = indices.iter().map(|&i| dataset.records[i].object_id).collect();
        let mut out = Vec::new();
        for batch in epoch_batches(&objects, self.config.batch_size, &mut rng) {
            if batch.len() < 2 {
                continue;
            }
            let examples: Vec<Example> = batch
                .iter()
                .map(|&j| {
                    let rec = &dataset.records[indices[j]];
                    Example {
                        patches: &patches[j],
                        image: &rec.image_feature,
                        text: &rec.text_features,
                    }
                })
                .collect();
            let lr = schedule.lr_at(self.step);
            let m = self.train_step(&examples, lr, &mut rng)?;
            on_step(&m);
            out.push(m);
        }
        self.epoch += 1;
        Ok(out)
    }

    /// Trains from the current epoch up to `config.epochs`.
    pub fn train(
        &mut self,
        dataset: &TripletDataset,
        indices: &[usize],
        on_step: &mut dyn FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>> {
        let patches = prepare_patches(dataset, indices, &self.encoder_config)?;
        let mut all = Vec::new();
        while self.epoch < self.config.epochs {
            all.extend(self.run_epoch(dataset, indices, &patches, on_step)?);
        }
        Ok(all)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(json!({
            "kind": "checkpoint",
            "encoder": self.encoder_config,
            "train": self.config,
            "seed": self.config.seed,
            "step": self.step,
            "epoch": self.epoch,
            "adam_t": self.opt.t,
            "param_count": self.model.num_params(),
        }));
        for (group, m) in [("model", &self.model), ("ema", &self.ema), ("adam_m", &self.opt.m), ("adam_v", &self.opt.v)] {
            for (name, t) in m.named_tensors() {
                c.push(format!("{group}/{name}"), t.shape().to_vec(), TensorData::F64(t.data().to_vec()));
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta["kind"] != "checkpoint" {
            return Err(Error::Config("container is not a checkpoint".into()));
        }
        let field = |k: &str| c.meta.get(k).cloned().ok_or_else(|| Error::Config(format!("checkpoint lacks {k}")));
        let encoder_config: EncoderConfig = serde_json::from_value(field("encoder")?)?;
        let config: TrainConfig = serde_json::from_value(field("train")?)?;
        let num = |k: &str| -> Result<u64> {
            field(k)?
                .as_u64()
                .ok_or_else(|| Error::Config(format!("checkpoint field {k} is not an integer")))
        };
        let mut state = TrainState::new(&encoder_config, &config)?;
        state.step = num("step")? as usize;
        state.epoch = num("epoch")? as usize;
        state.opt.t = num("adam_t")?;
        let TrainState { model, ema, opt, .. } = &mut state;
        for (group, m) in [("model", model), ("ema", ema), ("adam_m", &mut opt.m), ("adam_v", &mut opt.v)] {
            let mut err = None;
            m.visit_mut("", &mut |name, t| {
                if err.is_some() {
                    return;
                }
                let key = format!("{group}/{name}");
                match c.f64s(&key, t.len()) {
                    Ok(v) if c.get(&key).map(|e| e.shape.as_slice()) == Some(t.shape()) => {
                        t.data_mut().copy_from_slice(v)
                    }
                    Ok(_) => err = Some(Error::Config(format!("tensor {key} has the wrong shape"))),
                    Err(e) => err = Some(e),
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
        }
        Ok(state)
    }
}
