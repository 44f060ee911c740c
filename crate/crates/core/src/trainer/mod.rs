//! Dual projection head trained over frozen embeddings.
//!
//! The CLS head maps one vector per image, the patch head maps every patch
//! row independently. Input embeddings are constants; only head parameters
//! receive gradients. One optimizer step consumes `grad_accum` micro-batches
//! of `batch_size` triplets, and micro-batch gradients are reduced in a fixed
//! order so results do not depend on the rayon pool size.

pub mod adamw;
pub mod checkpoint;
pub mod mlp;

use std::collections::{BTreeSet, HashMap};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{self, LossConfig};
use crate::model::{EmbeddingBundle, EmbeddingItem, ManifestIndex, Split, TokenKind, Triplet};
use crate::ot::SinkhornConfig;

pub use adamw::{AdamW, AdamWConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use mlp::{Activation, Mlp, MlpGrads};

#[derive(Debug, Clone, PartialEq)]
pub struct DualHead {
    pub cls: Mlp,
    pub patch: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub cls: MlpGrads,
    pub patch: MlpGrads,
}

impl HeadGrads {
    fn add_scaled(&mut self, other: &HeadGrads, scale: f64) {
        self.cls.add_scaled(&other.cls, scale);
        self.patch.add_scaled(&other.patch, scale);
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.cls.tensors().to_vec();
        v.extend(self.patch.tensors());
        v
    }
}

/// Projected CLS vector and (optionally) projected patch rows of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    pub cls: Array1<f64>,
    pub patches: Option<Array2<f64>>,
}

impl DualHead {
    /// Seeded fan-in initialisation of both heads.
    pub fn init(in_dim: usize, hidden: usize, out_dim: usize, activation: Activation, seed: u64) -> Self {
        let mut rng_cls = crate::rng::stream(seed, 1);
        let mut rng_patch = crate::rng::stream(seed, 2);
        Self {
            cls: Mlp::init(in_dim, hidden, out_dim, activation, &mut rng_cls),
            patch: Mlp::init(in_dim, hidden, out_dim, activation, &mut rng_patch),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            cls: Mlp::identity(dim),
            patch: Mlp::identity(dim),
        }
    }

    pub fn forward(&self, cls: &EmbeddingItem, patches: Option<&EmbeddingItem>) -> Result<Projected> {
        let x = cls.vector().insert_axis(Axis(0));
        let c = self.cls.forward(x.view())?.remove_axis(Axis(0));
        let patches = match patches {
            Some(p) => Some(self.patch.forward(p.matrix().view())?),
            None => None,
        };
        Ok(Projected { cls: c, patches })
    }

    pub fn zero_grads(&self) -> HeadGrads {
        HeadGrads {
            cls: self.cls.zero_grads(),
            patch: self.patch.zero_grads(),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.cls.tensors().to_vec();
        v.extend(self.patch.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.cls.tensors_mut().into_iter().collect();
        v.extend(self.patch.tensors_mut());
        v
    }

    pub fn is_finite(&self) -> bool {
        self.cls.is_finite() && self.patch.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    /// Passes over the training triplets.
    pub epochs: usize,
    pub seed: u64,
    pub hidden_dim: usize,
    /// Head output dimension; `None` keeps the input dimension.
    pub out_dim: Option<usize>,
    pub activation: Activation,
    /// Add the other triplets' positives in a micro-batch as extra negatives.
    pub in_batch_negatives: bool,
    pub loss: LossConfig,
    pub sinkhorn: SinkhornConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.0,
            batch_size: 8,
            grad_accum: 4,
            epochs: 3,
            seed: 0,
            hidden_dim: 512,
            out_dim: None,
            activation: Activation::Gelu,
            in_batch_negatives: true,
            loss: LossConfig::default(),
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid("batch_size, grad_accum and hidden_dim must be positive"));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("lr and weight_decay must be non-negative"));
        }
        if self.out_dim == Some(0) {
            return Err(Error::invalid("out_dim must be positive"));
        }
        self.loss.validate()?;
        self.sinkhorn.validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    fn uses_patches(&self) -> bool {
        self.loss.lambda > 0.0
    }
}

/// Embeddings and metadata a training run reads from.
pub struct TrainData<'a> {
    pub manifest: &'a ManifestIndex,
    pub cls: &'a EmbeddingBundle,
    pub patch: Option<&'a EmbeddingBundle>,
    cls_index: HashMap<&'a str, usize>,
    patch_index: HashMap<&'a str, usize>,
}

impl<'a> TrainData<'a> {
    pub fn new(
        manifest: &'a ManifestIndex,
        cls: &'a EmbeddingBundle,
        patch: Option<&'a EmbeddingBundle>,
    ) -> Result<Self> {
        if cls.token_kind != TokenKind::Cls {
            return Err(Error::invalid("the CLS bundle must have token kind CLS"));
        }
        if let Some(p) = patch {
            if p.token_kind != TokenKind::Patch {
                return Err(Error::invalid("the patch bundle must have token kind PATCH"));
            }
            if p.dim != cls.dim {
                return Err(Error::Shape(format!(
                    "CLS dim {} differs from patch dim {}",
                    cls.dim, p.dim
                )));
            }
        }
        Ok(Self {
            manifest,
            cls,
            patch,
            cls_index: cls.index(),
            patch_index: patch.map(|p| p.index()).unwrap_or_default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.cls.dim
    }

    fn cls_item(&self, id: &str) -> Result<&'a EmbeddingItem> {
        self.cls_index
            .get(id)
            .map(|&i| &self.cls.items[i])
            .ok_or_else(|| Error::MissingItem(format!("no CLS embedding for {id}")))
    }

    fn patch_item(&self, id: &str) -> Result<&'a EmbeddingItem> {
        let bundle = self
            .patch
            .ok_or_else(|| Error::invalid("patch loss weight is positive but no patch bundle was given"))?;
        self.patch_index
            .get(id)
            .map(|&i| &bundle.items[i])
            .ok_or_else(|| Error::MissingItem(format!("no patch embedding for {id}")))
    }

    fn instance_of(&self, id: &str) -> Result<&'a str> {
        Ok(self.manifest.require(id)?.instance_id.as_str())
    }
}

/// Loss and head gradients for one triplet with the given negatives.
fn triplet_grads(
    head: &DualHead,
    anchor: &str,
    positive: &str,
    negatives: &[&str],
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<(f64, HeadGrads, bool)> {
    let members: Vec<&str> = [anchor, positive]
        .into_iter()
        .chain(negatives.iter().copied())
        .collect();
    let mut grads = head.zero_grads();

    let rows = members
        .iter()
        .map(|id| data.cls_item(id).map(|it| it.vector()))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let x = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let (y, cache) = head.cls.forward_cached(x.view())?;
    let neg_rows: Vec<_> = (2..members.len()).map(|k| y.row(k)).collect();
    let cls_out = losses::cls_loss(y.row(0), y.row(1), &neg_rows, &cfg.loss)?;
    let mut dy = Array2::zeros(y.raw_dim());
    dy.row_mut(0).assign(&cls_out.grad_anchor);
    dy.row_mut(1).assign(&cls_out.grad_positive);
    for (k, g) in cls_out.grad_negatives.iter().enumerate() {
        dy.row_mut(k + 2).assign(g);
    }
    head.cls.backward(&cache, dy.view(), &mut grads.cls);

    let mut patch_loss = 0.0;
    let mut converged = true;
    if cfg.uses_patches() {
        let mats = members
            .iter()
            .map(|id| data.patch_item(id).map(|it| it.matrix()))
            .collect::<Result<Vec<_>>>()?;
        let mut offsets = Vec::with_capacity(mats.len() + 1);
        offsets.push(0);
        for m in &mats {
            offsets.push(offsets.last().unwrap() + m.nrows());
        }
        let mviews: Vec<ArrayView2<f64>> = mats.iter().map(|m| m.view()).collect();
        let stacked = concatenate(Axis(0), &mviews).map_err(|e| Error::Shape(e.to_string()))?;
        let (z, pcache) = head.patch.forward_cached(stacked.view())?;
        let part = |k: usize| z.slice(s![offsets[k]..offsets[k + 1], ..]);
        let negs: Vec<_> = (2..members.len()).map(part).collect();
        let out = losses::patch_loss(part(0), part(1), &negs, &cfg.loss, &cfg.sinkhorn)?;
        let mut dz = Array2::zeros(z.raw_dim());
        let lambda = cfg.loss.lambda;
        let mut put = |k: usize, g: &Array2<f64>| {
            dz.slice_mut(s![offsets[k]..offsets[k + 1], ..])
                .assign(&(g * lambda));
        };
        put(0, &out.grad_anchor);
        put(1, &out.grad_positive);
        for (k, g) in out.grad_negatives.iter().enumerate() {
            put(k + 2, g);
        }
        head.patch.backward(&pcache, dz.view(), &mut grads.patch);
        patch_loss = out.loss;
        converged = out.converged;
    }

    Ok((
        losses::total_loss(cls_out.loss, patch_loss, &cfg.loss),
        grads,
        converged,
    ))
}

/// Negatives for each triplet of a micro-batch: its hard negative, then (if
/// enabled) the other triplets' positives from different instances.
fn micro_batch_negatives<'t>(
    micro: &'t [Triplet],
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<Vec<Vec<&'t str>>> {
    let mut out = Vec::with_capacity(micro.len());
    for (i, t) in micro.iter().enumerate() {
        let mut negs = vec![t.hard_negative.as_str()];
        if cfg.in_batch_negatives {
            let inst = data.instance_of(&t.anchor)?;
            for (j, other) in micro.iter().enumerate() {
                if i == j || negs.contains(&other.positive.as_str()) {
                    continue;
                }
                if data.instance_of(&other.positive)? != inst {
                    negs.push(other.positive.as_str());
                }
            }
        }
        out.push(negs);
    }
    Ok(out)
}

/// Mean loss and gradient over one optimizer step's worth of triplets.
///
/// `batch` is split into micro-batches of `cfg.batch_size`; each micro-batch
/// contributes its mean, and micro-batches are averaged.
pub fn step_loss_and_grads(
    head: &DualHead,
    batch: &[Triplet],
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<(f64, HeadGrads, bool)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let mut total = head.zero_grads();
    let mut loss = 0.0;
    let mut converged = true;
    let micros: Vec<&[Triplet]> = batch.chunks(cfg.batch_size).collect();
    let n_micro = micros.len() as f64;
    for micro in micros {
        let negatives = micro_batch_negatives(micro, data, cfg)?;
        let results: Vec<Result<(f64, HeadGrads, bool)>> = micro
            .par_iter()
            .zip(negatives.par_iter())
            .map(|(t, negs)| triplet_grads(head, &t.anchor, &t.positive, negs, data, cfg))
            .collect();
        let w = 1.0 / (micro.len() as f64 * n_micro);
        for r in results {
            let (l, g, c) = r?;
            loss += w * l;
            total.add_scaled(&g, w);
            converged &= c;
        }
    }
    Ok((loss, total, converged))
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub sinkhorn_converged: bool,
}

/// Forward/backward over `batch` followed by one AdamW update.
pub fn train_step(
    head: &mut DualHead,
    opt: &mut AdamW,
    batch: &[Triplet],
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let (loss, grads, converged) = step_loss_and_grads(head, batch, data, cfg)?;
    opt.update(head.tensors_mut(), grads.tensors());
    if !head.is_finite() {
        return Err(Error::invalid("head parameters became non-finite"));
    }
    Ok(StepStats {
        loss,
        sinkhorn_converged: converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub sinkhorn_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub initial_val_accuracy: f64,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_head: DualHead,
    /// Head with the highest validation accuracy (earliest on ties; epoch 0 is the initialisation).
    pub best_head: DualHead,
    pub history: History,
}

/// Validation triplet accuracy using the evaluation suite's similarity and tie rule.
pub fn validation_accuracy(head: &DualHead, triplets: &[Triplet], data: &TrainData) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::invalid("no validation triplets"));
    }
    let project = |id: &str| -> Result<Array1<f64>> {
        let x = data.cls_item(id)?.vector().insert_axis(Axis(0));
        Ok(head.cls.forward(x.view())?.remove_axis(Axis(0)))
    };
    let mut correct = 0usize;
    for t in triplets {
        let a = project(&t.anchor)?;
        let p = project(&t.positive)?;
        let n = project(&t.hard_negative)?;
        let sp = eval::cosine_similarity(a.view(), p.view())?;
        let sn = eval::cosine_similarity(a.view(), n.view())?;
        if eval::triplet_correct(sp, sn) {
            correct += 1;
        }
    }
    Ok(correct as f64 / triplets.len() as f64)
}

/// Split triplets by the anchor's manifest split; test-split anchors are ignored.
pub fn split_triplets(triplets: &[Triplet], manifest: &ManifestIndex) -> Result<(Vec<Triplet>, Vec<Triplet>)> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for t in triplets {
        match manifest.require(&t.anchor)?.split {
            Split::Train => train.push(t.clone()),
            Split::Val => val.push(t.clone()),
            Split::Test => {}
        }
    }
    let instances = |ts: &[Triplet]| -> Result<BTreeSet<String>> {
        let mut s = BTreeSet::new();
        for t in ts {
            for id in [&t.anchor, &t.positive] {
                s.insert(manifest.require(id)?.instance_id.clone());
            }
        }
        Ok(s)
    };
    let tr = instances(&train)?;
    let va = instances(&val)?;
    if let Some(shared) = tr.intersection(&va).next() {
        return Err(Error::invalid(format!(
            "instance {shared} appears in both train and val triplets"
        )));
    }
    Ok((train, val))
}

/// Full training loop with per-epoch validation and best-checkpoint selection.
///
/// Triplet order is canonicalised (sorted) before seeded shuffling, so the
/// result does not depend on input file order.
pub fn train(triplets: &[Triplet], data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (mut train_set, val_set) = split_triplets(triplets, data.manifest)?;
    if train_set.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if val_set.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }
    train_set.sort();

    let out_dim = cfg.out_dim.unwrap_or(data.dim());
    let mut head = DualHead::init(data.dim(), cfg.hidden_dim, out_dim, cfg.activation, cfg.seed);
    let sizes: Vec<usize> = head.tensors().iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(cfg.adamw(), &sizes);

    let initial = validation_accuracy(&head, &val_set, data)?;
    let mut best_head = head.clone();
    let mut history = History {
        initial_val_accuracy: initial,
        steps: Vec::new(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: initial,
    };

    let per_step = cfg.batch_size * cfg.grad_accum;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order = train_set.clone();
        order.shuffle(&mut crate::rng::stream(cfg.seed, 1000 + epoch as u64));
        let mut losses = Vec::new();
        for batch in order.chunks(per_step) {
            let stats = train_step(&mut head, &mut opt, batch, data, cfg)?;
            step += 1;
            losses.push(stats.loss);
            history.steps.push(StepRecord {
                epoch,
                step,
                loss: stats.loss,
                sinkhorn_converged: stats.sinkhorn_converged,
            });
        }
        let acc = validation_accuracy(&head, &val_set, data)?;
        history.epochs.push(EpochRecord {
            epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_accuracy: acc,
        });
        if acc > history.best_val_accuracy {
            history.best_val_accuracy = acc;
            history.best_epoch = epoch;
            best_head = head.clone();
        }
    }

    Ok(TrainOutcome {
        final_head: head,
        best_head,
        history,
    })
}

/// Project every item of a bundle: CLS bundles through the CLS head, patch
/// bundles row-wise through the patch head.
pub fn apply_head(head: &DualHead, bundle: &EmbeddingBundle) -> Result<EmbeddingBundle> {
    let mlp = match bundle.token_kind {
        TokenKind::Cls => &head.cls,
        TokenKind::Patch => &head.patch,
    };
    if mlp.in_dim() != bundle.dim {
        return Err(Error::Shape(format!(
            "head expects dim {}, bundle has dim {}",
            mlp.in_dim(),
            bundle.dim
        )));
    }
    let items = bundle
        .items
        .par_iter()
        .map(|it| {
            let y = mlp.forward(it.matrix().view())?;
            Ok(EmbeddingItem::from_matrix(it.id.clone(), y.view()))
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingBundle::new(bundle.token_kind, mlp.out_dim(), items)
}
