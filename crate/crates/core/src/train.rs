//! Staged training of the prototype network: warm-up (prototypes and head
//! only), joint epochs, periodic projection of prototypes onto training
//! patches followed by a head-only refit, and best-checkpoint selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledImage, Split};
use crate::error::{ensure, Error, Result};
use crate::nn::{Adam, StackGrad};
use crate::protopnet::{
    argmax_first, log_similarity, min_distances, push_with_latents, similarity_derivative, LatentGrid, ProtoPNet,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_backbone: f64,
    pub lr_prototypes: f64,
    pub lr_head: f64,
    pub cluster_weight: f64,
    pub separation_weight: f64,
    pub l1_weight: f64,
    pub push_period: usize,
    pub batch_size: usize,
    /// Full-batch Adam steps of the head-only refit after each push.
    pub head_refit_steps: usize,
    pub head_refit_lr: f64,
    /// Single step decay: multiply all rates by `lr_decay_factor` from this epoch on.
    pub lr_decay_epoch: Option<usize>,
    pub lr_decay_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            warmup_epochs: 2,
            lr_backbone: 1e-3,
            lr_prototypes: 3e-3,
            lr_head: 1e-3,
            cluster_weight: 0.8,
            separation_weight: 0.08,
            l1_weight: 1e-4,
            push_period: 10,
            batch_size: 32,
            head_refit_steps: 200,
            head_refit_lr: 1e-2,
            lr_decay_epoch: None,
            lr_decay_factor: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.push_period >= 1, Config, "push period must be at least 1");
        ensure!(self.batch_size >= 1, Config, "batch size must be at least 1");
        for (name, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_prototypes", self.lr_prototypes),
            ("lr_head", self.lr_head),
            ("head_refit_lr", self.head_refit_lr),
        ] {
            ensure!(v > 0.0 && v.is_finite(), Config, "{name} must be positive, got {v}");
        }
        for (name, v) in [
            ("cluster_weight", self.cluster_weight),
            ("separation_weight", self.separation_weight),
            ("l1_weight", self.l1_weight),
        ] {
            ensure!(v >= 0.0 && v.is_finite(), Config, "{name} must be non-negative, got {v}");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub cluster: f64,
    pub separation: f64,
    pub l1: f64,
}

impl LossParts {
    pub fn total(&self, cfg: &TrainConfig) -> f64 {
        self.ce + cfg.cluster_weight * self.cluster - cfg.separation_weight * self.separation + cfg.l1_weight * self.l1
    }
}

/// Gradients of the training objective.
#[derive(Clone, Debug)]
pub struct ModelGrad {
    pub backbone: Option<StackGrad>,
    /// `m × D`, prototype-major.
    pub prototypes: Vec<f64>,
    pub head: Vec<f64>,
}

/// L1 norm of the head entries connecting prototypes to classes other than their own.
pub fn off_class_l1(model: &ProtoPNet) -> f64 {
    let m = model.prototypes.len();
    let mut sum = 0.0;
    for k in 0..model.config.num_classes {
        for (j, p) in model.prototypes.iter().enumerate() {
            if p.class_id != k {
                sum += model.head.weights[k * m + j].abs();
            }
        }
    }
    sum
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

struct ImageTerms {
    parts: LossParts,
    logits: Vec<f64>,
}

/// Per-image loss terms and their gradients, accumulated into `grad`.
fn image_loss_grad(
    model: &ProtoPNet,
    image: &LabeledImage,
    cfg: &TrainConfig,
    grad: Option<&mut ModelGrad>,
) -> Result<ImageTerms> {
    let need_grad = grad.is_some();
    let need_backbone = grad.as_ref().is_some_and(|g| g.backbone.is_some());
    let (grid, trace) = if need_backbone {
        let (g, t) = model.backbone.forward_trace(&image.pixels)?;
        (g, Some(t))
    } else {
        (model.backbone.forward(image)?, None)
    };
    let eps = model.config.eps;
    let protos = &model.prototypes;
    let m = protos.len();
    let k_classes = model.config.num_classes;
    let y = image.class_id;

    let matches = min_distances(&grid, protos);
    let sims: Vec<f64> = matches.iter().map(|mt| log_similarity(mt.distance, eps)).collect();
    let logits: Vec<f64> = model
        .head
        .weights
        .chunks(m)
        .map(|row| row.iter().zip(&sims).map(|(w, s)| w * s).sum())
        .collect();
    let log_probs = log_softmax(&logits);
    let ce = -log_probs[y];

    let nearest_in = |own: bool| {
        (0..m)
            .filter(|&j| (protos[j].class_id == y) == own)
            .min_by(|&a, &b| matches[a].distance.total_cmp(&matches[b].distance))
    };
    let cluster_j = nearest_in(true);
    let sep_j = nearest_in(false);
    let parts = LossParts {
        ce,
        cluster: cluster_j.map_or(0.0, |j| matches[j].distance),
        separation: sep_j.map_or(0.0, |j| matches[j].distance),
        l1: 0.0,
    };

    if let Some(grad) = grad {
        debug_assert!(need_grad);
        let dlogits: Vec<f64> = log_probs
            .iter()
            .enumerate()
            .map(|(k, lp)| lp.exp() - if k == y { 1.0 } else { 0.0 })
            .collect();
        for k in 0..k_classes {
            for j in 0..m {
                grad.head[k * m + j] += dlogits[k] * sims[j];
            }
        }
        let mut ddist = vec![0.0; m];
        for j in 0..m {
            let dsim: f64 = (0..k_classes).map(|k| model.head.weights[k * m + j] * dlogits[k]).sum();
            ddist[j] = dsim * similarity_derivative(matches[j].distance, eps);
        }
        if let Some(j) = cluster_j {
            ddist[j] += cfg.cluster_weight;
        }
        if let Some(j) = sep_j {
            ddist[j] -= cfg.separation_weight;
        }
        let d = grid.depth;
        let mut dlatent = vec![0.0; grid.values.len()];
        for j in 0..m {
            if ddist[j] == 0.0 {
                continue;
            }
            let loc = matches[j].location;
            let z = grid.patch(loc);
            for t in 0..d {
                let diff = 2.0 * ddist[j] * (z[t] - protos[j].vector[t]);
                dlatent[loc * d + t] += diff;
                grad.prototypes[j * d + t] -= diff;
            }
        }
        if let (Some(bg), Some(trace)) = (grad.backbone.as_mut(), trace.as_ref()) {
            let (g, _) = model.backbone.backward(trace, &dlatent, false);
            bg.add_assign(&g);
        }
    }
    Ok(ImageTerms { parts, logits })
}

fn zero_grad(model: &ProtoPNet, with_backbone: bool) -> ModelGrad {
    ModelGrad {
        backbone: with_backbone.then(|| StackGrad::zeros_like(&model.backbone.stack)),
        prototypes: vec![0.0; model.prototypes.len() * model.config.depth],
        head: vec![0.0; model.head.weights.len()],
    }
}

/// Batch-mean loss terms plus the batch-level L1 term.
pub fn training_loss(model: &ProtoPNet, batch: &[&LabeledImage], cfg: &TrainConfig) -> Result<(f64, LossParts)> {
    ensure!(!batch.is_empty(), Validation, "training batch is empty");
    let mut parts = LossParts::default();
    for im in batch {
        let t = image_loss_grad(model, im, cfg, None)?.parts;
        parts.ce += t.ce;
        parts.cluster += t.cluster;
        parts.separation += t.separation;
    }
    let n = batch.len() as f64;
    parts.ce /= n;
    parts.cluster /= n;
    parts.separation /= n;
    parts.l1 = off_class_l1(model);
    Ok((parts.total(cfg), parts))
}

/// Loss, gradients and per-image logits for one batch.
pub fn loss_and_grad(
    model: &ProtoPNet,
    batch: &[&LabeledImage],
    cfg: &TrainConfig,
    with_backbone: bool,
) -> Result<(LossParts, ModelGrad, Vec<Vec<f64>>)> {
    ensure!(!batch.is_empty(), Validation, "training batch is empty");
    let mut grad = zero_grad(model, with_backbone);
    let mut parts = LossParts::default();
    let mut all_logits = Vec::with_capacity(batch.len());
    for im in batch {
        let t = image_loss_grad(model, im, cfg, Some(&mut grad))?;
        parts.ce += t.parts.ce;
        parts.cluster += t.parts.cluster;
        parts.separation += t.parts.separation;
        all_logits.push(t.logits);
    }
    let n = batch.len() as f64;
    parts.ce /= n;
    parts.cluster /= n;
    parts.separation /= n;
    parts.l1 = off_class_l1(model);
    grad.prototypes.iter_mut().for_each(|v| *v /= n);
    grad.head.iter_mut().for_each(|v| *v /= n);
    if let Some(bg) = grad.backbone.as_mut() {
        bg.scale(1.0 / n);
    }
    let m = model.prototypes.len();
    for k in 0..model.config.num_classes {
        for (j, p) in model.prototypes.iter().enumerate() {
            if p.class_id != k {
                grad.head[k * m + j] += cfg.l1_weight * model.head.weights[k * m + j].signum();
            }
        }
    }
    Ok((parts, grad, all_logits))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Joint,
}

/// One line of the training metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub total: f64,
    pub ce: f64,
    pub cluster: f64,
    pub separation: f64,
    pub l1: f64,
    /// Running accuracy over the epoch's batches, before each update.
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub pushed: bool,
    /// Train accuracy on the full training set before/after the head refit.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refit: Option<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ProtoPNet,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_test_accuracy: f64,
}

pub fn accuracy(model: &ProtoPNet, images: &[&LabeledImage]) -> Result<f64> {
    ensure!(!images.is_empty(), Validation, "accuracy over an empty image set");
    let mut correct = 0usize;
    for im in images {
        if model.predict(im)? == im.class_id {
            correct += 1;
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

fn latents(model: &ProtoPNet, images: &[&LabeledImage]) -> Result<Vec<LatentGrid>> {
    images.iter().map(|im| model.latent(im)).collect()
}

/// Projects prototypes onto their nearest same-class training patch.
pub fn push(model: &mut ProtoPNet, push_set: &[&LabeledImage]) -> Result<()> {
    let grids = latents(model, push_set)?;
    model.prototypes = push_with_latents(&model.prototypes, push_set, &grids)?;
    Ok(())
}

/// Convex head-only refit on cached similarity vectors. Keeps the previous
/// head if the refit would lose more than one point of train accuracy.
pub fn refit_head(model: &mut ProtoPNet, train: &[&LabeledImage], cfg: &TrainConfig) -> Result<(f64, f64)> {
    let m = model.prototypes.len();
    let k_classes = model.config.num_classes;
    let sims: Vec<Vec<f64>> = train
        .iter()
        .map(|im| {
            let g = model.latent(im)?;
            Ok(min_distances(&g, &model.prototypes)
                .into_iter()
                .map(|mt| log_similarity(mt.distance, model.config.eps))
                .collect())
        })
        .collect::<Result<_>>()?;
    let acc_of = |w: &[f64]| {
        let correct = sims
            .iter()
            .zip(train)
            .filter(|(s, im)| {
                let logits: Vec<f64> = w.chunks(m).map(|row| row.iter().zip(s.iter()).map(|(a, b)| a * b).sum()).collect();
                argmax_first(&logits) == im.class_id
            })
            .count();
        correct as f64 / train.len() as f64
    };
    let before = acc_of(&model.head.weights);
    let mut w = model.head.weights.clone();
    let mut opt = Adam::new(cfg.head_refit_lr);
    let n = train.len() as f64;
    for _ in 0..cfg.head_refit_steps {
        let mut g = vec![0.0; w.len()];
        for (s, im) in sims.iter().zip(train) {
            let logits: Vec<f64> = w.chunks(m).map(|row| row.iter().zip(s).map(|(a, b)| a * b).sum()).collect();
            let lp = log_softmax(&logits);
            for k in 0..k_classes {
                let d = lp[k].exp() - if k == im.class_id { 1.0 } else { 0.0 };
                for j in 0..m {
                    g[k * m + j] += d * s[j] / n;
                }
            }
        }
        for k in 0..k_classes {
            for (j, p) in model.prototypes.iter().enumerate() {
                if p.class_id != k {
                    g[k * m + j] += cfg.l1_weight * w[k * m + j].signum();
                }
            }
        }
        opt.step(vec![w.as_mut_slice()], vec![g.as_slice()]);
    }
    let after = acc_of(&w);
    if after + 0.01 >= before && w.iter().all(|v| v.is_finite()) {
        model.head.weights = w;
        Ok((before, after))
    } else {
        log::warn!("head refit lowered train accuracy {before:.4} -> {after:.4}; keeping previous head");
        Ok((before, before))
    }
}

struct Optimizers {
    backbone: Adam,
    prototypes: Adam,
    head: Adam,
}

fn apply_grad(model: &mut ProtoPNet, grad: &ModelGrad, opt: &mut Optimizers) {
    if let Some(bg) = &grad.backbone {
        opt.backbone.step(model.backbone.stack.params_mut(), bg.tensors());
    }
    let d = model.config.depth;
    let mut flat: Vec<f64> = model.prototypes.iter().flat_map(|p| p.vector.iter().copied()).collect();
    opt.prototypes.step(vec![flat.as_mut_slice()], vec![grad.prototypes.as_slice()]);
    for (j, p) in model.prototypes.iter_mut().enumerate() {
        p.vector.copy_from_slice(&flat[j * d..(j + 1) * d]);
        p.source = None;
    }
    opt.head.step(vec![model.head.weights.as_mut_slice()], vec![grad.head.as_slice()]);
}

/// Runs the staged loop and returns the push-epoch checkpoint with the best
/// test accuracy. With zero epochs the model is only pushed.
pub fn train(mut model: ProtoPNet, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.validate()?;
    ensure!(
        data.num_classes == model.config.num_classes,
        Config,
        "dataset has {} classes but the model expects {}",
        data.num_classes,
        model.config.num_classes
    );
    let train_set: Vec<&LabeledImage> = data.split(Split::Train).collect();
    let push_set: Vec<&LabeledImage> = data.train_originals().collect();
    let test_set: Vec<&LabeledImage> = data.split(Split::Test).collect();
    ensure!(!train_set.is_empty() && !test_set.is_empty(), Validation, "dataset needs train and test images");

    if cfg.epochs == 0 {
        push(&mut model, &push_set)?;
        let acc = accuracy(&model, &test_set)?;
        return Ok(TrainOutcome {
            model,
            log: Vec::new(),
            best_epoch: 0,
            best_test_accuracy: acc,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizers {
        backbone: Adam::new(cfg.lr_backbone),
        prototypes: Adam::new(cfg.lr_prototypes),
        head: Adam::new(cfg.lr_head),
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ProtoPNet)> = None;

    for epoch in 1..=cfg.epochs {
        let phase = if epoch <= cfg.warmup_epochs { Phase::Warmup } else { Phase::Joint };
        let decay = match cfg.lr_decay_epoch {
            Some(e) if epoch >= e => cfg.lr_decay_factor,
            _ => 1.0,
        };
        opt.backbone.lr = cfg.lr_backbone * decay;
        opt.prototypes.lr = cfg.lr_prototypes * decay;
        opt.head.lr = cfg.lr_head * decay;

        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        let mut total = 0.0;
        let mut correct = 0usize;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledImage> = chunk.iter().map(|&i| train_set[i]).collect();
            let (parts, grad, logits) = loss_and_grad(&model, &batch, cfg, phase == Phase::Joint)?;
            let loss = parts.total(cfg);
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch}, batch {batches}: ce={} cluster={} sep={}",
                    parts.ce, parts.cluster, parts.separation
                )));
            }
            correct += logits
                .iter()
                .zip(&batch)
                .filter(|(l, im)| argmax_first(l) == im.class_id)
                .count();
            total += loss;
            sums.ce += parts.ce;
            sums.cluster += parts.cluster;
            sums.separation += parts.separation;
            sums.l1 += parts.l1;
            batches += 1;
            apply_grad(&mut model, &grad, &mut opt);
        }
        let nb = batches as f64;

        let pushed = epoch % cfg.push_period == 0 || epoch == cfg.epochs;
        let mut refit = None;
        if pushed {
            push(&mut model, &push_set)?;
            if cfg.head_refit_steps > 0 {
                refit = Some(refit_head(&mut model, &train_set, cfg)?);
            }
        }
        let test_accuracy = accuracy(&model, &test_set)?;
        if pushed && best.as_ref().is_none_or(|(acc, _, _)| test_accuracy >= *acc) {
            best = Some((test_accuracy, epoch, model.clone()));
        }
        let record = EpochRecord {
            epoch,
            phase,
            total: total / nb,
            ce: sums.ce / nb,
            cluster: sums.cluster / nb,
            separation: sums.separation / nb,
            l1: sums.l1 / nb,
            train_accuracy: correct as f64 / train_set.len() as f64,
            test_accuracy,
            pushed,
            refit,
        };
        log::info!(
            "epoch {epoch:>3} {:?} loss {:.4} (ce {:.4} clst {:.4} sep {:.4}) train {:.3} test {:.3}{}",
            phase,
            record.total,
            record.ce,
            record.cluster,
            record.separation,
            record.train_accuracy,
            record.test_accuracy,
            if pushed { " [push]" } else { "" }
        );
        log.push(record);
    }
    let (best_test_accuracy, best_epoch, model) = best.expect("the last epoch always pushes");
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_test_accuracy,
    })
}

/// Writes the log as line-delimited JSON.
pub fn write_log<T: Serialize>(path: &std::path::Path, records: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io_at(path, e))
}
