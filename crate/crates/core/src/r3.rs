//! Reward-driven prototype updates: reweighing low-reward prototypes toward
//! nearby high-reward patches, reselecting very-low-reward prototypes from
//! random same-class patches, and retraining.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledImage};
use crate::error::{ensure, Result};
use crate::protopnet::{activation_from_latent, squared_distance, LatentGrid, PatchSource, ProtoPNet, Prototype};
use crate::reward::RewardScorer;
use crate::train::{train, TrainConfig, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct R3Config {
    /// Reweigh prototypes whose mean reward is below this.
    pub gamma: f64,
    /// Reselect prototypes whose mean reward is below this.
    pub alpha: f64,
    /// Accept a reselection candidate only above this mean reward.
    pub beta: f64,
    pub lambda_dist: f64,
    pub reweigh_steps: usize,
    pub step_size: f64,
    pub max_candidates: usize,
    pub seed: u64,
}

impl Default for R3Config {
    fn default() -> Self {
        Self {
            gamma: 0.45,
            alpha: 0.15,
            beta: 0.50,
            lambda_dist: 100.0,
            reweigh_steps: 50,
            step_size: 0.1,
            max_candidates: 200,
            seed: 0,
        }
    }
}

impl R3Config {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            0.0 < self.alpha && self.alpha < self.beta && self.beta <= 1.0,
            Config,
            "need 0 < alpha < beta <= 1, got alpha={} beta={}",
            self.alpha,
            self.beta
        );
        ensure!(
            self.alpha < self.gamma && self.gamma < 1.0,
            Config,
            "gamma must lie in (alpha, 1), got {}",
            self.gamma
        );
        ensure!(self.lambda_dist > 0.0, Config, "lambda_dist must be positive");
        ensure!(self.step_size > 0.0 && self.step_size.is_finite(), Config, "step size must be positive");
        ensure!(self.max_candidates >= 1, Config, "need at least one reselection candidate");
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Kept,
    Reweighed,
    Reselected,
}

/// One line of the per-prototype change report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeEntry {
    pub prototype_id: usize,
    pub action: Action,
    pub mean_reward_before: f64,
    pub mean_reward_after: f64,
    pub source_before: Option<PatchSource>,
    pub source_after: Option<PatchSource>,
}

fn nearest_patch<'a>(grid: &'a LatentGrid, vector: &[f64]) -> (&'a [f64], f64) {
    grid.patches()
        .map(|z| (z, squared_distance(z, vector)))
        .fold((grid.patch(0), f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// `Σ_i r_i / (λ‖z_i* − p‖² + 1)` with `z_i*` the patch of image `i` nearest to `p`.
pub fn reweigh_objective_terms(vector: &[f64], latents: &[&LatentGrid], rewards: &[f64], lambda_dist: f64) -> f64 {
    latents
        .iter()
        .zip(rewards)
        .map(|(g, r)| r / (lambda_dist * nearest_patch(g, vector).1 + 1.0))
        .sum()
}

/// Gradient of [`reweigh_objective_terms`] in `vector`, rewards held fixed.
pub fn reweigh_gradient(vector: &[f64], latents: &[&LatentGrid], rewards: &[f64], lambda_dist: f64) -> Vec<f64> {
    let mut grad = vec![0.0; vector.len()];
    for (g, r) in latents.iter().zip(rewards) {
        let (z, d) = nearest_patch(g, vector);
        let denom = lambda_dist * d + 1.0;
        let coef = 2.0 * r * lambda_dist / (denom * denom);
        for ((gv, zv), pv) in grad.iter_mut().zip(z).zip(vector) {
            *gv += coef * (zv - pv);
        }
    }
    grad
}

/// Per-image rewards of a prototype vector, using precomputed latents.
fn rewards_for(
    scorer: &dyn RewardScorer,
    proto: &Prototype,
    images: &[&LabeledImage],
    latents: &[&LatentGrid],
    eps: f64,
) -> Result<Vec<f64>> {
    images
        .iter()
        .zip(latents)
        .map(|(im, g)| scorer.score(im, &activation_from_latent(g, proto, eps, im.size())?))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Reweighing objective of prototype index `proto` over `images`, with rewards
/// from `scorer` at the current prototype.
pub fn reweigh_objective(
    model: &ProtoPNet,
    proto: usize,
    images: &[&LabeledImage],
    scorer: &dyn RewardScorer,
    lambda_dist: f64,
) -> Result<f64> {
    ensure!(!images.is_empty(), Validation, "reweigh objective over no images");
    let p = &model.prototypes[proto];
    let grids = images.iter().map(|im| model.latent(im)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&LatentGrid> = grids.iter().collect();
    let rewards = rewards_for(scorer, p, images, &refs, model.config.eps)?;
    Ok(reweigh_objective_terms(&p.vector, &refs, &rewards, lambda_dist))
}

/// Latents of the un-augmented training images, grouped by class.
pub struct ClassLatents<'a> {
    images: Vec<Vec<&'a LabeledImage>>,
    grids: Vec<Vec<LatentGrid>>,
}

impl<'a> ClassLatents<'a> {
    pub fn new(model: &ProtoPNet, images: impl IntoIterator<Item = &'a LabeledImage>) -> Result<Self> {
        let k = model.config.num_classes;
        let mut out = Self {
            images: vec![Vec::new(); k],
            grids: (0..k).map(|_| Vec::new()).collect(),
        };
        for im in images {
            ensure!(im.class_id < k, Validation, "image {} has class {} >= {k}", im.id, im.class_id);
            out.grids[im.class_id].push(model.latent(im)?);
            out.images[im.class_id].push(im);
        }
        Ok(out)
    }

    fn class(&self, k: usize) -> Result<(&[&'a LabeledImage], Vec<&LatentGrid>)> {
        ensure!(!self.images[k].is_empty(), Validation, "class {k} has no images");
        Ok((&self.images[k], self.grids[k].iter().collect()))
    }

    pub fn mean_reward(&self, scorer: &dyn RewardScorer, proto: &Prototype, eps: f64) -> Result<f64> {
        let (ims, grids) = self.class(proto.class_id)?;
        Ok(mean(&rewards_for(scorer, proto, ims, &grids, eps)?))
    }
}

/// Gradient ascent on the Reweighing objective for every prototype whose mean
/// reward is below `gamma`. Only prototype vectors (and their source
/// fields) change.
pub fn reweigh_update(
    model: &ProtoPNet,
    scorer: &dyn RewardScorer,
    train_originals: &[&LabeledImage],
    cfg: &R3Config,
) -> Result<(ProtoPNet, Vec<ChangeEntry>)> {
    cfg.validate()?;
    let cache = ClassLatents::new(model, train_originals.iter().copied())?;
    reweigh_with(model, scorer, &cache, cfg)
}

fn reweigh_with(
    model: &ProtoPNet,
    scorer: &dyn RewardScorer,
    cache: &ClassLatents<'_>,
    cfg: &R3Config,
) -> Result<(ProtoPNet, Vec<ChangeEntry>)> {
    let eps = model.config.eps;
    let mut out = model.clone();
    let mut report = Vec::with_capacity(model.prototypes.len());
    for (j, proto) in model.prototypes.iter().enumerate() {
        let (ims, grids) = cache.class(proto.class_id)?;
        let before = mean(&rewards_for(scorer, proto, ims, &grids, eps)?);
        if before >= cfg.gamma {
            report.push(entry(proto, proto, Action::Kept, before, before));
            continue;
        }
        let mut p = proto.clone();
        let mut step = cfg.step_size;
        let mut rewards = rewards_for(scorer, &p, ims, &grids, eps)?;
        for _ in 0..cfg.reweigh_steps {
            let obj = reweigh_objective_terms(&p.vector, &grids, &rewards, cfg.lambda_dist);
            let grad = reweigh_gradient(&p.vector, &grids, &rewards, cfg.lambda_dist);
            if grad.iter().all(|g| *g == 0.0) {
                break;
            }
            let mut accepted = None;
            for _ in 0..30 {
                let cand: Vec<f64> = p.vector.iter().zip(&grad).map(|(v, g)| v + step * g).collect();
                let cand_obj = reweigh_objective_terms(&cand, &grids, &rewards, cfg.lambda_dist);
                if cand_obj.is_finite() && cand_obj >= obj {
                    accepted = Some(cand);
                    break;
                }
                step *= 0.5;
            }
            let Some(cand) = accepted else { break };
            if cand == p.vector {
                break;
            }
            p.vector = cand;
            rewards = rewards_for(scorer, &p, ims, &grids, eps)?;
        }
        if !p.vector.iter().all(|v| v.is_finite()) {
            log::warn!("reweighing prototype {} diverged; reverting it", proto.id);
            report.push(entry(proto, proto, Action::Reweighed, before, before));
            continue;
        }
        if p.vector != proto.vector {
            p.source = None;
        }
        let after = mean(&rewards_for(scorer, &p, ims, &grids, eps)?);
        report.push(entry(proto, &p, Action::Reweighed, before, after));
        out.prototypes[j] = p;
    }
    Ok((out, report))
}

fn entry(before: &Prototype, after: &Prototype, action: Action, r0: f64, r1: f64) -> ChangeEntry {
    ChangeEntry {
        prototype_id: before.id,
        action,
        mean_reward_before: r0,
        mean_reward_after: r1,
        source_before: before.source.clone(),
        source_after: after.source.clone(),
    }
}

/// Replaces every prototype with mean reward below `alpha` by a random
/// same-class training patch whose mean reward exceeds `beta` and which no
/// prototype already equals.
pub fn reselect(
    model: &ProtoPNet,
    scorer: &dyn RewardScorer,
    train_originals: &[&LabeledImage],
    cfg: &R3Config,
) -> Result<(ProtoPNet, Vec<ChangeEntry>)> {
    cfg.validate()?;
    let cache = ClassLatents::new(model, train_originals.iter().copied())?;
    reselect_with(model, scorer, &cache, cfg)
}

fn reselect_with(
    model: &ProtoPNet,
    scorer: &dyn RewardScorer,
    cache: &ClassLatents<'_>,
    cfg: &R3Config,
) -> Result<(ProtoPNet, Vec<ChangeEntry>)> {
    let eps = model.config.eps;
    let mut out = model.clone();
    let mut report = Vec::with_capacity(model.prototypes.len());
    for j in 0..model.prototypes.len() {
        let proto = out.prototypes[j].clone();
        let (ims, grids) = cache.class(proto.class_id)?;
        let before = mean(&rewards_for(scorer, &proto, ims, &grids, eps)?);
        if before >= cfg.alpha {
            report.push(entry(&proto, &proto, Action::Kept, before, before));
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (proto.id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut best: Option<(f64, Prototype)> = None;
        let mut accepted = None;
        for _ in 0..cfg.max_candidates {
            let i = rng.gen_range(0..ims.len());
            let loc = rng.gen_range(0..grids[i].num_patches());
            let vector = grids[i].patch(loc).to_vec();
            if out.prototypes.iter().any(|p| p.vector == vector) {
                continue;
            }
            let cand = Prototype {
                id: proto.id,
                class_id: proto.class_id,
                vector,
                source: Some(PatchSource {
                    image_id: ims[i].id.clone(),
                    row: loc / grids[i].width,
                    col: loc % grids[i].width,
                }),
            };
            let r = mean(&rewards_for(scorer, &cand, ims, &grids, eps)?);
            if r > cfg.beta {
                accepted = Some((r, cand));
                break;
            }
            if r > cfg.alpha && best.as_ref().is_none_or(|(b, _)| r > *b) {
                best = Some((r, cand));
            }
        }
        match accepted.or_else(|| {
            if let Some((r, _)) = &best {
                log::warn!(
                    "prototype {}: no candidate above beta={} in {} draws; using best seen ({r:.3})",
                    proto.id,
                    cfg.beta,
                    cfg.max_candidates
                );
            }
            best
        }) {
            Some((r, cand)) => {
                report.push(entry(&proto, &cand, Action::Reselected, before, r));
                out.prototypes[j] = cand;
            }
            None => {
                log::warn!(
                    "prototype {}: no candidate above alpha={} in {} draws; left unchanged",
                    proto.id,
                    cfg.alpha,
                    cfg.max_candidates
                );
                report.push(entry(&proto, &proto, Action::Kept, before, before));
            }
        }
    }
    Ok((out, report))
}

/// Reweigh, then reselect whatever is still below `alpha`. The report has
/// one line per prototype covering both steps.
pub fn r2_update(
    model: &ProtoPNet,
    scorer: &dyn RewardScorer,
    train_originals: &[&LabeledImage],
    cfg: &R3Config,
) -> Result<(ProtoPNet, Vec<ChangeEntry>)> {
    cfg.validate()?;
    let cache = ClassLatents::new(model, train_originals.iter().copied())?;
    let (reweighed, first) = reweigh_with(model, scorer, &cache, cfg)?;
    let (mut out, second) = reselect_with(&reweighed, scorer, &cache, cfg)?;
    let report = first
        .into_iter()
        .zip(second)
        .map(|(a, b)| ChangeEntry {
            prototype_id: a.prototype_id,
            action: if b.action == Action::Reselected { b.action } else { a.action },
            mean_reward_before: a.mean_reward_before,
            mean_reward_after: b.mean_reward_after,
            source_before: a.source_before,
            source_after: b.source_after,
        })
        .collect();
    out.model_id = format!("{}+r2", model.model_id);
    Ok((out, report))
}

/// R2 followed by retraining with the base objective.
pub fn r3_update(
    model: &ProtoPNet,
    scorer: &dyn RewardScorer,
    data: &Dataset,
    train_cfg: &TrainConfig,
    cfg: &R3Config,
) -> Result<(ProtoPNet, Vec<ChangeEntry>, TrainOutcome)> {
    let originals: Vec<&LabeledImage> = data.train_originals().collect();
    let (r2, report) = r2_update(model, scorer, &originals, cfg)?;
    let outcome = train(r2, data, train_cfg)?;
    let mut retrained = outcome.model.clone();
    retrained.model_id = format!("{}+r3", model.model_id);
    Ok((retrained, report, outcome))
}
