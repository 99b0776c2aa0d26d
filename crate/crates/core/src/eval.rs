//! Metrics, reports and ensembles.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledImage, Split};
use crate::error::{ensure, Error, Result};
use crate::protopnet::{activation_from_latent, argmax_first, nearest_images, LatentGrid, ProtoPNet};
use crate::reward::RewardScorer;

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    R2,
    R3,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Base => "base",
            Stage::R2 => "r2",
            Stage::R3 => "r3",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Stage::Base),
            "r2" => Ok(Stage::R2),
            "r3" => Ok(Stage::R3),
            _ => Err(Error::Config(format!("unknown stage {s:?}; expected base, r2 or r3"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub top5: f64,
    pub top10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub stage: Stage,
    pub test_accuracy: f64,
    pub mean_reward: f64,
    /// Mean reward per prototype over its class's test images; `None` if
    /// the class has no test images.
    pub prototype_rewards: Vec<Option<f64>>,
    pub mismatch: Mismatch,
    /// Counts in 20 equal bins over `[0, 1]`.
    pub reward_histogram: Vec<u64>,
    pub scored_pairs: u64,
    /// Fraction of prototypes that peak inside the object mask on most of
    /// their class's test images; absent without masks.
    pub peak_in_mask: Option<f64>,
}

pub fn test_accuracy(model: &ProtoPNet, test: &[&LabeledImage]) -> Result<f64> {
    crate::train::accuracy(model, test)
}

fn histogram_bin(r: f64) -> usize {
    ((r.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardSummary {
    pub mean: f64,
    pub per_prototype: Vec<Option<f64>>,
    pub histogram: Vec<u64>,
    pub pairs: u64,
}

/// Rewards over every (test image, prototype) pair of matching class.
pub fn mean_test_reward(model: &ProtoPNet, scorer: &dyn RewardScorer, test: &[&LabeledImage]) -> Result<RewardSummary> {
    ensure!(!test.is_empty(), Validation, "reward evaluation over an empty test set");
    let grids = test.iter().map(|im| model.latent(im)).collect::<Result<Vec<LatentGrid>>>()?;
    let mut histogram = vec![0u64; HISTOGRAM_BINS];
    let mut per_prototype = Vec::with_capacity(model.prototypes.len());
    let (mut sum, mut pairs) = (0.0, 0u64);
    for p in &model.prototypes {
        let (mut psum, mut pn) = (0.0, 0usize);
        for (im, g) in test.iter().zip(&grids).filter(|(im, _)| im.class_id == p.class_id) {
            let r = scorer.score(im, &activation_from_latent(g, p, model.config.eps, im.size())?)?;
            histogram[histogram_bin(r)] += 1;
            psum += r;
            pn += 1;
        }
        sum += psum;
        pairs += pn as u64;
        per_prototype.push((pn > 0).then(|| psum / pn as f64));
    }
    ensure!(pairs > 0, Validation, "no test image shares a class with any prototype");
    Ok(RewardSummary {
        mean: sum / pairs as f64,
        per_prototype,
        histogram,
        pairs,
    })
}

/// Mean over prototypes of how many of its `l` nearest training images
/// (by closest patch) belong to another class.
pub fn class_mismatch(model: &ProtoPNet, train: &[&LabeledImage], l: usize) -> Result<f64> {
    let grids = train.iter().map(|im| model.latent(im)).collect::<Result<Vec<_>>>()?;
    class_mismatch_with_latents(model, train, &grids, l)
}

pub fn class_mismatch_with_latents(model: &ProtoPNet, train: &[&LabeledImage], grids: &[LatentGrid], l: usize) -> Result<f64> {
    ensure!(l >= 1, Config, "mismatch neighbourhood must be at least 1");
    ensure!(train.len() >= l, Validation, "class mismatch needs at least {l} training images, got {}", train.len());
    ensure!(!model.prototypes.is_empty(), Validation, "model has no prototypes");
    let near = nearest_images(&model.prototypes, train, grids, l);
    let total: usize = model
        .prototypes
        .iter()
        .zip(&near)
        .map(|(p, n)| n.iter().filter(|x| x.class_id != p.class_id).count())
        .sum();
    Ok(total as f64 / model.prototypes.len() as f64)
}

/// Fraction of prototypes whose upsampled activation peak lies inside the
/// object mask on a strict majority of their class's masked images.
pub fn peak_in_mask_fraction(model: &ProtoPNet, data: &Dataset, images: &[&LabeledImage]) -> Result<Option<f64>> {
    let masked: Vec<(&LabeledImage, LatentGrid)> = images
        .iter()
        .filter(|im| data.masks.contains_key(&im.id))
        .map(|im| Ok((*im, model.latent(im)?)))
        .collect::<Result<_>>()?;
    if masked.is_empty() {
        return Ok(None);
    }
    let mut inside = 0usize;
    for p in &model.prototypes {
        let (mut hits, mut n) = (0usize, 0usize);
        for (im, g) in masked.iter().filter(|(im, _)| im.class_id == p.class_id) {
            let map = activation_from_latent(g, p, model.config.eps, im.size())?;
            let (r, c) = map.upsampled_argmax();
            hits += data.masks[&im.id].get(r, c) as usize;
            n += 1;
        }
        if n > 0 && 2 * hits > n {
            inside += 1;
        }
    }
    Ok(Some(inside as f64 / model.prototypes.len() as f64))
}

/// Unweighted mean of the members' logits.
pub fn ensemble_predict(models: &[&ProtoPNet], image: &LabeledImage) -> Result<Vec<f64>> {
    ensure!(!models.is_empty(), Contract, "ensemble needs at least one model");
    let k = models[0].config.num_classes;
    let mut out = vec![0.0; k];
    for m in models {
        ensure!(
            m.config.num_classes == k,
            Contract,
            "ensemble member {} has {} classes, expected {k}",
            m.model_id,
            m.config.num_classes
        );
        for (o, v) in out.iter_mut().zip(m.forward(image)?.0) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= models.len() as f64);
    Ok(out)
}

pub fn ensemble_accuracy(models: &[&ProtoPNet], test: &[&LabeledImage]) -> Result<f64> {
    ensure!(!test.is_empty(), Validation, "accuracy over an empty image set");
    let mut correct = 0usize;
    for im in test {
        correct += (argmax_first(&ensemble_predict(models, im)?) == im.class_id) as usize;
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Computes every metric for one model. Mismatch searches the un-augmented
/// training images.
pub fn report(model: &ProtoPNet, stage: Stage, scorer: &dyn RewardScorer, data: &Dataset) -> Result<EvalReport> {
    let test: Vec<&LabeledImage> = data.split(Split::Test).collect();
    let train: Vec<&LabeledImage> = data.train_originals().collect();
    let rewards = mean_test_reward(model, scorer, &test)?;
    let grids = train.iter().map(|im| model.latent(im)).collect::<Result<Vec<_>>>()?;
    let out = EvalReport {
        model_id: model.model_id.clone(),
        stage,
        test_accuracy: test_accuracy(model, &test)?,
        mean_reward: rewards.mean,
        prototype_rewards: rewards.per_prototype,
        mismatch: Mismatch {
            top5: class_mismatch_with_latents(model, &train, &grids, 5.min(train.len()))?,
            top10: class_mismatch_with_latents(model, &train, &grids, 10.min(train.len()))?,
        },
        reward_histogram: rewards.histogram,
        scored_pairs: rewards.pairs,
        peak_in_mask: peak_in_mask_fraction(model, data, &test)?,
    };
    log::info!(
        "{} [{}]: accuracy {:.4}, mean reward {:.4}, top5 {:.3}, top10 {:.3}",
        out.model_id,
        stage,
        out.test_accuracy,
        out.mean_reward,
        out.mismatch.top5,
        out.mismatch.top10
    );
    Ok(out)
}

/// Fails with a conflict if `path` exists and `force` is off.
pub fn check_writable(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        return Err(Error::Conflict(format!("{} already exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

/// Writes `eval_<stage>.json` and `reward_hist_<stage>.png` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport, force: bool) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    let json = dir.join(format!("eval_{}.json", report.stage));
    let png = dir.join(format!("reward_hist_{}.png", report.stage));
    check_writable(&json, force)?;
    check_writable(&png, force)?;
    std::fs::write(&json, serde_json::to_vec_pretty(report)?).map_err(|e| Error::io_at(&json, e))?;
    histogram_image(&report.reward_histogram).save(&png)?;
    Ok((json, png))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let bytes = std::fs::read(path).map_err(|e| Error::io_at(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Bar chart of histogram counts, one 16-px bar per bin.
pub fn histogram_image(counts: &[u64]) -> RgbImage {
    const BAR: u32 = 16;
    const HEIGHT: u32 = 160;
    let max = counts.iter().copied().max().unwrap_or(0).max(1);
    let width = BAR * counts.len().max(1) as u32;
    let mut img = RgbImage::from_pixel(width, HEIGHT + 4, Rgb([255, 255, 255]));
    for (i, c) in counts.iter().enumerate() {
        let h = (*c as f64 / max as f64 * HEIGHT as f64).round() as u32;
        for x in i as u32 * BAR + 1..(i as u32 + 1) * BAR - 1 {
            for y in HEIGHT - h..HEIGHT {
                img.put_pixel(x, y, Rgb([60, 90, 170]));
            }
        }
    }
    for x in 0..width {
        for y in HEIGHT..HEIGHT + 4 {
            img.put_pixel(x, y, Rgb([0, 0, 0]));
        }
    }
    img
}

/// Stage comparison table, one row per report, sorted by stage.
pub fn write_stage_table(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut rows: Vec<&EvalReport> = reports.iter().collect();
    rows.sort_by(|a, b| (a.stage, &a.model_id).cmp(&(b.stage, &b.model_id)));
    let mut out = Vec::new();
    writeln!(out, "stage,model_id,accuracy,mean_reward,top5,top10")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.stage, r.model_id, r.test_accuracy, r.mean_reward, r.mismatch.top5, r.mismatch.top10
        )?;
    }
    std::fs::write(path, out).map_err(|e| Error::io_at(path, e))
}
