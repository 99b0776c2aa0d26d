//! Human (or oracle) feedback: rating records, the rubric, the rating task
//! pool and its HTTP service, and the induced pairwise comparison dataset.

mod server;
mod store;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SyntheticSample;
use crate::error::{ensure, Result};
use crate::protopnet::ActivationMap;

pub use server::{heatmap_overlay, jet, RatingServer, Renderer};
pub use store::{
    build_task_pool, oracle_rate_tasks, FeedbackService, Progress, RatingStore, RatingSubmission, RatingTask, TaskPool, TaskSpec,
};

/// One rater's 1–5 judgement of one (image, prototype) heatmap.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub rating_id: String,
    pub image_id: String,
    pub prototype_id: usize,
    pub model_id: String,
    pub rating: u8,
    pub rater_id: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl RatingRecord {
    pub fn key(&self) -> (String, usize, String, String) {
        (self.image_id.clone(), self.prototype_id, self.model_id.clone(), self.rater_id.clone())
    }

    pub fn item(&self) -> ItemRef {
        ItemRef {
            image_id: self.image_id.clone(),
            prototype_id: self.prototype_id,
        }
    }
}

pub fn validate_rating(rating: i64) -> Result<u8> {
    ensure!((1..=5).contains(&rating), Validation, "rating must be an integer in 1..=5, got {rating}");
    Ok(rating as u8)
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemRef {
    pub image_id: String,
    pub prototype_id: usize,
}

/// Induced preference between two rated items. `c = -1` when the left item
/// was rated higher, `+1` when the right one was.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub model_id: String,
    pub left: ItemRef,
    pub right: ItemRef,
    pub c: i8,
}

impl ComparisonRecord {
    pub fn swapped(&self) -> Self {
        Self {
            model_id: self.model_id.clone(),
            left: self.right.clone(),
            right: self.left.clone(),
            c: -self.c,
        }
    }

    /// The preferred item first.
    pub fn winner_loser(&self) -> (&ItemRef, &ItemRef) {
        if self.c < 0 {
            (&self.left, &self.right)
        } else {
            (&self.right, &self.left)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricLevel {
    pub rating: u8,
    pub label: String,
    pub description: String,
}

/// The 1–5 rubric shown to raters. Levels 4–5 mean high quality, 1–2 low
/// quality and 3 unclear.
pub fn rubric() -> Vec<RubricLevel> {
    let levels = [
        (5, "Excellent", "Activation sits on the object and covers a single, clearly identifiable part."),
        (4, "Good", "Activation is mostly on the object with minor spill onto the background."),
        (3, "Unclear", "Activation is split between object and background, or the part is hard to identify."),
        (2, "Poor", "Activation is mostly on background or on an irrelevant region."),
        (1, "Spurious", "Activation ignores the object entirely."),
    ];
    levels
        .into_iter()
        .map(|(rating, label, description)| RubricLevel {
            rating,
            label: label.into(),
            description: description.into(),
        })
        .collect()
}

/// Splits rated items into train/test item sets, then pairs every two items
/// within a side whose ratings differ. Which item goes on the left is a
/// seeded coin flip, so `c` carries no information about item order. An item
/// rated by several raters uses its mean rating.
pub fn build_comparisons(
    ratings: &[RatingRecord],
    split_seed: u64,
    test_fraction: f64,
) -> Result<(Vec<ComparisonRecord>, Vec<ComparisonRecord>)> {
    ensure!(ratings.len() >= 2, Validation, "need at least 2 ratings, got {}", ratings.len());
    ensure!(
        (0.0..1.0).contains(&test_fraction),
        Config,
        "test fraction must lie in [0, 1), got {test_fraction}"
    );
    let model_id = &ratings[0].model_id;
    ensure!(
        ratings.iter().all(|r| &r.model_id == model_id),
        Validation,
        "ratings span several models; build comparisons per model"
    );
    let mut sums: BTreeMap<ItemRef, (f64, usize)> = BTreeMap::new();
    for r in ratings {
        validate_rating(r.rating as i64)?;
        let e = sums.entry(r.item()).or_default();
        e.0 += r.rating as f64;
        e.1 += 1;
    }
    let mut items: Vec<(ItemRef, f64)> = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let n_test = (items.len() as f64 * test_fraction).round() as usize;
    let mut test_items = items.split_off(items.len() - n_test);
    let mut train_items = items;
    train_items.sort_by(|a, b| a.0.cmp(&b.0));
    test_items.sort_by(|a, b| a.0.cmp(&b.0));
    let mut orient = ChaCha8Rng::seed_from_u64(split_seed ^ 0x0F11_9C0A_5EED_0001);
    let mut pair = |side: &[(ItemRef, f64)]| {
        let mut out = Vec::new();
        for i in 0..side.len() {
            for j in i + 1..side.len() {
                if side[i].1 == side[j].1 {
                    continue;
                }
                let (l, r) = if orient.gen::<bool>() { (&side[j], &side[i]) } else { (&side[i], &side[j]) };
                out.push(ComparisonRecord {
                    model_id: model_id.clone(),
                    left: l.0.clone(),
                    right: r.0.clone(),
                    c: if l.1 > r.1 { -1 } else { 1 },
                });
            }
        }
        out
    };
    Ok((pair(&train_items), pair(&test_items)))
}

/// Fraction of the top 5% display pixels that lie inside the object mask.
pub fn mask_overlap(sample: &SyntheticSample<'_>, map: &ActivationMap) -> Result<f64> {
    let size = sample.object_mask.size;
    ensure!(
        map.size == size && map.display.len() == size * size,
        Contract,
        "activation map is {}x{} but the mask is {size}x{size}",
        map.size,
        map.size
    );
    let n_top = ((size * size) as f64 * 0.05).ceil() as usize;
    let mut order: Vec<usize> = (0..size * size).collect();
    // Highest activation first, lower pixel index first on ties.
    order.sort_by(|&a, &b| map.display[b].total_cmp(&map.display[a]).then(a.cmp(&b)));
    let inside = order[..n_top].iter().filter(|&&i| sample.object_mask.bits[i]).count();
    Ok(inside as f64 / n_top as f64)
}

/// Automated stand-in for a human rater, keyed on how much of the strongest
/// activation lands on the object. A flat map highlights nothing and gets 1.
pub fn oracle_rate(sample: &SyntheticSample<'_>, map: &ActivationMap) -> Result<u8> {
    let rho = mask_overlap(sample, map)?;
    let flat = map.display.iter().all(|v| *v == map.display[0]);
    Ok(if flat { 1 } else { rating_from_overlap(rho) })
}

pub fn rating_from_overlap(rho: f64) -> u8 {
    match rho {
        r if r >= 0.9 => 5,
        r if r >= 0.7 => 4,
        r if r >= 0.5 => 3,
        r if r >= 0.25 => 2,
        _ => 1,
    }
}

pub fn write_jsonl<T: Serialize>(path: &std::path::Path, records: &[T]) -> Result<()> {
    crate::train::write_log(path, records)
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io_at(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| crate::Error::Validation(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}
