use serde::{Deserialize, Serialize};

use super::{LatentGrid, Prototype};
use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityVector {
    pub scores: Vec<f64>,
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `log((d² + 1) / (d² + eps))`, strictly decreasing in `d²` and positive for
/// `eps < 1`.
#[inline]
pub fn log_similarity(d2: f64, eps: f64) -> f64 {
    ((1.0 - eps) / (d2 + eps)).ln_1p()
}

/// Derivative of [`log_similarity`] with respect to `d²`.
#[inline]
pub fn similarity_derivative(d2: f64, eps: f64) -> f64 {
    1.0 / (d2 + 1.0) - 1.0 / (d2 + eps)
}

pub fn similarity(patch: &[f64], proto: &Prototype, eps: f64) -> Result<f64> {
    ensure!(eps > 0.0 && eps < 1.0, Contract, "eps must lie in (0,1), got {eps}");
    ensure!(
        patch.len() == proto.vector.len(),
        Contract,
        "patch depth {} != prototype depth {}",
        patch.len(),
        proto.vector.len()
    );
    ensure!(
        patch.iter().chain(&proto.vector).all(|v| v.is_finite()),
        Contract,
        "non-finite value in patch or prototype {}",
        proto.id
    );
    Ok(log_similarity(squared_distance(patch, &proto.vector), eps))
}

/// Gradient of [`similarity`] with respect to the prototype vector.
pub fn similarity_gradient(patch: &[f64], vector: &[f64], eps: f64) -> Vec<f64> {
    let d2 = squared_distance(patch, vector);
    let g = similarity_derivative(d2, eps);
    patch.iter().zip(vector).map(|(z, p)| -2.0 * g * (z - p)).collect()
}

/// Closest patch to one prototype.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchMatch {
    pub distance: f64,
    /// Patch index `row * width + col`; the first one wins ties.
    pub location: usize,
}

pub fn min_distances(grid: &LatentGrid, protos: &[Prototype]) -> Vec<PatchMatch> {
    protos
        .iter()
        .map(|p| {
            let mut best = PatchMatch {
                distance: f64::INFINITY,
                location: 0,
            };
            for (loc, patch) in grid.patches().enumerate() {
                let d = squared_distance(patch, &p.vector);
                if d < best.distance {
                    best = PatchMatch { distance: d, location: loc };
                }
            }
            best
        })
        .collect()
}

/// Max-pooled similarity of every prototype over all patches of `grid`.
pub fn prototype_layer_forward(grid: &LatentGrid, protos: &[Prototype], eps: f64) -> Result<SimilarityVector> {
    ensure!(eps > 0.0 && eps < 1.0, Contract, "eps must lie in (0,1), got {eps}");
    for p in protos {
        ensure!(
            p.vector.len() == grid.depth,
            Contract,
            "prototype {} has depth {} but the latent grid has depth {}",
            p.id,
            p.vector.len(),
            grid.depth
        );
    }
    // The similarity is monotone in distance, so the max over patches sits at the nearest one.
    let scores = min_distances(grid, protos)
        .into_iter()
        .map(|m| log_similarity(m.distance, eps))
        .collect();
    Ok(SimilarityVector { scores })
}
