use serde::{Deserialize, Serialize};

use super::{log_similarity, squared_distance, Backbone, Prototype};
use crate::data::LabeledImage;
use crate::error::{ensure, Result};

/// Per-location similarity of one image to one prototype, at latent
/// resolution (`raw`), image resolution (`upsampled`) and min-max normalised
/// for display.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub grid_height: usize,
    pub grid_width: usize,
    pub raw: Vec<f64>,
    pub size: usize,
    pub upsampled: Vec<f64>,
    pub display: Vec<f64>,
}

impl ActivationMap {
    pub fn from_raw(raw: Vec<f64>, grid_height: usize, grid_width: usize, size: usize) -> Self {
        let upsampled = upsample_bilinear(&raw, grid_height, grid_width, size, size);
        let display = normalize(&upsampled);
        Self {
            grid_height,
            grid_width,
            raw,
            size,
            upsampled,
            display,
        }
    }

    pub fn raw_argmax(&self) -> (usize, usize) {
        let i = super::argmax_first(&self.raw);
        (i / self.grid_width, i % self.grid_width)
    }

    pub fn upsampled_argmax(&self) -> (usize, usize) {
        let i = super::argmax_first(&self.upsampled);
        (i / self.size, i % self.size)
    }

    /// Latent cell covering an image pixel under the upsampling ratio.
    pub fn cell_of_pixel(&self, row: usize, col: usize) -> (usize, usize) {
        (row * self.grid_height / self.size, col * self.grid_width / self.size)
    }
}

/// `(v - min) / (max - min)`, or all zeros for a constant input.
fn normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        values.iter().map(|v| (v - min) / (max - min)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// Bilinear resize with half-pixel centres (`align_corners = false`); source
/// coordinates are clamped at the borders.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w, "upsample input shape");
    let axis = |out: usize, n: usize| -> Vec<(usize, usize, f64)> {
        let scale = n as f64 / out as f64;
        (0..out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let rows = axis(out_h, h);
    let cols = axis(out_w, w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = (1.0 - fc) * src[r0 * w + c0] + fc * src[r0 * w + c1];
            let bottom = (1.0 - fc) * src[r1 * w + c0] + fc * src[r1 * w + c1];
            out.push((1.0 - fr) * top + fr * bottom);
        }
    }
    out
}

pub fn activation_map(backbone: &Backbone, proto: &Prototype, image: &LabeledImage, eps: f64) -> Result<ActivationMap> {
    let grid = backbone.forward(image)?;
    activation_from_latent(&grid, proto, eps, image.size())
}

pub(crate) fn activation_from_latent(
    grid: &super::LatentGrid,
    proto: &Prototype,
    eps: f64,
    size: usize,
) -> Result<ActivationMap> {
    ensure!(
        proto.vector.len() == grid.depth,
        Contract,
        "prototype {} depth {} != latent depth {}",
        proto.id,
        proto.vector.len(),
        grid.depth
    );
    let raw = grid
        .patches()
        .map(|z| log_similarity(squared_distance(z, &proto.vector), eps))
        .collect();
    Ok(ActivationMap::from_raw(raw, grid.height, grid.width, size))
}
