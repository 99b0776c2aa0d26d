//! Image datasets: a seeded synthetic shapes generator with object masks, the
//! rotation/shear/skew/flip augmentation, and a folder-per-class loader.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops::FilterType, GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub id: String,
    /// `3 × S × S`, values in `[0, 1]`.
    pub pixels: Tensor3,
    pub class_id: usize,
    pub split: Split,
    /// Set on augmented copies; names the source image.
    pub augmented_from: Option<String>,
}

impl LabeledImage {
    pub fn size(&self) -> usize {
        self.pixels.height
    }

    pub fn is_original(&self) -> bool {
        self.augmented_from.is_none()
    }
}

/// Binary foreground mask, row-major, `true` = object.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub size: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.size + col]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.area() as f64 / (self.size * self.size) as f64
    }
}

/// A synthetic image together with its ground-truth object mask.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticSample<'a> {
    pub base: &'a LabeledImage,
    pub object_mask: &'a Mask,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Perturbation {
    /// Rotation by an angle drawn uniformly from `±degrees`.
    Rotation { degrees: f64 },
    /// Horizontal shear with factor drawn from `±factor`.
    Shear { factor: f64 },
    /// Keystone (perspective) skew with factor drawn from `±factor`.
    Skew { factor: f64 },
    /// Horizontal mirror.
    Flip,
}

impl Perturbation {
    /// Default perturbation set for desk-scale runs.
    pub fn default_set() -> Vec<Perturbation> {
        vec![
            Perturbation::Rotation { degrees: 15.0 },
            Perturbation::Shear { factor: 0.2 },
            Perturbation::Skew { factor: 0.2 },
            Perturbation::Flip,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub num_classes: usize,
    pub image_size: usize,
    pub class_names: Vec<String>,
    pub augmentation: Vec<Perturbation>,
    pub images: Vec<LabeledImage>,
    /// Object masks keyed by image id (synthetic data only).
    pub masks: BTreeMap<String, Mask>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledImage> {
        self.images.iter().filter(move |im| im.split == split)
    }

    /// Train images without augmented copies.
    pub fn train_originals(&self) -> impl Iterator<Item = &LabeledImage> {
        self.split(Split::Train).filter(|im| im.is_original())
    }

    pub fn get(&self, id: &str) -> Option<&LabeledImage> {
        self.images.iter().find(|im| im.id == id)
    }

    pub fn sample(&self, id: &str) -> Option<SyntheticSample<'_>> {
        let base = self.get(id)?;
        let object_mask = self.masks.get(id)?;
        Some(SyntheticSample { base, object_mask })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_classes >= 1, Validation, "dataset has no classes");
        let mut seen = std::collections::HashSet::new();
        let mut train = vec![0usize; self.num_classes];
        let mut test = vec![0usize; self.num_classes];
        for im in &self.images {
            ensure!(seen.insert(im.id.as_str()), Validation, "duplicate image id {}", im.id);
            ensure!(
                im.class_id < self.num_classes,
                Validation,
                "image {} has class {} >= {}",
                im.id,
                im.class_id,
                self.num_classes
            );
            ensure!(
                im.pixels.shape() == (3, self.image_size, self.image_size),
                Validation,
                "image {} has shape {:?}",
                im.id,
                im.pixels.shape()
            );
            ensure!(
                im.pixels.data.iter().all(|v| (0.0..=1.0).contains(v)),
                Validation,
                "image {} has pixel values outside [0,1]",
                im.id
            );
            match im.split {
                Split::Train => train[im.class_id] += 1,
                Split::Test => test[im.class_id] += 1,
            }
        }
        for k in 0..self.num_classes {
            ensure!(
                train[k] >= 1 && test[k] >= 1,
                Validation,
                "class {k} needs at least one train and one test image (has {} / {})",
                train[k],
                test[k]
            );
        }
        Ok(())
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
    Hexagon,
    Ellipse,
    Star,
    Arrow,
}

const SHAPES: [Shape; 10] = [
    Shape::Circle,
    Shape::Square,
    Shape::Triangle,
    Shape::Diamond,
    Shape::Cross,
    Shape::Ring,
    Shape::Hexagon,
    Shape::Ellipse,
    Shape::Star,
    Shape::Arrow,
];

impl Shape {
    /// Inside test in object-local coordinates scaled by the radius.
    fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            Shape::Circle => r2 <= 1.0,
            Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Shape::Triangle => v >= -0.7 && v <= 0.95 - 1.65 * u.abs(),
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Cross => (u.abs() <= 0.35 && v.abs() <= 1.0) || (v.abs() <= 0.35 && u.abs() <= 1.0),
            Shape::Ring => (0.3025..=1.0).contains(&r2),
            Shape::Hexagon => v.abs() <= 0.866 && 0.577 * v.abs() + u.abs() <= 1.0,
            Shape::Ellipse => u * u + v * v / 0.36 <= 1.0,
            Shape::Star => {
                let theta = v.atan2(u);
                r2.sqrt() <= 0.55 + 0.45 * (5.0 * theta).cos()
            }
            Shape::Arrow => (u.abs() <= 0.3 && v >= -1.0 && v <= 0.2) || (v > 0.2 && v <= 1.0 - u.abs()),
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Low-saturation textured background; identical distribution for all classes.
fn render_background(rng: &mut ChaCha8Rng, size: usize) -> Tensor3 {
    let mut img = Tensor3::zeros(3, size, size);
    let base = rng.gen_range(0.3..0.7);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.06..0.06));
    let family = rng.gen_range(0..3);
    let grid = 5;
    let coarse: Vec<f64> = (0..grid * grid).map(|_| rng.gen_range(-0.2..0.2)).collect();
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let freq = rng.gen_range(0.25..0.6);
    let cell = rng.gen_range(4..9);
    for r in 0..size {
        for c in 0..size {
            let texture = match family {
                0 => {
                    let gy = r as f64 / (size - 1) as f64 * (grid - 1) as f64;
                    let gx = c as f64 / (size - 1) as f64 * (grid - 1) as f64;
                    let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(grid - 1), (x0 + 1).min(grid - 1));
                    let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
                    let at = |y: usize, x: usize| coarse[y * grid + x];
                    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
                }
                1 => 0.15 * ((c as f64 * angle.cos() + r as f64 * angle.sin()) * freq).sin(),
                _ => {
                    if ((r / cell) + (c / cell)) % 2 == 0 {
                        0.1
                    } else {
                        -0.1
                    }
                }
            };
            let noise = rng.gen_range(-0.04..0.04);
            for ch in 0..3 {
                *img.at_mut(ch, r, c) = quantize(base + texture + tint[ch] + noise);
            }
        }
    }
    img
}

fn render_sample(rng: &mut ChaCha8Rng, class_id: usize, num_classes: usize, size: usize) -> (Tensor3, Mask) {
    let shape = SHAPES[class_id % SHAPES.len()];
    let color = hsv_to_rgb(class_id as f64 / num_classes as f64, 0.85, 0.9);
    loop {
        let mut img = render_background(rng, size);
        let s = size as f64;
        let radius = rng.gen_range(0.18 * s..0.26 * s);
        let margin = radius + 1.0;
        let cy = rng.gen_range(margin..s - margin);
        let cx = rng.gen_range(margin..s - margin);
        let rot: f64 = rng.gen_range(-0.4..0.4);
        let (sin, cos) = rot.sin_cos();
        let mut bits = vec![false; size * size];
        for r in 0..size {
            for c in 0..size {
                let dy = (r as f64 + 0.5 - cy) / radius;
                let dx = (c as f64 + 0.5 - cx) / radius;
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                if shape.contains(u, v) {
                    bits[r * size + c] = true;
                    let jitter = rng.gen_range(-0.04..0.04);
                    for ch in 0..3 {
                        *img.at_mut(ch, r, c) = quantize(color[ch] + jitter);
                    }
                }
            }
        }
        let mask = Mask { size, bits };
        let frac = mask.area_fraction();
        if (0.05..=0.60).contains(&frac) {
            return (img, mask);
        }
    }
}

/// Generates `num_classes × per_class` images; a third of each class (at least
/// one) goes to the test split.
pub fn generate_synthetic(num_classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    ensure!(num_classes >= 2, Config, "need at least 2 classes, got {num_classes}");
    ensure!(per_class >= 2, Config, "need at least 2 images per class, got {per_class}");
    ensure!(size >= 32, Config, "image size must be at least 32, got {size}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_test = (per_class / 3).max(1);
    let mut images = Vec::with_capacity(num_classes * per_class);
    let mut masks = BTreeMap::new();
    for i in 0..per_class {
        for k in 0..num_classes {
            let (pixels, mask) = render_sample(&mut rng, k, num_classes, size);
            let id = format!("c{k:03}_{i:03}");
            masks.insert(id.clone(), mask);
            images.push(LabeledImage {
                id,
                pixels,
                class_id: k,
                split: if i >= per_class - n_test { Split::Test } else { Split::Train },
                augmented_from: None,
            });
        }
    }
    images.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Dataset {
        num_classes,
        image_size: size,
        class_names: (0..num_classes).map(|k| format!("class_{k:03}")).collect(),
        augmentation: Perturbation::default_set(),
        images,
        masks,
    })
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Maps an output pixel centre to its source location.
fn inverse_map(p: Perturbation, amount: f64, size: usize) -> impl Fn(f64, f64) -> (f64, f64) {
    let half = size as f64 / 2.0;
    move |y: f64, x: f64| {
        let (v, u) = (y - half, x - half);
        let (sv, su) = match p {
            Perturbation::Rotation { .. } => {
                let (s, c) = amount.to_radians().sin_cos();
                (-s * u + c * v, c * u + s * v)
            }
            Perturbation::Shear { .. } => (v, u - amount * v),
            Perturbation::Skew { .. } => (v, u * (1.0 + amount * v / half)),
            Perturbation::Flip => (v, -u),
        };
        (sv + half, su + half)
    }
}

fn sample_bilinear(img: &Tensor3, ch: usize, y: f64, x: f64) -> f64 {
    let max = (img.height - 1) as f64;
    let y = (y - 0.5).clamp(0.0, max);
    let x = (x - 0.5).clamp(0.0, (img.width - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height - 1), (x0 + 1).min(img.width - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    (1.0 - fy) * ((1.0 - fx) * img.at(ch, y0, x0) + fx * img.at(ch, y0, x1))
        + fy * ((1.0 - fx) * img.at(ch, y1, x0) + fx * img.at(ch, y1, x1))
}

fn warp(img: &Tensor3, mask: Option<&Mask>, p: Perturbation, amount: f64) -> (Tensor3, Option<Mask>) {
    let size = img.height;
    let map = inverse_map(p, amount, size);
    let mut out = Tensor3::zeros(3, size, size);
    let mut bits = mask.map(|_| vec![false; size * size]);
    for r in 0..size {
        for c in 0..size {
            let (sy, sx) = map(r as f64 + 0.5, c as f64 + 0.5);
            for ch in 0..3 {
                *out.at_mut(ch, r, c) = quantize(sample_bilinear(img, ch, sy, sx));
            }
            if let (Some(bits), Some(m)) = (bits.as_mut(), mask) {
                let (my, mx) = (sy.floor(), sx.floor());
                if my >= 0.0 && mx >= 0.0 && (my as usize) < size && (mx as usize) < size {
                    bits[r * size + c] = m.get(my as usize, mx as usize);
                }
            }
        }
    }
    (out, bits.map(|bits| Mask { size, bits }))
}

/// Adds one perturbed copy of every original train image per entry of
/// `dataset.augmentation`. Test images are never touched.
pub fn augment(dataset: &Dataset, seed: u64) -> Result<Dataset> {
    dataset.validate()?;
    let mut out = dataset.clone();
    if dataset.augmentation.is_empty() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_0000_0000_0001);
    for im in dataset.train_originals() {
        for (t, &p) in dataset.augmentation.iter().enumerate() {
            let amount = match p {
                Perturbation::Rotation { degrees } => rng.gen_range(-degrees..=degrees),
                Perturbation::Shear { factor } | Perturbation::Skew { factor } => rng.gen_range(-factor..=factor),
                Perturbation::Flip => 0.0,
            };
            let (pixels, mask) = warp(&im.pixels, dataset.masks.get(&im.id), p, amount);
            let id = format!("{}_a{t}", im.id);
            if let Some(mask) = mask {
                out.masks.insert(id.clone(), mask);
            }
            out.images.push(LabeledImage {
                id,
                pixels,
                class_id: im.class_id,
                split: Split::Train,
                augmented_from: Some(im.id.clone()),
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Persistence and folder ingestion
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    pub class_id: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmented_from: Option<String>,
}

/// The JSON document describing a dataset on disk. Paths are relative to the
/// manifest's directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub image_size: usize,
    pub class_names: Vec<String>,
    pub augmentation: Vec<Perturbation>,
    pub images: Vec<ManifestEntry>,
}

pub fn tensor_to_rgb(pixels: &Tensor3) -> RgbImage {
    RgbImage::from_fn(pixels.width as u32, pixels.height as u32, |x, y| {
        let px = |ch| (pixels.at(ch, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor3 {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor3::zeros(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            *t.at_mut(ch, y as usize, x as usize) = px[ch] as f64 / 255.0;
        }
    }
    t
}

fn read_image(path: &Path, size: usize) -> Result<Tensor3> {
    let img = image::open(path)
        .map_err(|e| Error::Ingestion(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    let img = if img.width() as usize != size || img.height() as usize != size {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    } else {
        img
    };
    Ok(rgb_to_tensor(&img))
}

impl Dataset {
    /// Writes PNG images (and masks) under `dir` plus `dir/manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let img_dir = dir.join("images");
        let mask_dir = dir.join("masks");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io_at(&img_dir, e))?;
        if !self.masks.is_empty() {
            fs::create_dir_all(&mask_dir).map_err(|e| Error::io_at(&mask_dir, e))?;
        }
        let mut entries = Vec::with_capacity(self.images.len());
        for im in &self.images {
            let rel = format!("images/{}.png", im.id);
            tensor_to_rgb(&im.pixels).save(dir.join(&rel))?;
            let mask_path = match self.masks.get(&im.id) {
                Some(mask) => {
                    let rel = format!("masks/{}.png", im.id);
                    let gray = GrayImage::from_fn(mask.size as u32, mask.size as u32, |x, y| {
                        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
                    });
                    gray.save(dir.join(&rel))?;
                    Some(rel)
                }
                None => None,
            };
            entries.push(ManifestEntry {
                id: im.id.clone(),
                path: rel,
                mask_path,
                class_id: im.class_id,
                split: im.split,
                augmented_from: im.augmented_from.clone(),
            });
        }
        let manifest = DatasetManifest {
            num_classes: self.num_classes,
            image_size: self.image_size,
            class_names: self.class_names.clone(),
            augmentation: self.augmentation.clone(),
            images: entries,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io_at(&path, e))?;
        Ok(path)
    }

    pub fn load(manifest_path: &Path) -> Result<Dataset> {
        let raw = fs::read(manifest_path).map_err(|e| Error::io_at(manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_slice(&raw)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let mut images = Vec::with_capacity(manifest.images.len());
        let mut masks = BTreeMap::new();
        for e in &manifest.images {
            let pixels = read_image(&resolve(&e.path), manifest.image_size)?;
            if let Some(mp) = &e.mask_path {
                let path = resolve(mp);
                let gray = image::open(&path)
                    .map_err(|err| Error::Ingestion(format!("cannot read mask {}: {err}", path.display())))?
                    .to_luma8();
                let size = gray.width() as usize;
                let bits = gray.pixels().map(|p| p[0] >= 128).collect();
                masks.insert(e.id.clone(), Mask { size, bits });
            }
            images.push(LabeledImage {
                id: e.id.clone(),
                pixels,
                class_id: e.class_id,
                split: e.split,
                augmented_from: e.augmented_from.clone(),
            });
        }
        let ds = Dataset {
            num_classes: manifest.num_classes,
            image_size: manifest.image_size,
            class_names: manifest.class_names,
            augmentation: manifest.augmentation,
            images,
            masks,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io_at(dir, e))? {
        let path = entry.map_err(|e| Error::io_at(dir, e))?.path();
        let hidden = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with('.'));
        if !hidden {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Reads `root/<class>/<image>` into a dataset, classes ordered by folder name.
/// In every class the last third of the files (at least one) is held out as
/// test data.
pub fn load_folder_dataset(root: &Path, image_size: usize) -> Result<Dataset> {
    ensure!(root.is_dir(), Ingestion, "dataset root {} is not a directory", root.display());
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    ensure!(!class_dirs.is_empty(), Ingestion, "no class folders under {}", root.display());
    let mut images = Vec::new();
    let mut class_names = Vec::new();
    for (class_id, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_file()).collect();
        ensure!(!files.is_empty(), Ingestion, "class folder {} is empty", dir.display());
        ensure!(
            files.len() >= 2,
            Ingestion,
            "class folder {} needs at least 2 images for a train/test split",
            dir.display()
        );
        let n_test = (files.len() / 3).max(1);
        for (i, file) in files.iter().enumerate() {
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            images.push(LabeledImage {
                id: format!("{name}__{stem}"),
                pixels: read_image(file, image_size)?,
                class_id,
                split: if i >= files.len() - n_test { Split::Test } else { Split::Train },
                augmented_from: None,
            });
        }
        class_names.push(name);
    }
    let ds = Dataset {
        num_classes: class_names.len(),
        image_size,
        class_names,
        augmentation: Perturbation::default_set(),
        images,
        masks: BTreeMap::new(),
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_counts_and_masks() {
        let ds = generate_synthetic(10, 30, 64, 7).unwrap();
        assert_eq!(ds.images.len(), 300);
        assert_eq!(ds.num_classes, 10);
        assert_eq!(ds.masks.len(), 300);
        for mask in ds.masks.values() {
            let f = mask.area_fraction();
            assert!((0.05..=0.60).contains(&f), "mask fraction {f}");
        }
        ds.validate().unwrap();
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(2, 2, 32, 0).unwrap();
        let b = generate_synthetic(2, 2, 32, 0).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(2, 2, 32, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_sizes_are_config_errors() {
        assert!(matches!(generate_synthetic(1, 5, 64, 0), Err(Error::Config(_))));
        assert!(matches!(generate_synthetic(3, 1, 64, 0), Err(Error::Config(_))));
        assert!(matches!(generate_synthetic(3, 5, 31, 0), Err(Error::Config(_))));
    }

    #[test]
    fn mask_covers_rendered_object() {
        // Object pixels carry the saturated class colour; background is near-grey.
        let ds = generate_synthetic(4, 4, 48, 3).unwrap();
        for im in &ds.images {
            let mask = &ds.masks[&im.id];
            let mut shape_px = 0;
            let mut inside = 0;
            for r in 0..ds.image_size {
                for c in 0..ds.image_size {
                    let px: Vec<f64> = (0..3).map(|ch| im.pixels.at(ch, r, c)).collect();
                    let sat = px.iter().cloned().fold(f64::MIN, f64::max) - px.iter().cloned().fold(f64::MAX, f64::min);
                    if sat > 0.5 {
                        shape_px += 1;
                        inside += mask.get(r, c) as usize;
                    }
                }
            }
            assert!(shape_px > 0);
            assert!(inside as f64 >= 0.99 * shape_px as f64);
        }
    }

    #[test]
    fn augmentation_counts_labels_and_test_isolation() {
        let ds = generate_synthetic(10, 30, 64, 7).unwrap();
        let train_before = ds.split(Split::Train).count();
        let aug = augment(&ds, 11).unwrap();
        assert_eq!(aug.split(Split::Train).count(), train_before * 5);
        let test_before: Vec<_> = ds.split(Split::Test).collect();
        let test_after: Vec<_> = aug.split(Split::Test).collect();
        assert_eq!(test_before, test_after);
        for im in aug.images.iter().filter(|im| !im.is_original()) {
            let src = aug.get(im.augmented_from.as_deref().unwrap()).unwrap();
            assert_eq!(im.class_id, src.class_id);
            assert_eq!(src.split, Split::Train);
        }
        assert_eq!(augment(&ds, 11).unwrap(), aug);
    }

    #[test]
    fn empty_augmentation_is_identity() {
        let mut ds = generate_synthetic(2, 3, 32, 1).unwrap();
        ds.augmentation.clear();
        assert_eq!(augment(&ds, 5).unwrap(), ds);
    }

    #[test]
    fn flip_mirrors_pixels() {
        let ds = generate_synthetic(2, 2, 32, 4).unwrap();
        let im = &ds.images[0];
        let (out, _) = warp(&im.pixels, None, Perturbation::Flip, 0.0);
        for r in 0..32 {
            for c in 0..32 {
                assert_eq!(out.at(1, r, c), im.pixels.at(1, r, 31 - c));
            }
        }
    }

    #[test]
    fn nearest_centroid_on_foreground_colour_beats_half() {
        let ds = generate_synthetic(10, 30, 64, 7).unwrap();
        let mean_fg = |im: &LabeledImage| {
            let mask = &ds.masks[&im.id];
            let mut acc = [0.0; 3];
            let mut n = 0.0;
            for r in 0..ds.image_size {
                for c in 0..ds.image_size {
                    if mask.get(r, c) {
                        for (ch, a) in acc.iter_mut().enumerate() {
                            *a += im.pixels.at(ch, r, c);
                        }
                        n += 1.0;
                    }
                }
            }
            acc.map(|a| a / n)
        };
        let mut centroids = vec![[0.0; 3]; 10];
        let mut counts = vec![0.0; 10];
        for im in ds.split(Split::Train) {
            let f = mean_fg(im);
            for ch in 0..3 {
                centroids[im.class_id][ch] += f[ch];
            }
            counts[im.class_id] += 1.0;
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= n);
        }
        let test: Vec<_> = ds.split(Split::Test).collect();
        let correct = test
            .iter()
            .filter(|im| {
                let f = mean_fg(im);
                let pred = (0..10)
                    .min_by(|&a, &b| {
                        let d = |k: usize| (0..3).map(|ch| (f[ch] - centroids[k][ch]).powi(2)).sum::<f64>();
                        d(a).total_cmp(&d(b))
                    })
                    .unwrap();
                pred == im.class_id
            })
            .count();
        assert!(correct as f64 / test.len() as f64 > 0.5);
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = augment(&generate_synthetic(2, 3, 32, 9).unwrap(), 1).unwrap();
        let path = ds.save(dir.path()).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
    }

    fn write_png(path: &Path, shade: u8) {
        RgbImage::from_pixel(40, 40, Rgb([shade, 10, 200])).save(path).unwrap();
    }

    #[test]
    fn folder_dataset_loading() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["alpha", "beta"] {
            fs::create_dir(dir.path().join(class)).unwrap();
            for i in 0..3 {
                write_png(&dir.path().join(class).join(format!("{i}.png")), 30 * i as u8);
            }
        }
        let ds = load_folder_dataset(dir.path(), 32).unwrap();
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.images.len(), 6);
        assert_eq!(ds.class_names, vec!["alpha", "beta"]);
        assert_eq!(ds.images[0].id, "alpha__0");
        assert_eq!(ds.images[3].class_id, 1);
        assert_eq!(ds.split(Split::Test).count(), 2);
    }

    #[test]
    fn folder_dataset_errors() {
        let missing = load_folder_dataset(Path::new("/definitely/not/here"), 32);
        assert!(matches!(missing, Err(Error::Ingestion(_))));

        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("empty")).unwrap();
        let err = load_folder_dataset(dir.path(), 32).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("a")).unwrap();
        write_png(&dir.path().join("a/0.png"), 1);
        fs::write(dir.path().join("a/broken.png"), b"not an image").unwrap();
        let err = load_folder_dataset(dir.path(), 32).unwrap_err();
        assert!(err.to_string().contains("broken.png"), "{err}");
    }
}
