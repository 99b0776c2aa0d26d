//! The prototype-part network: a convolutional backbone producing a latent
//! grid, a layer of class-assigned `1×1×D` prototypes scored by max-pooled
//! log-ratio similarity, and a linear head over the similarity vector.

mod activation;
mod projection;
mod similarity;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::LabeledImage;
use crate::error::{ensure, Result};
use crate::nn::{Conv2d, ConvStack, Layer, StackGrad};
use crate::tensor::Tensor3;

pub use activation::{activation_map, upsample_bilinear, ActivationMap};
pub use projection::{nearest_images, prune_prototypes, push_prototypes, NearestImage};
pub(crate) use projection::push_with_latents;
pub(crate) use activation::activation_from_latent;
pub use similarity::{
    log_similarity, min_distances, prototype_layer_forward, similarity, similarity_derivative, similarity_gradient,
    squared_distance, PatchMatch, SimilarityVector,
};

pub const DEFAULT_EPS: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub prototypes_per_class: usize,
    /// Latent depth `D`.
    pub depth: usize,
    pub eps: f64,
    pub image_size: usize,
}

impl ModelConfig {
    pub fn new(num_classes: usize, prototypes_per_class: usize, image_size: usize) -> Self {
        Self {
            num_classes,
            prototypes_per_class,
            depth: 64,
            eps: DEFAULT_EPS,
            image_size,
        }
    }

    pub fn num_prototypes(&self) -> usize {
        self.num_classes * self.prototypes_per_class
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_classes >= 2, Config, "need at least 2 classes");
        ensure!(self.prototypes_per_class >= 1, Config, "need at least 1 prototype per class");
        ensure!(self.depth >= 8, Config, "latent depth must be at least 8, got {}", self.depth);
        ensure!(self.eps > 0.0 && self.eps < 1.0, Config, "eps must lie in (0,1), got {}", self.eps);
        ensure!(self.image_size >= 32, Config, "image size must be at least 32");
        Ok(())
    }
}

/// Convolutional feature extractor `f`: four conv stages and a sigmoid 1×1
/// add-on, so latents live in `(0,1)^D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub stack: ConvStack,
    pub input_size: usize,
    pub depth: usize,
    pub grid_size: usize,
}

impl Backbone {
    pub fn new<R: Rng>(input_size: usize, depth: usize, rng: &mut R) -> Result<Self> {
        ensure!(depth >= 8, Config, "latent depth must be at least 8, got {depth}");
        ensure!(input_size >= 32, Config, "input size must be at least 32, got {input_size}");
        let stack = ConvStack {
            layers: vec![
                Layer::Conv(Conv2d::new(3, 8, 3, 1, 1, rng)),
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv(Conv2d::new(8, 16, 3, 1, 1, rng)),
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv(Conv2d::new(16, 32, 3, 1, 1, rng)),
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv(Conv2d::new(32, depth, 2, 1, 0, rng)),
                Layer::Relu,
                Layer::Conv(Conv2d::new(depth, depth, 1, 1, 0, rng)),
                Layer::Sigmoid,
            ],
        };
        let (_, h, w) = stack.output_shape(3, input_size, input_size);
        debug_assert_eq!(h, w);
        Ok(Self {
            stack,
            input_size,
            depth,
            grid_size: h,
        })
    }

    fn check_input(&self, pixels: &Tensor3) -> Result<()> {
        ensure!(
            pixels.shape() == (3, self.input_size, self.input_size),
            Contract,
            "backbone expects 3×{0}×{0} input, got {1:?}",
            self.input_size,
            pixels.shape()
        );
        Ok(())
    }

    pub fn forward(&self, image: &LabeledImage) -> Result<LatentGrid> {
        self.forward_pixels(&image.pixels)
    }

    pub fn forward_pixels(&self, pixels: &Tensor3) -> Result<LatentGrid> {
        self.check_input(pixels)?;
        Ok(LatentGrid::from_channel_major(&self.stack.forward(pixels)))
    }

    /// Forward pass that keeps the activations needed for [`Backbone::backward`].
    pub fn forward_trace(&self, pixels: &Tensor3) -> Result<(LatentGrid, crate::nn::Trace)> {
        self.check_input(pixels)?;
        let trace = self.stack.forward_trace(pixels);
        Ok((LatentGrid::from_channel_major(&trace.output), trace))
    }

    /// `dlatent` is patch-major like [`LatentGrid::values`].
    pub fn backward(
        &self,
        trace: &crate::nn::Trace,
        dlatent: &[f64],
        need_pixel_grad: bool,
    ) -> (StackGrad, Option<Tensor3>) {
        let g = self.grid_size;
        let mut dout = Tensor3::zeros(self.depth, g, g);
        for l in 0..g * g {
            for d in 0..self.depth {
                dout.data[d * g * g + l] = dlatent[l * self.depth + d];
            }
        }
        self.stack.backward(trace, &dout, need_pixel_grad)
    }
}

/// Backbone output for one image, stored patch-major: `values[l*D .. (l+1)*D]`
/// is the `1×1×D` patch at location `l = row * width + col`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub values: Vec<f64>,
}

impl LatentGrid {
    pub fn from_channel_major(t: &Tensor3) -> Self {
        let n = t.plane();
        let mut values = vec![0.0; n * t.channels];
        for d in 0..t.channels {
            for l in 0..n {
                values[l * t.channels + d] = t.data[d * n + l];
            }
        }
        Self {
            height: t.height,
            width: t.width,
            depth: t.channels,
            values,
        }
    }

    pub fn from_patches(height: usize, width: usize, depth: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), height * width * depth, "latent grid shape/data mismatch");
        Self {
            height,
            width,
            depth,
            values,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.height * self.width
    }

    pub fn patch(&self, loc: usize) -> &[f64] {
        &self.values[loc * self.depth..(loc + 1) * self.depth]
    }

    pub fn patches(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.depth)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSource {
    pub image_id: String,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub id: usize,
    pub class_id: usize,
    pub vector: Vec<f64>,
    /// The training patch this prototype was projected onto, if any.
    pub source: Option<PatchSource>,
}

/// Final linear layer, `K × m` row-major, no bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub num_classes: usize,
    pub num_prototypes: usize,
    pub weights: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(num_classes: usize, num_prototypes: usize) -> Self {
        Self {
            num_classes,
            num_prototypes,
            weights: vec![0.0; num_classes * num_prototypes],
        }
    }

    /// `+1` from each prototype to its own class and `-0.5` elsewhere.
    pub fn class_connected(protos: &[Prototype], num_classes: usize) -> Self {
        let m = protos.len();
        let mut head = Self::zeros(num_classes, m);
        for (j, p) in protos.iter().enumerate() {
            for k in 0..num_classes {
                head.weights[k * m + j] = if p.class_id == k { 1.0 } else { -0.5 };
            }
        }
        head
    }

    pub fn weight(&self, class: usize, proto: usize) -> f64 {
        self.weights[class * self.num_prototypes + proto]
    }

    pub fn logits(&self, sims: &SimilarityVector) -> Result<Vec<f64>> {
        ensure!(
            sims.scores.len() == self.num_prototypes,
            Contract,
            "head expects {} similarities, got {}",
            self.num_prototypes,
            sims.scores.len()
        );
        Ok(self
            .weights
            .chunks(self.num_prototypes)
            .map(|row| row.iter().zip(&sims.scores).map(|(w, s)| w * s).sum())
            .collect())
    }
}

/// `logits = head · g(f(x))`.
pub fn model_forward(
    backbone: &Backbone,
    protos: &[Prototype],
    head: &HeadParams,
    image: &LabeledImage,
    eps: f64,
) -> Result<(Vec<f64>, SimilarityVector)> {
    let grid = backbone.forward(image)?;
    let sims = prototype_layer_forward(&grid, protos, eps)?;
    let logits = head.logits(&sims)?;
    Ok((logits, sims))
}

const MODEL_MAGIC: &[u8; 8] = b"R3PNMODL";
const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtoPNet {
    pub model_id: String,
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub prototypes: Vec<Prototype>,
    pub head: HeadParams,
}

impl ProtoPNet {
    /// Random backbone, prototypes uniform in `[0,1]^D`, class-connected head.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(config.image_size, config.depth, &mut rng)?;
        let prototypes: Vec<Prototype> = (0..config.num_prototypes())
            .map(|j| Prototype {
                id: j,
                class_id: j / config.prototypes_per_class,
                vector: (0..config.depth).map(|_| rng.gen_range(0.0..1.0)).collect(),
                source: None,
            })
            .collect();
        let head = HeadParams::class_connected(&prototypes, config.num_classes);
        Ok(Self {
            model_id: format!("init-{seed}"),
            config,
            backbone,
            prototypes,
            head,
        })
    }

    pub fn forward(&self, image: &LabeledImage) -> Result<(Vec<f64>, SimilarityVector)> {
        model_forward(&self.backbone, &self.prototypes, &self.head, image, self.config.eps)
    }

    pub fn latent(&self, image: &LabeledImage) -> Result<LatentGrid> {
        self.backbone.forward(image)
    }

    pub fn logits_from_latent(&self, grid: &LatentGrid) -> Result<Vec<f64>> {
        let sims = prototype_layer_forward(grid, &self.prototypes, self.config.eps)?;
        self.head.logits(&sims)
    }

    pub fn predict(&self, image: &LabeledImage) -> Result<usize> {
        Ok(argmax_first(&self.forward(image)?.0))
    }

    pub fn activation_map(&self, proto: usize, image: &LabeledImage) -> Result<ActivationMap> {
        let p = self
            .prototypes
            .get(proto)
            .ok_or_else(|| crate::Error::NotFound(format!("prototype {proto}")))?;
        activation_map(&self.backbone, p, image, self.config.eps)
    }

    /// Position of the prototype with this id.
    pub fn prototype_index(&self, id: usize) -> Result<usize> {
        self.prototypes
            .iter()
            .position(|p| p.id == id)
            .ok_or_else(|| crate::Error::NotFound(format!("prototype {id} in model {}", self.model_id)))
    }

    pub fn prototypes_of_class(&self, class: usize) -> impl Iterator<Item = (usize, &Prototype)> {
        self.prototypes.iter().enumerate().filter(move |(_, p)| p.class_id == class)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, MODEL_MAGIC, MODEL_VERSION, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::read(path, MODEL_MAGIC, MODEL_VERSION)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Split};

    fn tiny_model() -> (ProtoPNet, crate::data::Dataset) {
        let ds = generate_synthetic(3, 3, 32, 5).unwrap();
        let mut cfg = ModelConfig::new(3, 2, 32);
        cfg.depth = 8;
        (ProtoPNet::new(cfg, 1).unwrap(), ds)
    }

    #[test]
    fn backbone_output_shape_for_default_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = Backbone::new(64, 64, &mut rng).unwrap();
        assert_eq!(b.grid_size, 7);
        assert_eq!(b.depth, 64);
    }

    #[test]
    fn zero_image_gives_finite_grid() {
        let (model, _) = tiny_model();
        let zero = Tensor3::zeros(3, 32, 32);
        let grid = model.backbone.forward_pixels(&zero).unwrap();
        assert!(grid.values.iter().all(|v| v.is_finite()));
        assert_eq!((grid.height, grid.width, grid.depth), (3, 3, 8));
    }

    #[test]
    fn backbone_is_deterministic_and_checks_shape() {
        let (model, ds) = tiny_model();
        let im = &ds.images[0];
        assert_eq!(model.latent(im).unwrap(), model.latent(im).unwrap());
        let wrong = Tensor3::zeros(3, 32, 40);
        assert!(matches!(model.backbone.forward_pixels(&wrong), Err(crate::Error::Contract(_))));
        let wrong = Tensor3::zeros(3, 48, 48);
        assert!(matches!(model.backbone.forward_pixels(&wrong), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn backbone_pixel_gradient_matches_finite_differences() {
        let (model, ds) = tiny_model();
        let x = ds.images[0].pixels.clone();
        let (grid, trace) = model.backbone.forward_trace(&x).unwrap();
        let weights: Vec<f64> = (0..grid.values.len()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let (_, dx) = model.backbone.backward(&trace, &weights, true);
        let dx = dx.unwrap();
        let f = |p: &Tensor3| -> f64 {
            let g = model.backbone.forward_pixels(p).unwrap();
            g.values.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        for idx in [3usize, 500, 1500, 3000] {
            let h = 1e-6;
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - dx.data[idx]).abs() <= 1e-5 * (1.0 + fd.abs()), "{fd} vs {}", dx.data[idx]);
        }
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let (mut model, ds) = tiny_model();
        model.head = HeadParams::zeros(3, 6);
        let (logits, _) = model.forward(&ds.images[0]).unwrap();
        assert!(logits.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_head_passes_similarities_through() {
        let (mut model, ds) = tiny_model();
        model.config.prototypes_per_class = 1;
        model.prototypes.truncate(3);
        for (j, p) in model.prototypes.iter_mut().enumerate() {
            p.class_id = j;
        }
        let mut head = HeadParams::zeros(3, 3);
        for k in 0..3 {
            head.weights[k * 3 + k] = 1.0;
        }
        model.head = head;
        let (logits, sims) = model.forward(&ds.images[1]).unwrap();
        assert_eq!(logits, sims.scores);
    }

    #[test]
    fn model_forward_matches_hand_composition() {
        let (model, ds) = tiny_model();
        let im = ds.split(Split::Test).next().unwrap();
        let (logits, sims) = model.forward(im).unwrap();
        // Compose by hand: latent grid, brute-force max similarity, matrix-vector product.
        let grid = model.backbone.forward(im).unwrap();
        let mut hand_sims = Vec::new();
        for p in &model.prototypes {
            let mut best = f64::NEG_INFINITY;
            for patch in grid.patches() {
                let d: f64 = patch.iter().zip(&p.vector).map(|(a, b)| (a - b) * (a - b)).sum();
                best = best.max(((d + 1.0) / (d + model.config.eps)).ln());
            }
            hand_sims.push(best);
        }
        for (a, b) in sims.scores.iter().zip(&hand_sims) {
            assert!((a - b).abs() < 1e-12);
        }
        for k in 0..3 {
            let expected: f64 = (0..6).map(|j| model.head.weight(k, j) * hand_sims[j]).sum();
            assert!((logits[k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let (mut model, _) = tiny_model();
        model.prototypes[0].source = Some(PatchSource {
            image_id: "c000_000".into(),
            row: 1,
            col: 2,
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let back = ProtoPNet::load(&path).unwrap();
        assert_eq!(back, model);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], MODEL_MAGIC);
        back.save(&dir.path().join("again.ckpt")).unwrap();
        assert_eq!(std::fs::read(dir.path().join("again.ckpt")).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"hello world, not a model").unwrap();
        assert!(matches!(ProtoPNet::load(&path), Err(crate::Error::Checkpoint(_))));
    }
}
