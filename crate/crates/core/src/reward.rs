//! Reward model `r(x, h) ∈ (0,1)`: an image tower and a heatmap tower whose
//! feature maps are concatenated and fused into one sigmoid score, trained on
//! pairwise comparisons with a Bradley–Terry cross-entropy.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{Dataset, LabeledImage};
use crate::error::{ensure, Error, Result};
use crate::feedback::{ComparisonRecord, ItemRef};
use crate::nn::{sigmoid, Adam, Conv2d, ConvStack, Layer, StackGrad};
use crate::protopnet::{ActivationMap, ProtoPNet};
use crate::tensor::Tensor3;

/// How the two tower outputs are combined before the sigmoid unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Flatten and concatenate both feature maps, then one linear unit.
    Linear,
    /// Concatenate feature maps along channels, apply a 1×1 conv with ReLU so
    /// image and heatmap features can interact per location, average over
    /// locations, then one linear unit.
    Pointwise { hidden: usize },
}

impl Default for Fusion {
    fn default() -> Self {
        Fusion::Linear
    }
}

/// Scores are kept this far from 0 and 1 so they stay strictly inside.
const SCORE_MARGIN: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardNet {
    pub image_size: usize,
    pub fusion: Fusion,
    pub image_tower: ConvStack,
    pub heatmap_tower: ConvStack,
    /// Present for [`Fusion::Pointwise`].
    pub fusion_stack: Option<ConvStack>,
    pub out_weight: Vec<f64>,
    pub out_bias: f64,
}

fn tower<R: Rng>(in_channels: usize, rng: &mut R) -> ConvStack {
    ConvStack {
        layers: vec![
            Layer::Conv(Conv2d::new(in_channels, 8, 3, 2, 1, rng)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(8, 16, 3, 2, 1, rng)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(16, 16, 3, 2, 1, rng)),
            Layer::Relu,
        ],
    }
}

/// Parameter gradients of a [`RewardNet`].
#[derive(Clone, Debug)]
pub struct RewardGrad {
    pub image_tower: StackGrad,
    pub heatmap_tower: StackGrad,
    pub fusion_stack: Option<StackGrad>,
    pub out_weight: Vec<f64>,
    pub out_bias: f64,
}

impl RewardGrad {
    fn zeros(net: &RewardNet) -> Self {
        Self {
            image_tower: StackGrad::zeros_like(&net.image_tower),
            heatmap_tower: StackGrad::zeros_like(&net.heatmap_tower),
            fusion_stack: net.fusion_stack.as_ref().map(StackGrad::zeros_like),
            out_weight: vec![0.0; net.out_weight.len()],
            out_bias: 0.0,
        }
    }

    /// All gradient values in [`RewardNet::params_mut`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat: Vec<f64> = self.image_tower.tensors().concat();
        flat.extend(self.heatmap_tower.tensors().concat());
        if let Some(f) = &self.fusion_stack {
            flat.extend(f.tensors().concat());
        }
        flat.extend(&self.out_weight);
        flat.push(self.out_bias);
        flat
    }
}

const REWARD_MAGIC: &[u8; 8] = b"R3RWDNET";
const REWARD_VERSION: u32 = 1;

impl RewardNet {
    pub fn new(image_size: usize, fusion: Fusion, seed: u64) -> Result<Self> {
        ensure!(image_size >= 16, Config, "reward towers need images of at least 16 pixels");
        if let Fusion::Pointwise { hidden } = fusion {
            ensure!(hidden >= 1, Config, "pointwise fusion needs at least 1 hidden channel");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image_tower = tower(3, &mut rng);
        let heatmap_tower = tower(1, &mut rng);
        let (c, h, w) = image_tower.output_shape(3, image_size, image_size);
        let (fusion_stack, n_out) = match fusion {
            Fusion::Linear => (None, 2 * c * h * w),
            Fusion::Pointwise { hidden } => (
                Some(ConvStack {
                    layers: vec![Layer::Conv(Conv2d::new(2 * c, hidden, 1, 1, 0, &mut rng)), Layer::Relu],
                }),
                hidden,
            ),
        };
        let bound = 1.0 / (n_out as f64).sqrt();
        let out_weight = (0..n_out).map(|_| rng.gen_range(-bound..bound)).collect();
        Ok(Self {
            image_size,
            fusion,
            image_tower,
            heatmap_tower,
            fusion_stack,
            out_weight,
            out_bias: 0.0,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.image_tower.params_mut();
        p.extend(self.heatmap_tower.params_mut());
        if let Some(f) = self.fusion_stack.as_mut() {
            p.extend(f.params_mut());
        }
        p.push(self.out_weight.as_mut_slice());
        p.push(std::slice::from_mut(&mut self.out_bias));
        p
    }

    fn check_inputs(&self, image: &Tensor3, heatmap: &Tensor3) -> Result<()> {
        let s = self.image_size;
        ensure!(
            image.shape() == (3, s, s),
            Contract,
            "reward model expects a 3×{s}×{s} image, got {:?}",
            image.shape()
        );
        ensure!(
            heatmap.shape() == (1, s, s),
            Contract,
            "reward model expects a 1×{s}×{s} heatmap, got {:?}",
            heatmap.shape()
        );
        Ok(())
    }

    /// Output of the image tower, reusable across heatmaps of one image.
    pub fn image_features(&self, image: &Tensor3) -> Result<Tensor3> {
        let s = self.image_size;
        ensure!(image.shape() == (3, s, s), Contract, "reward model expects a 3×{s}×{s} image, got {:?}", image.shape());
        Ok(self.image_tower.forward(image))
    }

    fn fuse(&self, img: &Tensor3, heat: &Tensor3) -> f64 {
        let pre = match &self.fusion_stack {
            None => {
                let f = img.data.iter().chain(&heat.data);
                f.zip(&self.out_weight).map(|(a, b)| a * b).sum::<f64>()
            }
            Some(stack) => {
                let out = stack.forward(&concat_channels(img, heat));
                pooled(&out).iter().zip(&self.out_weight).map(|(a, b)| a * b).sum::<f64>()
            }
        };
        pre + self.out_bias
    }

    pub fn score_features(&self, image_features: &Tensor3, heatmap: &Tensor3) -> Result<f64> {
        let s = self.image_size;
        ensure!(heatmap.shape() == (1, s, s), Contract, "reward model expects a 1×{s}×{s} heatmap");
        let heat = self.heatmap_tower.forward(heatmap);
        ensure!(heat.shape() == image_features.shape(), Contract, "image feature shape mismatch");
        Ok(bounded_sigmoid(self.fuse(image_features, &heat)))
    }

    pub fn score_tensors(&self, image: &Tensor3, heatmap: &Tensor3) -> Result<f64> {
        self.check_inputs(image, heatmap)?;
        self.score_features(&self.image_tower.forward(image), heatmap)
    }

    /// Adds `dscore · ∂score/∂θ` for one item into `grad`.
    fn accumulate_grad(&self, image: &Tensor3, heatmap: &Tensor3, dscore: f64, grad: &mut RewardGrad) {
        let img_tr = self.image_tower.forward_trace(image);
        let heat_tr = self.heatmap_tower.forward_trace(heatmap);
        let (img, heat) = (&img_tr.output, &heat_tr.output);
        let s = sigmoid(self.fuse(img, heat));
        let ds = dscore * s * (1.0 - s);
        grad.out_bias += ds;
        let (dimg, dheat) = match &self.fusion_stack {
            None => {
                let n = img.data.len();
                for (i, v) in img.data.iter().chain(&heat.data).enumerate() {
                    grad.out_weight[i] += ds * v;
                }
                let dimg = Tensor3::from_vec(img.channels, img.height, img.width, self.out_weight[..n].iter().map(|w| ds * w).collect());
                let dheat =
                    Tensor3::from_vec(heat.channels, heat.height, heat.width, self.out_weight[n..].iter().map(|w| ds * w).collect());
                (dimg, dheat)
            }
            Some(stack) => {
                let tr = stack.forward_trace(&concat_channels(img, heat));
                let p = pooled(&tr.output);
                for (g, v) in grad.out_weight.iter_mut().zip(&p) {
                    *g += ds * v;
                }
                let plane = tr.output.plane() as f64;
                let mut dout = Tensor3::zeros(tr.output.channels, tr.output.height, tr.output.width);
                for (f, chunk) in dout.data.chunks_mut(tr.output.plane()).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = ds * self.out_weight[f] / plane);
                }
                let (g, dcat) = stack.backward(&tr, &dout, true);
                grad.fusion_stack.as_mut().expect("pointwise grad").add_assign(&g);
                split_channels(&dcat.expect("input grad requested"), img.channels)
            }
        };
        let (g, _) = self.image_tower.backward(&img_tr, &dimg, false);
        grad.image_tower.add_assign(&g);
        let (g, _) = self.heatmap_tower.backward(&heat_tr, &dheat, false);
        grad.heatmap_tower.add_assign(&g);
    }

    fn apply(&mut self, grad: &RewardGrad, opt: &mut Adam) {
        let mut grads = grad.image_tower.tensors();
        grads.extend(grad.heatmap_tower.tensors());
        if let Some(f) = &grad.fusion_stack {
            grads.extend(f.tensors());
        }
        grads.push(&grad.out_weight);
        grads.push(std::slice::from_ref(&grad.out_bias));
        opt.step(self.params_mut(), grads);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, REWARD_MAGIC, REWARD_VERSION, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::read(path, REWARD_MAGIC, REWARD_VERSION)
    }
}

fn bounded_sigmoid(x: f64) -> f64 {
    sigmoid(x).clamp(SCORE_MARGIN, 1.0 - SCORE_MARGIN)
}

fn concat_channels(a: &Tensor3, b: &Tensor3) -> Tensor3 {
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Tensor3::from_vec(a.channels + b.channels, a.height, a.width, data)
}

fn split_channels(t: &Tensor3, first: usize) -> (Tensor3, Tensor3) {
    let n = first * t.plane();
    (
        Tensor3::from_vec(first, t.height, t.width, t.data[..n].to_vec()),
        Tensor3::from_vec(t.channels - first, t.height, t.width, t.data[n..].to_vec()),
    )
}

fn pooled(t: &Tensor3) -> Vec<f64> {
    t.data.chunks(t.plane()).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

pub fn heatmap_tensor(map: &ActivationMap) -> Tensor3 {
    Tensor3::from_vec(1, map.size, map.size, map.display.clone())
}

/// Anything that can score an (image, activation map) pair.
pub trait RewardScorer: Sync {
    fn score(&self, image: &LabeledImage, map: &ActivationMap) -> Result<f64>;
}

impl RewardScorer for RewardNet {
    fn score(&self, image: &LabeledImage, map: &ActivationMap) -> Result<f64> {
        self.score_tensors(&image.pixels, &heatmap_tensor(map))
    }
}

/// Reward net that remembers image-tower features by image id, for loops
/// that score one image against many heatmaps.
pub struct CachedScorer<'a> {
    net: &'a RewardNet,
    features: Mutex<HashMap<String, Arc<Tensor3>>>,
}

impl<'a> CachedScorer<'a> {
    pub fn new(net: &'a RewardNet) -> Self {
        Self {
            net,
            features: Mutex::new(HashMap::new()),
        }
    }
}

impl RewardScorer for CachedScorer<'_> {
    fn score(&self, image: &LabeledImage, map: &ActivationMap) -> Result<f64> {
        let cached = self.features.lock().unwrap_or_else(|e| e.into_inner()).get(&image.id).cloned();
        let feats = match cached {
            Some(f) => f,
            None => {
                let f = Arc::new(self.net.image_features(&image.pixels)?);
                self.features
                    .lock()
                    .unwrap_or_else(|e| e.into_inner())
                    .insert(image.id.clone(), f.clone());
                f
            }
        };
        self.net.score_features(&feats, &heatmap_tensor(map))
    }
}

/// Returns the same score for everything.
#[derive(Clone, Copy, Debug)]
pub struct ConstantScorer(pub f64);

impl RewardScorer for ConstantScorer {
    fn score(&self, _: &LabeledImage, _: &ActivationMap) -> Result<f64> {
        Ok(self.0)
    }
}

pub fn reward_forward(net: &RewardNet, image: &LabeledImage, map: &ActivationMap) -> Result<f64> {
    net.score(image, map)
}

/// Scores many pairs; safe to call from several threads at once.
pub fn score_batch(scorer: &dyn RewardScorer, pairs: &[(&LabeledImage, &ActivationMap)]) -> Result<Vec<f64>> {
    pairs.iter().map(|(im, map)| scorer.score(im, map)).collect()
}

/// Bradley–Terry probability that the left item is preferred.
pub fn pair_probability(r_left: f64, r_right: f64) -> f64 {
    sigmoid(r_left - r_right)
}

/// `-ln P(winner ≻ loser)` from two scores.
pub fn pair_loss(winner: f64, loser: f64) -> f64 {
    // softplus(loser - winner), stable for any sign.
    let x = loser - winner;
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean Bradley–Terry cross-entropy over `(winner, loser)` score pairs.
pub fn bt_loss_from_scores(pairs: &[(f64, f64)]) -> Result<f64> {
    ensure!(!pairs.is_empty(), Validation, "empty comparison batch");
    Ok(pairs.iter().map(|(w, l)| pair_loss(*w, *l)).sum::<f64>() / pairs.len() as f64)
}

/// Model inputs for rated items: image tensors and display heatmaps.
#[derive(Clone, Debug, Default)]
pub struct RewardInputs {
    pub images: HashMap<String, Tensor3>,
    pub heatmaps: HashMap<ItemRef, Tensor3>,
}

impl RewardInputs {
    /// Renders the heatmap of every item named in `comparisons` with `model`.
    pub fn from_model<'a>(
        model: &ProtoPNet,
        data: &Dataset,
        comparisons: impl IntoIterator<Item = &'a ComparisonRecord>,
    ) -> Result<Self> {
        let items: BTreeSet<&ItemRef> = comparisons.into_iter().flat_map(|c| [&c.left, &c.right]).collect();
        let mut out = Self::default();
        for item in items {
            let image = data
                .get(&item.image_id)
                .ok_or_else(|| Error::NotFound(format!("image {} named by a comparison", item.image_id)))?;
            let map = model.activation_map(model.prototype_index(item.prototype_id)?, image)?;
            out.images.entry(image.id.clone()).or_insert_with(|| image.pixels.clone());
            out.heatmaps.insert(item.clone(), heatmap_tensor(&map));
        }
        Ok(out)
    }

    fn get(&self, item: &ItemRef) -> Result<(&Tensor3, &Tensor3)> {
        let missing = || Error::NotFound(format!("no reward inputs for image {} prototype {}", item.image_id, item.prototype_id));
        Ok((self.images.get(&item.image_id).ok_or_else(missing)?, self.heatmaps.get(item).ok_or_else(missing)?))
    }
}

fn item_scores<'a>(
    net: &RewardNet,
    comparisons: &'a [ComparisonRecord],
    inputs: &RewardInputs,
) -> Result<HashMap<&'a ItemRef, f64>> {
    let items: BTreeSet<&ItemRef> = comparisons.iter().flat_map(|c| [&c.left, &c.right]).collect();
    let mut feats: HashMap<&str, Tensor3> = HashMap::new();
    let mut out = HashMap::new();
    for item in items {
        let (img, heat) = inputs.get(item)?;
        if !feats.contains_key(item.image_id.as_str()) {
            feats.insert(&item.image_id, net.image_features(img)?);
        }
        out.insert(item, net.score_features(&feats[item.image_id.as_str()], heat)?);
    }
    Ok(out)
}

/// Mean `-ln P(winner ≻ loser)` over a batch of comparisons.
pub fn bt_loss(net: &RewardNet, batch: &[ComparisonRecord], inputs: &RewardInputs) -> Result<f64> {
    let scores = item_scores(net, batch, inputs)?;
    let pairs: Vec<(f64, f64)> = batch
        .iter()
        .map(|c| {
            let (w, l) = c.winner_loser();
            (scores[w], scores[l])
        })
        .collect();
    bt_loss_from_scores(&pairs)
}

/// Loss and parameter gradient over a batch. Scores are computed once per
/// distinct item, then each item is back-propagated once with its summed
/// score gradient.
pub fn bt_loss_and_grad(net: &RewardNet, batch: &[ComparisonRecord], inputs: &RewardInputs) -> Result<(f64, RewardGrad)> {
    ensure!(!batch.is_empty(), Validation, "empty comparison batch");
    let scores = item_scores(net, batch, inputs)?;
    let n = batch.len() as f64;
    let mut dscore: HashMap<&ItemRef, f64> = HashMap::new();
    let mut loss = 0.0;
    for c in batch {
        ensure!(c.c == -1 || c.c == 1, Validation, "comparison label must be -1 or 1, got {}", c.c);
        let (w, l) = c.winner_loser();
        let (sw, sl) = (scores[w], scores[l]);
        loss += pair_loss(sw, sl);
        let g = sigmoid(sl - sw) / n;
        *dscore.entry(w).or_default() -= g;
        *dscore.entry(l).or_default() += g;
    }
    let mut grad = RewardGrad::zeros(net);
    let mut items: Vec<(&&ItemRef, &f64)> = dscore.iter().collect();
    items.sort_by(|a, b| a.0.cmp(b.0));
    for (item, d) in items {
        let (img, heat) = inputs.get(item)?;
        net.accumulate_grad(img, heat, *d, &mut grad);
    }
    Ok((loss / n, grad))
}

/// Fraction of comparisons whose preferred side gets probability above 0.5.
/// Exactly 0.5 counts as wrong.
pub fn ranking_accuracy_from_scores(comparisons: &[ComparisonRecord], score: impl Fn(&ItemRef) -> f64) -> Result<f64> {
    ensure!(!comparisons.is_empty(), Validation, "ranking accuracy over no comparisons");
    let correct = comparisons
        .iter()
        .filter(|c| {
            let p_left = pair_probability(score(&c.left), score(&c.right));
            if c.c < 0 {
                p_left > 0.5
            } else {
                p_left < 0.5
            }
        })
        .count();
    Ok(correct as f64 / comparisons.len() as f64)
}

pub fn ranking_accuracy(net: &RewardNet, comparisons: &[ComparisonRecord], inputs: &RewardInputs) -> Result<f64> {
    let scores = item_scores(net, comparisons, inputs)?;
    ranking_accuracy_from_scores(comparisons, |i| scores[i])
}

/// Mean reward of prototype `proto` (an index into `model.prototypes`) over
/// images of its class.
pub fn prototype_mean_reward(
    scorer: &dyn RewardScorer,
    model: &ProtoPNet,
    proto: usize,
    images: &[&LabeledImage],
) -> Result<f64> {
    let p = model
        .prototypes
        .get(proto)
        .ok_or_else(|| Error::NotFound(format!("prototype index {proto}")))?;
    ensure!(!images.is_empty(), Validation, "class {} has no images to score prototype {}", p.class_id, p.id);
    let mut sum = 0.0;
    for im in images {
        ensure!(
            im.class_id == p.class_id,
            Validation,
            "image {} is class {} but prototype {} is class {}",
            im.id,
            im.class_id,
            p.id,
            p.class_id
        );
        sum += scorer.score(im, &model.activation_map(proto, im)?)?;
    }
    Ok(sum / images.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Comparisons per optimisation step. A step costs one forward and
    /// backward pass per distinct item, so large batches are cheap.
    pub batch_size: usize,
    pub fusion: Fusion,
    pub seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 3e-3,
            batch_size: 4096,
            fusion: Fusion::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Trains a fresh reward net; logs held-out ranking accuracy per epoch.
pub fn train_reward(
    train: &[ComparisonRecord],
    test: &[ComparisonRecord],
    inputs: &RewardInputs,
    image_size: usize,
    cfg: &RewardTrainConfig,
) -> Result<(RewardNet, Vec<RewardEpoch>)> {
    ensure!(!train.is_empty(), Validation, "no training comparisons");
    ensure!(cfg.batch_size >= 1, Config, "batch size must be at least 1");
    ensure!(cfg.lr > 0.0 && cfg.lr.is_finite(), Config, "learning rate must be positive");
    let mut net = RewardNet::new(image_size, cfg.fusion, cfg.seed)?;
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<ComparisonRecord> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, grad) = bt_loss_and_grad(&net, &batch, inputs)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("reward loss is {loss} at epoch {epoch}, batch {batches}")));
            }
            net.apply(&grad, &mut opt);
            loss_sum += loss;
            batches += 1;
        }
        let record = RewardEpoch {
            epoch,
            train_loss: loss_sum / batches as f64,
            train_accuracy: ranking_accuracy(&net, train, inputs)?,
            test_accuracy: if test.is_empty() { None } else { Some(ranking_accuracy(&net, test, inputs)?) },
        };
        log::info!(
            "reward epoch {epoch:>3} loss {:.4} train acc {:.4} test acc {}",
            record.train_loss,
            record.train_accuracy,
            record.test_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
        );
        log.push(record);
    }
    Ok((net, log))
}
