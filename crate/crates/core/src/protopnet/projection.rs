use super::{squared_distance, Backbone, LatentGrid, PatchSource, Prototype};
use crate::data::LabeledImage;
use crate::error::{ensure, Result};

/// Replaces every prototype with its nearest latent patch (squared Euclidean)
/// among the training images of its own class.
pub fn push_prototypes(backbone: &Backbone, protos: &[Prototype], train: &[&LabeledImage]) -> Result<Vec<Prototype>> {
    let latents = train
        .iter()
        .map(|im| backbone.forward(im))
        .collect::<Result<Vec<_>>>()?;
    push_with_latents(protos, train, &latents)
}

pub(crate) fn push_with_latents(
    protos: &[Prototype],
    train: &[&LabeledImage],
    latents: &[LatentGrid],
) -> Result<Vec<Prototype>> {
    protos
        .iter()
        .map(|p| {
            let mut best: Option<(f64, usize, usize)> = None;
            for (i, (im, grid)) in train.iter().zip(latents).enumerate() {
                if im.class_id != p.class_id {
                    continue;
                }
                for (loc, patch) in grid.patches().enumerate() {
                    let d = squared_distance(patch, &p.vector);
                    if best.is_none_or(|(bd, _, _)| d < bd) {
                        best = Some((d, i, loc));
                    }
                }
            }
            let (_, i, loc) = best.ok_or_else(|| {
                crate::Error::Validation(format!(
                    "prototype {} belongs to class {} which has no training images",
                    p.id, p.class_id
                ))
            })?;
            let grid = &latents[i];
            Ok(Prototype {
                id: p.id,
                class_id: p.class_id,
                vector: grid.patch(loc).to_vec(),
                source: Some(PatchSource {
                    image_id: train[i].id.clone(),
                    row: loc / grid.width,
                    col: loc % grid.width,
                }),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NearestImage {
    /// Index into the image list the search ran over.
    pub index: usize,
    pub class_id: usize,
    /// Distance from the prototype to the image's closest patch.
    pub distance: f64,
}

/// For each prototype, the `top` images whose closest patch is nearest, one
/// entry per image, ties broken by image order.
pub fn nearest_images(protos: &[Prototype], images: &[&LabeledImage], latents: &[LatentGrid], top: usize) -> Vec<Vec<NearestImage>> {
    protos
        .iter()
        .map(|p| {
            let mut per_image: Vec<NearestImage> = images
                .iter()
                .zip(latents)
                .enumerate()
                .map(|(index, (im, grid))| NearestImage {
                    index,
                    class_id: im.class_id,
                    distance: grid
                        .patches()
                        .map(|z| squared_distance(z, &p.vector))
                        .fold(f64::INFINITY, f64::min),
                })
                .collect();
            per_image.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
            per_image.truncate(top);
            per_image
        })
        .collect()
}

/// Drops prototypes whose `top` nearest training images include more than
/// `threshold` images of other classes.
pub fn prune_prototypes(
    backbone: &Backbone,
    protos: &[Prototype],
    train: &[&LabeledImage],
    top: usize,
    threshold: usize,
) -> Result<Vec<Prototype>> {
    ensure!(top >= 1, Config, "prune neighbourhood must be at least 1");
    let latents = train
        .iter()
        .map(|im| backbone.forward(im))
        .collect::<Result<Vec<_>>>()?;
    Ok(prune_with_latents(protos, train, &latents, top, threshold))
}

pub(crate) fn prune_with_latents(
    protos: &[Prototype],
    train: &[&LabeledImage],
    latents: &[LatentGrid],
    top: usize,
    threshold: usize,
) -> Vec<Prototype> {
    let nearest = nearest_images(protos, train, latents, top);
    protos
        .iter()
        .zip(nearest)
        .filter(|(p, near)| near.iter().filter(|n| n.class_id != p.class_id).count() <= threshold)
        .map(|(p, _)| p.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::tensor::Tensor3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(id: &str, class_id: usize) -> LabeledImage {
        LabeledImage {
            id: id.into(),
            pixels: Tensor3::zeros(3, 1, 1),
            class_id,
            split: Split::Train,
            augmented_from: None,
        }
    }

    fn proto(id: usize, class_id: usize, vector: Vec<f64>) -> Prototype {
        Prototype {
            id,
            class_id,
            vector,
            source: None,
        }
    }

    fn random_grid(rng: &mut ChaCha8Rng, patches: usize, d: usize) -> LatentGrid {
        LatentGrid::from_patches(2, patches / 2, d, (0..patches * d).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn push_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let images = [image("a", 0), image("b", 1), image("c", 0)];
        let refs: Vec<&LabeledImage> = images.iter().collect();
        let latents: Vec<LatentGrid> = (0..3).map(|_| random_grid(&mut rng, 4, 3)).collect();
        let protos: Vec<Prototype> = (0..4)
            .map(|j| proto(j, j % 2, (0..3).map(|_| rng.gen_range(0.0..1.0)).collect()))
            .collect();
        let pushed = push_with_latents(&protos, &refs, &latents).unwrap();
        for (p, q) in protos.iter().zip(&pushed) {
            // Exhaustive oracle: enumerate every (image, patch) of the class.
            let mut candidates = Vec::new();
            for (i, im) in images.iter().enumerate() {
                if im.class_id == p.class_id {
                    for loc in 0..4 {
                        let z = latents[i].patch(loc);
                        let d: f64 = z.iter().zip(&p.vector).map(|(a, b)| (a - b).powi(2)).sum();
                        candidates.push((d, i, loc));
                    }
                }
            }
            let (_, i, loc) = candidates.iter().cloned().fold((f64::INFINITY, 0, 0), |acc, c| if c.0 < acc.0 { c } else { acc });
            assert_eq!(q.vector, latents[i].patch(loc));
            let src = q.source.as_ref().unwrap();
            assert_eq!(src.image_id, images[i].id);
            assert_eq!((src.row, src.col), (loc / 2, loc % 2));
            let min_after = latents[i].patches().map(|z| squared_distance(z, &q.vector)).fold(f64::INFINITY, f64::min);
            assert_eq!(min_after, 0.0);
        }
    }

    #[test]
    fn push_fixed_point_and_forced_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let images = [image("a", 0), image("b", 1)];
        let refs: Vec<&LabeledImage> = images.iter().collect();
        let latents = vec![
            LatentGrid::from_patches(1, 1, 3, vec![0.1, 0.2, 0.3]),
            LatentGrid::from_patches(1, 1, 3, vec![0.9, 0.8, 0.7]),
        ];
        let protos = vec![
            proto(0, 0, vec![0.1, 0.2, 0.3]),
            proto(1, 1, (0..3).map(|_| rng.gen_range(0.0..1.0)).collect()),
        ];
        let pushed = push_with_latents(&protos, &refs, &latents).unwrap();
        assert_eq!(pushed[0].vector, protos[0].vector);
        assert_eq!(pushed[0].source.as_ref().unwrap().image_id, "a");
        assert_eq!(pushed[1].vector, vec![0.9, 0.8, 0.7]);
    }

    #[test]
    fn push_fails_for_class_without_images() {
        let images = [image("a", 0)];
        let refs: Vec<&LabeledImage> = images.iter().collect();
        let latents = vec![LatentGrid::from_patches(1, 1, 2, vec![0.0, 0.0])];
        let err = push_with_latents(&[proto(0, 1, vec![0.0, 0.0])], &refs, &latents).unwrap_err();
        assert!(err.to_string().contains("class 1"));
    }

    #[test]
    fn nearest_images_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let images = [image("a", 0), image("b", 1), image("c", 2)];
        let refs: Vec<&LabeledImage> = images.iter().collect();
        let latents: Vec<LatentGrid> = (0..3).map(|_| random_grid(&mut rng, 4, 3)).collect();
        let protos: Vec<Prototype> = (0..3)
            .map(|j| proto(j, j, (0..3).map(|_| rng.gen_range(0.0..1.0)).collect()))
            .collect();
        let near = nearest_images(&protos, &refs, &latents, 2);
        for (p, n) in protos.iter().zip(&near) {
            let mut all: Vec<(f64, usize)> = (0..3)
                .map(|i| {
                    let d = (0..4)
                        .map(|l| latents[i].patch(l).iter().zip(&p.vector).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                        .fold(f64::INFINITY, f64::min);
                    (d, i)
                })
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0));
            assert_eq!(n.iter().map(|x| x.index).collect::<Vec<_>>(), vec![all[0].1, all[1].1]);
        }
    }

    fn banded_instance() -> (Vec<LabeledImage>, Vec<LatentGrid>) {
        // Each image: patch 0 is a background vector shared by every class,
        // patch 1 is a class-specific object vector.
        let images = vec![image("a0", 0), image("a1", 0), image("b0", 1), image("b1", 1), image("c0", 2), image("c1", 2)];
        let latents = images
            .iter()
            .enumerate()
            .map(|(i, im)| {
                let mut v = vec![0.5, 0.5, 0.5];
                let mut object = vec![0.0; 3];
                object[im.class_id] = 1.0 + 0.01 * i as f64;
                v.extend(object);
                LatentGrid::from_patches(1, 2, 3, v)
            })
            .collect();
        (images, latents)
    }

    #[test]
    fn prune_keeps_class_pure_prototypes() {
        let (images, latents) = banded_instance();
        let refs: Vec<&LabeledImage> = images.iter().collect();
        let protos: Vec<Prototype> = (0..3)
            .map(|k| proto(k, k, latents[2 * k].patch(1).to_vec()))
            .collect();
        let kept = prune_with_latents(&protos, &refs, &latents, 2, 0);
        assert_eq!(kept, protos);
    }

    #[test]
    fn prune_removes_shared_background_prototype() {
        let (images, latents) = banded_instance();
        let refs: Vec<&LabeledImage> = images.iter().collect();
        let background = proto(3, 1, vec![0.5, 0.5, 0.5]);
        let object = proto(4, 1, latents[2].patch(1).to_vec());
        let protos = vec![background.clone(), object.clone()];
        // Oracle: the background vector is at distance 0 from all six images,
        // so its top-2 by image order is a0, a1 -> 2 mismatches. The object
        // prototype's top-2 is b0, b1 -> 0 mismatches.
        let near = nearest_images(&protos, &refs, &latents, 2);
        let mismatches: Vec<usize> = near.iter().map(|n| n.iter().filter(|x| x.class_id != 1).count()).collect();
        assert_eq!(mismatches, vec![2, 0]);
        let kept = prune_with_latents(&protos, &refs, &latents, 2, 1);
        assert_eq!(kept, vec![object]);
    }

    #[test]
    fn prune_threshold_equal_to_neighbourhood_is_vacuous() {
        let (images, latents) = banded_instance();
        let refs: Vec<&LabeledImage> = images.iter().collect();
        let protos = vec![proto(0, 0, vec![0.5, 0.5, 0.5, 0.0, 0.0, 0.0][..3].to_vec())];
        assert_eq!(prune_with_latents(&protos, &refs, &latents, 4, 4), protos);
    }
}
