//! Epoch-keyed batching with optional augmentation and normalisation.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{self, AugmentationSpec};
use super::{DatasetManifest, Split};
use crate::error::{config_err, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum Normalization {
    Fixed {
        mean: [f32; 3],
        std: [f32; 3],
    },
    /// Per-channel statistics of the (resized, unaugmented) train split.
    Dataset,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization::Fixed {
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalizer {
    pub fn resolve(norm: &Normalization, manifest: &DatasetManifest, resize: usize) -> Result<Self> {
        match *norm {
            Normalization::Fixed { mean, std } => {
                if std.iter().any(|s| s.is_nan() || *s <= 0.0) {
                    return Err(config_err!("normalisation std must be positive"));
                }
                Ok(Self { mean, std })
            }
            Normalization::Dataset => {
                let mut idx = manifest.split_indices(Split::Train);
                if idx.is_empty() {
                    idx = (0..manifest.len()).collect();
                }
                if idx.is_empty() {
                    return Err(config_err!("cannot compute statistics of an empty dataset"));
                }
                let mut sum = [0.0f64; 3];
                let mut sq = [0.0f64; 3];
                let mut count = 0usize;
                for i in idx {
                    let img = augment::resize(&manifest.load(i)?, resize)?;
                    let plane = img.numel() / 3;
                    for ch in 0..3 {
                        for &v in &img.data()[ch * plane..(ch + 1) * plane] {
                            sum[ch] += v as f64;
                            sq[ch] += (v as f64) * (v as f64);
                        }
                    }
                    count += plane;
                }
                let mut mean = [0.0; 3];
                let mut std = [1.0; 3];
                for ch in 0..3 {
                    let m = sum[ch] / count as f64;
                    let var = (sq[ch] / count as f64 - m * m).max(0.0);
                    mean[ch] = m as f32;
                    if var > 0.0 {
                        std[ch] = var.sqrt() as f32;
                    }
                }
                Ok(Self { mean, std })
            }
        }
    }

    pub fn apply(&self, img: &mut Tensor) {
        let plane = img.numel() / 3;
        for (ch, chunk) in img.data_mut().chunks_mut(plane).enumerate() {
            for v in chunk {
                *v = (*v - self.mean[ch]) / self.std[ch];
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    /// `(N, 3, S, S)` normalised pixels.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Manifest indices of the samples.
    pub indices: Vec<usize>,
}

/// Lazily produced batches for one epoch. Samples inside a batch are
/// prepared in parallel; the output never depends on the thread count.
pub struct BatchIter<'a> {
    manifest: &'a DatasetManifest,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    spec: AugmentationSpec,
    augment: bool,
    norm: Normalizer,
    seed: u64,
    epoch: u64,
}

impl BatchIter<'_> {
    pub fn num_samples(&self) -> usize {
        self.order.len()
    }

    fn prepare(&self, index: usize) -> Result<Tensor> {
        let mut img = augment::resize(&self.manifest.load(index)?, self.spec.resize)?;
        if self.augment && !self.spec.is_identity() {
            let mut r = rng::substream(self.seed, rng::DOMAIN_AUGMENT, &[self.epoch, index as u64]);
            let p = augment::sample_params(&self.spec, &mut r);
            img = augment::apply(&img, &p)?;
        }
        self.norm.apply(&mut img);
        Ok(img)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<SampleBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let images: Result<Vec<Tensor>> = indices.par_iter().map(|&i| self.prepare(i)).collect();
        let labels = indices.iter().map(|&i| self.manifest.samples[i].label).collect();
        Some(images.and_then(|imgs| {
            Ok(SampleBatch {
                images: Tensor::stack(&imgs)?,
                labels,
                indices,
            })
        }))
    }
}

/// Batches of `split`. With `train` set, the order is reshuffled from
/// `(seed, epoch)` and each sample is augmented from
/// `(seed, epoch, index)`; otherwise manifest order, resize and
/// normalisation only.
#[allow(clippy::too_many_arguments)]
pub fn batches<'a>(
    manifest: &'a DatasetManifest,
    split: Split,
    spec: &AugmentationSpec,
    norm: &Normalizer,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    train: bool,
) -> Result<BatchIter<'a>> {
    crate::nn::kernels::flush_denormals();
    if batch_size == 0 {
        return Err(config_err!("batch size must be positive"));
    }
    let mut order = manifest.split_indices(split);
    if order.is_empty() {
        return Err(config_err!("{} split is empty", split.as_str()));
    }
    if train {
        order.shuffle(&mut rng::substream(seed, rng::DOMAIN_SHUFFLE, &[epoch]));
    }
    Ok(BatchIter {
        manifest,
        order,
        pos: 0,
        batch_size,
        spec: *spec,
        augment: train,
        norm: *norm,
        seed,
        epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assign_splits, make_toy_dataset};

    fn toy() -> DatasetManifest {
        assign_splits(&make_toy_dataset(2, 20, 16, 0).unwrap(), &[0.8, 0.1, 0.1], 0).unwrap()
    }

    fn collect(m: &DatasetManifest, spec: &AugmentationSpec, epoch: u64, train: bool) -> Vec<SampleBatch> {
        let n = Normalizer::resolve(&Normalization::default(), m, spec.resize).unwrap();
        batches(m, Split::Train, spec, &n, 5, 3, epoch, train)
            .unwrap()
            .collect::<Result<Vec<_>>>()
            .unwrap()
    }

    #[test]
    fn no_augmentation_gives_identical_pixels_per_sample() {
        let m = toy();
        let spec = AugmentationSpec {
            resize: 16,
            ..Default::default()
        };
        let a = collect(&m, &spec, 0, true);
        assert_eq!(a, collect(&m, &spec, 0, true));
        let b = collect(&m, &spec, 1, true);
        let lookup = |bs: &[SampleBatch], idx: usize| {
            for b in bs {
                if let Some(p) = b.indices.iter().position(|&i| i == idx) {
                    let per = b.images.numel() / b.labels.len();
                    return b.images.data()[p * per..(p + 1) * per].to_vec();
                }
            }
            unreachable!()
        };
        for i in m.split_indices(Split::Train) {
            assert_eq!(lookup(&a, i), lookup(&b, i));
        }
        assert_eq!(a.iter().map(|b| b.labels.len()).sum::<usize>(), 32);
    }

    #[test]
    fn augmented_stream_is_reproducible() {
        let m = toy();
        let spec = AugmentationSpec {
            resize: 16,
            hflip: true,
            rotation: 30.0,
            color_jitter: Some(Default::default()),
            affine: Some(Default::default()),
            ..Default::default()
        };
        assert_eq!(collect(&m, &spec, 2, true), collect(&m, &spec, 2, true));
        assert_ne!(collect(&m, &spec, 2, true), collect(&m, &spec, 3, true));
    }

    #[test]
    fn eval_batches_are_in_manifest_order() {
        let m = toy();
        let spec = AugmentationSpec {
            resize: 16,
            hflip: true,
            ..Default::default()
        };
        let n = Normalizer::resolve(&Normalization::default(), &m, 16).unwrap();
        let got: Vec<usize> = batches(&m, Split::Val, &spec, &n, 3, 0, 0, false)
            .unwrap()
            .flat_map(|b| b.unwrap().indices)
            .collect();
        assert_eq!(got, m.split_indices(Split::Val));
    }

    #[test]
    fn dataset_normalisation_centres_channels() {
        let m = toy();
        let n = Normalizer::resolve(&Normalization::Dataset, &m, 16).unwrap();
        let bs = batches(
            &m,
            Split::Train,
            &AugmentationSpec {
                resize: 16,
                ..Default::default()
            },
            &n,
            64,
            0,
            0,
            false,
        )
        .unwrap()
        .collect::<Result<Vec<_>>>()
        .unwrap();
        let x = &bs[0].images;
        let plane = 16 * 16;
        for ch in 0..3 {
            let mut s = 0.0f64;
            for i in 0..x.shape()[0] {
                let off = (i * 3 + ch) * plane;
                s += x.data()[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
            }
            assert!((s / (x.shape()[0] * plane) as f64).abs() < 0.05);
        }
    }

    #[test]
    fn empty_split_is_config_error() {
        let m = make_toy_dataset(2, 4, 8, 0).unwrap();
        let n = Normalizer::resolve(&Normalization::default(), &m, 8).unwrap();
        assert!(matches!(
            batches(&m, Split::Train, &AugmentationSpec::default(), &n, 2, 0, 0, true),
            Err(crate::Error::Config(_))
        ));
    }
}
