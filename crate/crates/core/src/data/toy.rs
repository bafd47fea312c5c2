//! Synthetic colour-patch dataset for desk-scale runs.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetManifest, Sample, SampleSource};
use crate::error::{config_err, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const TOY_NOISE_STD: f32 = 0.1;
pub const TOY_BACKGROUND: f32 = 0.5;

/// Patch colours: vertices of the RGB cube.
pub const TOY_PALETTE: [[f32; 3]; 8] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 1.0, 1.0],
    [0.0, 0.0, 0.0],
];

/// Gray images with a square patch of side `3/4 * image_size` in the
/// class colour at a random position, plus N(0, 0.1) pixel noise.
/// Samples are ordered class by class.
pub fn make_toy_dataset(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<DatasetManifest> {
    if !(2..=TOY_PALETTE.len()).contains(&num_classes) {
        return Err(config_err!("toy dataset supports 2..=8 classes, got {num_classes}"));
    }
    if per_class == 0 || image_size < 4 {
        return Err(config_err!("toy dataset needs per_class >= 1 and image_size >= 4"));
    }
    let side = image_size * 3 / 4;
    let plane = image_size * image_size;
    let noise = Normal::new(0.0f32, TOY_NOISE_STD).expect("valid std");
    let mut images = Vec::with_capacity(num_classes * per_class);
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for (class, colour) in TOY_PALETTE.iter().enumerate().take(num_classes) {
        for j in 0..per_class {
            let mut r = rng::substream(seed, rng::DOMAIN_TOY, &[class as u64, j as u64]);
            let ox = r.random_range(0..=image_size - side);
            let oy = r.random_range(0..=image_size - side);
            let mut data = vec![TOY_BACKGROUND; 3 * plane];
            for (ch, &col) in colour.iter().enumerate() {
                for y in oy..oy + side {
                    let row = ch * plane + y * image_size;
                    data[row + ox..row + ox + side].fill(col);
                }
            }
            for v in data.iter_mut() {
                *v += noise.sample(&mut r);
            }
            samples.push(Sample {
                source: SampleSource::Memory(images.len()),
                label: class,
                split: None,
            });
            images.push(Tensor::new(&[3, image_size, image_size], data)?);
        }
    }
    Ok(DatasetManifest {
        class_names: (0..num_classes).map(|c| format!("class{c}")).collect(),
        samples,
        memory: Arc::new(images),
        ..Default::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel_means(t: &Tensor) -> [f32; 3] {
        let plane = t.numel() / 3;
        let mut m = [0.0; 3];
        for (ch, v) in m.iter_mut().enumerate() {
            *v = t.data()[ch * plane..(ch + 1) * plane].iter().sum::<f32>() / plane as f32;
        }
        m
    }

    #[test]
    fn counts_and_determinism() {
        let m = make_toy_dataset(2, 200, 64, 0).unwrap();
        assert_eq!(m.len(), 400);
        assert_eq!(m.class_counts(None), vec![200, 200]);
        assert_eq!(m, make_toy_dataset(2, 200, 64, 0).unwrap());
        assert_ne!(m.memory, make_toy_dataset(2, 200, 64, 1).unwrap().memory);
        assert!(make_toy_dataset(1, 10, 64, 0).is_err());
    }

    #[test]
    fn class_means_are_five_sigma_apart() {
        // Expected channel mean = background * (1 - a) + colour * a, with a
        // the patch area fraction.
        let a = (48.0f32 / 64.0).powi(2);
        let mean = |c: f32| TOY_BACKGROUND * (1.0 - a) + c * a;
        for (i, p) in TOY_PALETTE.iter().enumerate() {
            for (j, q) in TOY_PALETTE.iter().enumerate().take(i) {
                let gap = p
                    .iter()
                    .zip(q)
                    .map(|(&u, &v)| (mean(u) - mean(v)).abs())
                    .fold(0.0f32, f32::max);
                assert!(gap >= 5.0 * TOY_NOISE_STD, "classes {i},{j}: {gap}");
            }
        }
    }

    #[test]
    fn channel_mean_threshold_separates_perfectly() {
        let m = make_toy_dataset(2, 200, 64, 0).unwrap();
        // red vs green: red-channel mean exceeds 0.5 only for class 0
        for (i, s) in m.samples.iter().enumerate() {
            let mu = channel_means(&m.load(i).unwrap());
            let predicted = if mu[0] - mu[1] > 0.0 { 0 } else { 1 };
            assert_eq!(predicted, s.label);
        }
    }
}
