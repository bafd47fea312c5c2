#![allow(dead_code)]

use std::path::PathBuf;

use hkd_core::data::{DatasetManifest, Sample, SampleBatch, SampleSource};
use hkd_core::{rng, Student, StudentConfig, Teacher, TeacherConfig, Tensor};
use rand::Rng;

/// Per-variety image counts of the rice seed-purity table.
pub const RICE_VARIETIES: [(&str, usize); 9] = [
    ("BC-15", 1834),
    ("Huong Thom-1", 2116),
    ("Nep-87", 1399),
    ("Q-5", 1924),
    ("TBR-36", 1136),
    ("TBR-45", 1140),
    ("TH-35", 1012),
    ("Thien Uu-8", 1026),
    ("Xi-23", 2340),
];

/// File-backed manifest with `counts` images per class; nothing is read
/// from disk.
pub fn manifest_with_counts(counts: &[(&str, usize)]) -> DatasetManifest {
    let mut samples = Vec::new();
    for (label, (name, n)) in counts.iter().enumerate() {
        for i in 0..*n {
            samples.push(Sample {
                source: SampleSource::File(PathBuf::from(format!("{name}/{i:05}.jpg"))),
                label,
                split: None,
            });
        }
    }
    DatasetManifest {
        class_names: counts.iter().map(|(n, _)| n.to_string()).collect(),
        samples,
        ..Default::default()
    }
}

pub fn networks(classes: usize, seed: u64) -> (Teacher, Student) {
    hkd_core::train::build_networks(classes, StudentConfig::default(), TeacherConfig::default(), seed).unwrap()
}

pub fn random_images(n: usize, side: usize, seed: u64) -> Tensor {
    let mut r = rng::substream(seed, 0xba7c, &[]);
    Tensor::new(
        &[n, 3, side, side],
        (0..n * 3 * side * side).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn random_batch(n: usize, side: usize, classes: usize, seed: u64) -> SampleBatch {
    SampleBatch {
        images: random_images(n, side, seed),
        labels: (0..n).map(|i| i % classes).collect(),
        indices: (0..n).collect(),
    }
}
