//! Dataset manifests, stratified splits, one-vs-rest construction,
//! augmentation and batching.

mod augment;
mod loader;
mod toy;

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use augment::{
    color_jitter, hflip, load_image, resize, sample_params, vflip, warp, AffineSpec, AugmentParams, AugmentationSpec,
    ColorJitterSpec,
};
pub use loader::{batches, BatchIter, Normalization, Normalizer, SampleBatch};
pub use toy::{make_toy_dataset, TOY_NOISE_STD, TOY_PALETTE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(config_err!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

/// Where the pixels of a sample come from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    File(PathBuf),
    /// Index into [`DatasetManifest::memory`].
    Memory(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub source: SampleSource,
    pub label: usize,
    pub split: Option<Split>,
}

impl Sample {
    pub fn describe(&self) -> String {
        match &self.source {
            SampleSource::File(p) => p.display().to_string(),
            SampleSource::Memory(i) => format!("<memory #{i}>"),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    /// Files skipped during scanning, with the reason.
    #[serde(default)]
    pub diagnostics: Vec<String>,
    #[serde(default)]
    pub split_seed: Option<u64>,
    #[serde(default)]
    pub negative_seed: Option<u64>,
    /// In-memory images as `(3, H, W)` tensors in `[0, 1]`-ish range.
    #[serde(skip)]
    pub memory: Arc<Vec<Tensor>>,
}

impl PartialEq for DatasetManifest {
    fn eq(&self, other: &Self) -> bool {
        self.class_names == other.class_names
            && self.samples == other.samples
            && self.diagnostics == other.diagnostics
            && self.split_seed == other.split_seed
            && self.negative_seed == other.negative_seed
            && self.memory == other.memory
    }
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Manifest indices of the samples in `split`, in manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == Some(split))
            .collect()
    }

    pub fn class_counts(&self, split: Option<Split>) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for s in &self.samples {
            if split.is_none() || s.split == split {
                c[s.label] += 1;
            }
        }
        c
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    /// Decoded `(3, H, W)` pixels of one sample.
    pub fn load(&self, index: usize) -> Result<Tensor> {
        match &self.samples[index].source {
            SampleSource::File(p) => load_image(p),
            SampleSource::Memory(i) => self
                .memory
                .get(*i)
                .cloned()
                .ok_or_else(|| Error::Data(format!("in-memory image #{i} is missing"))),
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        if self.samples.iter().any(|s| matches!(s.source, SampleSource::Memory(_))) {
            return Err(Error::Data("in-memory datasets cannot be cached as JSON".into()));
        }
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::Data("manifest has no classes".into()));
        }
        let mut seen = HashSet::new();
        for s in &self.samples {
            if s.label >= self.num_classes() {
                return Err(Error::Data(format!("label {} out of range", s.label)));
            }
            if !seen.insert(&s.source) {
                return Err(Error::Data(format!("duplicate sample {}", s.describe())));
            }
        }
        Ok(())
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn has_image_extension(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(e.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Enumerates a directory-per-class tree in sorted order. Files whose
/// header cannot be read are skipped and recorded in `diagnostics`;
/// classes left without images are dropped with a warning.
pub fn scan_image_folder(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    let mut m = DatasetManifest::default();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut files = Vec::new();
        for f in sorted_entries(&dir)?.into_iter().filter(|p| p.is_file()) {
            if !has_image_extension(&f) {
                m.diagnostics.push(format!("{}: not an image file", f.display()));
                continue;
            }
            match image::ImageReader::open(&f).and_then(|r| r.with_guessed_format()) {
                Ok(r) => match r.into_dimensions() {
                    Ok(_) => files.push(f),
                    Err(e) => m.diagnostics.push(format!("{}: {e}", f.display())),
                },
                Err(e) => m.diagnostics.push(format!("{}: {e}", f.display())),
            }
        }
        if files.is_empty() {
            log::warn!("class folder {} has no readable images; excluded", dir.display());
            m.diagnostics
                .push(format!("{}: empty class folder excluded", dir.display()));
            continue;
        }
        let label = m.class_names.len();
        m.class_names.push(name);
        m.samples.extend(files.into_iter().map(|f| Sample {
            source: SampleSource::File(f),
            label,
            split: None,
        }));
    }
    if m.class_names.is_empty() {
        return Err(Error::Data(format!(
            "no class folders with images under {}",
            root.display()
        )));
    }
    Ok(m)
}

/// Largest-remainder apportionment of `n` items over `ratios`; ties in the
/// remainder go to the earlier split.
pub fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

pub fn validate_ratios(ratios: &[f64]) -> Result<()> {
    if !(2..=3).contains(&ratios.len()) {
        return Err(config_err!("expected 2 or 3 split ratios, got {}", ratios.len()));
    }
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(config_err!("split ratios must all be positive: {ratios:?}"));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(config_err!("split ratios sum to {sum}, expected 1"));
    }
    Ok(())
}

/// Per-class stratified assignment to train / val (/ test).
pub fn assign_splits(manifest: &DatasetManifest, ratios: &[f64], seed: u64) -> Result<DatasetManifest> {
    validate_ratios(ratios)?;
    let mut out = manifest.clone();
    let mut rng = rng::substream(seed, rng::DOMAIN_SPLIT, &[]);
    for class in 0..manifest.num_classes() {
        let mut idx: Vec<usize> = (0..out.samples.len())
            .filter(|&i| out.samples[i].label == class)
            .collect();
        if idx.len() < ratios.len() {
            return Err(Error::Data(format!(
                "class {} has {} samples, fewer than {} splits",
                manifest.class_names[class],
                idx.len(),
                ratios.len()
            )));
        }
        idx.shuffle(&mut rng);
        let counts = largest_remainder(idx.len(), ratios);
        let mut it = idx.into_iter();
        for (k, &c) in counts.iter().enumerate() {
            for i in it.by_ref().take(c) {
                out.samples[i].split = Some(Split::ALL[k]);
            }
        }
    }
    out.split_seed = Some(seed);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OneVsRestSpec {
    pub target: String,
    #[serde(default)]
    pub seed: u64,
    /// Allowed `|positives - negatives|`.
    #[serde(default)]
    pub margin: usize,
    /// Explicit negative count; defaults to the positive count.
    #[serde(default)]
    pub negative_count: Option<usize>,
}

/// Two-class manifest `["rest", target]`: every target file is a positive
/// (label 1), negatives are a seeded uniform sample without replacement
/// from all other classes (label 0). Existing split labels are kept.
pub fn build_one_vs_rest(manifest: &DatasetManifest, spec: &OneVsRestSpec) -> Result<DatasetManifest> {
    let target = manifest
        .class_index(&spec.target)
        .ok_or_else(|| config_err!("target class {:?} not in manifest", spec.target))?;
    let positives: Vec<usize> = (0..manifest.len())
        .filter(|&i| manifest.samples[i].label == target)
        .collect();
    let pool: Vec<usize> = (0..manifest.len())
        .filter(|&i| manifest.samples[i].label != target)
        .collect();
    let p = positives.len();
    let wanted = spec.negative_count.unwrap_or(p);
    if wanted.abs_diff(p) > spec.margin {
        return Err(config_err!(
            "negative count {wanted} is outside margin {} of {p} positives",
            spec.margin
        ));
    }
    let k = if pool.len() >= wanted {
        wanted
    } else if spec.negative_count.is_none() && p - pool.len() <= spec.margin {
        pool.len()
    } else {
        return Err(Error::Data(format!(
            "only {} negatives available for {wanted} requested",
            pool.len()
        )));
    };
    let mut rng = rng::substream(spec.seed, rng::DOMAIN_NEGATIVES, &[]);
    let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|j| pool[j])
        .collect();
    chosen.sort_unstable();
    let mut keep: Vec<(usize, usize)> = positives.iter().map(|&i| (i, 1)).collect();
    keep.extend(chosen.into_iter().map(|i| (i, 0)));
    keep.sort_unstable();
    Ok(DatasetManifest {
        class_names: vec!["rest".into(), spec.target.clone()],
        samples: keep
            .into_iter()
            .map(|(i, label)| Sample {
                label,
                ..manifest.samples[i].clone()
            })
            .collect(),
        diagnostics: manifest.diagnostics.clone(),
        split_seed: manifest.split_seed,
        negative_seed: Some(spec.seed),
        memory: Arc::clone(&manifest.memory),
    })
}
