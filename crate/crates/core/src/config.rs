//! Run configuration, dataset presets and JSON overlays.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{
    assign_splits, build_one_vs_rest, make_toy_dataset, scan_image_folder, validate_ratios, AffineSpec,
    AugmentationSpec, ColorJitterSpec, DatasetManifest, Normalization, OneVsRestSpec,
};
use crate::distill::LossWeights;
use crate::error::{config_err, Error, Result};
use crate::student::StudentConfig;
use crate::teacher::TeacherConfig;
use crate::train::{OptimizerKind, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Directory-per-class image tree.
    Folder {
        root: PathBuf,
        /// JSON manifest reused when present and written after a scan.
        #[serde(default)]
        manifest_cache: Option<PathBuf>,
    },
    /// Synthetic colour-patch images generated in memory.
    Toy {
        num_classes: usize,
        per_class: usize,
        image_size: usize,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointPaths {
    #[serde(default)]
    pub student: Option<PathBuf>,
    #[serde(default)]
    pub teacher: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub command: Option<String>,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub data: Option<DataSource>,
    /// `[train, val, test]` or `[train, val]`.
    #[serde(default)]
    pub split_ratios: Option<Vec<f64>>,
    #[serde(default)]
    pub one_vs_rest: Option<OneVsRestSpec>,
    #[serde(default)]
    pub augmentation: AugmentationSpec,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub student: StudentConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub checkpoints: CheckpointPaths,
    /// Class count used when no dataset is configured (analysis only).
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default = "default_analysis_size")]
    pub analysis_input_size: usize,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_analysis_size() -> usize {
    224
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

pub const PRESETS: [&str; 6] = ["rice-variety", "rice-leaf", "potato", "coffee", "corn", "toy"];

fn flips_rotation(deg: f32) -> AugmentationSpec {
    AugmentationSpec {
        hflip: true,
        vflip: true,
        rotation: deg,
        ..Default::default()
    }
}

fn jitter_affine_rotation(deg: f32) -> AugmentationSpec {
    AugmentationSpec {
        rotation: deg,
        color_jitter: Some(ColorJitterSpec::default()),
        affine: Some(AffineSpec::default()),
        ..Default::default()
    }
}

impl RunConfig {
    /// Baseline configuration of a named preset.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = RunConfig {
            preset: Some(name.to_string()),
            ..Default::default()
        };
        match name {
            "rice-variety" => {
                c.augmentation = flips_rotation(10.0);
            }
            "rice-leaf" => {
                c.split_ratios = Some(vec![0.8, 0.1, 0.1]);
                c.augmentation = jitter_affine_rotation(20.0);
            }
            "potato" => {
                c.split_ratios = Some(vec![0.81, 0.09, 0.10]);
                c.augmentation = jitter_affine_rotation(30.0);
                c.train.loss_weights = LossWeights::from_array([0.2, 1.0, 0.8, 0.8, 4.0, 4.0]);
                c.train.batch_size = 4;
                c.train.optimizer = OptimizerKind::Adamw;
                c.train.weight_decay = Some(1e-2);
            }
            "coffee" => {
                c.split_ratios = Some(vec![0.64, 0.16, 0.20]);
                c.augmentation = jitter_affine_rotation(20.0);
            }
            "corn" => {
                c.split_ratios = Some(vec![0.64, 0.16, 0.20]);
                c.augmentation = flips_rotation(30.0);
                c.train.batch_size = 8;
            }
            "toy" => {
                c.data = Some(DataSource::Toy {
                    num_classes: 2,
                    per_class: 200,
                    image_size: 64,
                });
                c.split_ratios = Some(vec![0.8, 0.1, 0.1]);
                c.augmentation = AugmentationSpec {
                    resize: 64,
                    hflip: true,
                    ..Default::default()
                };
                c.train.epochs = 30;
                c.train.batch_size = 32;
                c.train.learning_rate = 1e-3;
                c.train.early_stop_patience = 5;
                c.output_dir = PathBuf::from("runs/toy");
            }
            other => {
                return Err(config_err!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                ));
            }
        }
        Ok(c)
    }

    /// Parses a JSON document on top of `base`: objects merge key by key,
    /// everything else replaces. Unknown keys are rejected.
    pub fn overlay(base: &RunConfig, json: &str) -> Result<Self> {
        let patch: Value = serde_json::from_str(json).map_err(|e| config_err!("invalid config JSON: {e}"))?;
        if !patch.is_object() {
            return Err(config_err!("config must be a JSON object"));
        }
        let mut v = serde_json::to_value(base)?;
        merge(&mut v, patch);
        serde_json::from_value(v).map_err(|e| config_err!("{e}"))
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Self::overlay(&RunConfig::default(), json)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks everything that can be checked without touching the
    /// filesystem.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.augmentation.validate()?;
        self.student.validate()?;
        let sc = self.student.stage_channels();
        if self.teacher.widths[3] != sc[3] || self.teacher.aux_out_channels != sc[2] {
            return Err(config_err!(
                "teacher feature widths ({}, {}) must match student ({}, {})",
                self.teacher.widths[3],
                self.teacher.aux_out_channels,
                sc[3],
                sc[2]
            ));
        }
        if let Some(r) = &self.split_ratios {
            validate_ratios(r)?;
        }
        if let Some(DataSource::Toy {
            num_classes,
            per_class,
            image_size,
        }) = &self.data
        {
            if !(2..=8).contains(num_classes) || *per_class == 0 || *image_size < crate::student::MIN_INPUT_SIDE {
                return Err(config_err!(
                    "toy data needs 2..=8 classes, per_class >= 1 and image_size >= {}",
                    crate::student::MIN_INPUT_SIDE
                ));
            }
        }
        if self.augmentation.resize < crate::student::MIN_INPUT_SIDE
            || self.analysis_input_size < crate::student::MIN_INPUT_SIDE
        {
            return Err(config_err!(
                "input size must be at least {}",
                crate::student::MIN_INPUT_SIDE
            ));
        }
        if let Some(n) = self.num_classes {
            if n < 2 {
                return Err(config_err!("num_classes must be >= 2"));
            }
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(config_err!("output_dir must not be empty"));
        }
        Ok(())
    }

    /// Builds the dataset with splits assigned from the run seed.
    pub fn load_dataset(&self) -> Result<DatasetManifest> {
        let seed = self.train.seed;
        let ratios = || {
            self.split_ratios
                .clone()
                .ok_or_else(|| config_err!("split_ratios must be set for this dataset"))
        };
        match &self.data {
            None => Err(config_err!("no dataset configured (set data, --data or --toy)")),
            Some(DataSource::Toy {
                num_classes,
                per_class,
                image_size,
            }) => {
                let m = make_toy_dataset(*num_classes, *per_class, *image_size, seed)?;
                let m = match &self.one_vs_rest {
                    Some(spec) => build_one_vs_rest(&m, spec)?,
                    None => m,
                };
                assign_splits(&m, &ratios()?, seed)
            }
            Some(DataSource::Folder { root, manifest_cache }) => {
                if let Some(cache) = manifest_cache.as_ref().filter(|p| p.exists()) {
                    let m = DatasetManifest::load_json(cache)?;
                    if m.samples.iter().all(|s| s.split.is_some()) {
                        return Ok(m);
                    }
                    return Err(Error::Data(format!("{} lacks split labels", cache.display())));
                }
                let ratios = ratios()?;
                let m = scan_image_folder(root)?;
                for d in &m.diagnostics {
                    log::warn!("{d}");
                }
                let m = match &self.one_vs_rest {
                    Some(spec) => build_one_vs_rest(&m, spec)?,
                    None => m,
                };
                let m = assign_splits(&m, &ratios, seed)?;
                if let Some(cache) = manifest_cache {
                    m.save_json(cache)?;
                }
                Ok(m)
            }
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}
