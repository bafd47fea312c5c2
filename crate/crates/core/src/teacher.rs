//! 18-layer residual teacher with an auxiliary alignment branch on the
//! layer-3 output.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::network::{check_input, ForwardBundle, Head, NetKind, Network};
use crate::nn::layers::{self, Activation, ConvBn, Linear};
use crate::nn::{Graph, Mode, ParamStore, Var};
use crate::student::AlignmentBlock;
use crate::train::checkpoint;

pub const MIN_INPUT_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub widths: [usize; 4],
    pub blocks: [usize; 4],
    pub aux_out_channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_weights_path: Option<PathBuf>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            widths: [64, 128, 256, 512],
            blocks: [2, 2, 2, 2],
            aux_out_channels: 352,
            pretrained_weights_path: None,
        }
    }
}

/// Two 3×3 conv-BN layers with an identity (or 1×1 projection) shortcut.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub name: String,
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub downsample: Option<ConvBn>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let n = |part: &str| format!("{name}.{part}");
        let downsample = (stride != 1 || cin != cout)
            .then(|| ConvBn::dense(store, rng, &n("downsample"), cin, cout, 1, stride, 0, Activation::None));
        Self {
            name: name.to_string(),
            conv1: ConvBn::dense(store, rng, &n("conv1"), cin, cout, 3, stride, 1, Activation::Relu),
            conv2: ConvBn::dense(store, rng, &n("conv2"), cout, cout, 3, 1, 1, Activation::None),
            downsample,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv1.forward(g, store, x, mode)?;
        let h = self.conv2.forward(g, store, h, mode)?;
        let s = match &self.downsample {
            Some(d) => d.forward(g, store, x, mode)?,
            None => x,
        };
        let y = layers::add(g, &format!("{}.add", self.name), h, s)?;
        Ok(layers::relu(g, &format!("{}.relu", self.name), y))
    }
}

#[derive(Clone, Debug)]
pub struct Teacher {
    pub config: TeacherConfig,
    num_classes: usize,
    params: ParamStore,
    pub stem: ConvBn,
    pub layers: Vec<Vec<BasicBlock>>,
    pub head: Linear,
    pub aux_block: AlignmentBlock,
    pub aux_head: Linear,
}

/// Outcome of [`load_pretrained`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Network tensors absent from the file, left at their current values.
    pub skipped: Vec<String>,
}

impl Teacher {
    pub fn new(num_classes: usize, config: TeacherConfig, rng: &mut impl Rng) -> Result<Self> {
        if num_classes < 2 {
            return Err(config_err!("need at least 2 classes, got {num_classes}"));
        }
        if config.widths.contains(&0) || config.blocks.contains(&0) || config.aux_out_channels == 0 {
            return Err(config_err!("teacher config must be positive: {:?}", config));
        }
        let mut store = ParamStore::new();
        let stem = ConvBn::dense(&mut store, rng, "stem", 3, config.widths[0], 7, 2, 3, Activation::Relu);
        let mut cin = config.widths[0];
        let mut stages = Vec::new();
        for (l, (&w, &n)) in config.widths.iter().zip(&config.blocks).enumerate() {
            let mut blocks = Vec::new();
            for b in 0..n {
                let stride = if l > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(
                    &mut store,
                    rng,
                    &format!("layer{}.{}", l + 1, b),
                    cin,
                    w,
                    stride,
                ));
                cin = w;
            }
            stages.push(blocks);
        }
        let head = Linear::new(&mut store, rng, "head.fc", cin, num_classes, true);
        // The branch reads whatever width layer 3 actually has.
        let aux_block = AlignmentBlock::new(&mut store, rng, "aux", config.widths[2], config.aux_out_channels, 2);
        let aux_head = Linear::new(&mut store, rng, "aux.fc", config.aux_out_channels, num_classes, true);
        let mut teacher = Self {
            config,
            num_classes,
            params: store,
            stem,
            layers: stages,
            head,
            aux_block,
            aux_head,
        };
        if let Some(path) = teacher.config.pretrained_weights_path.clone() {
            load_pretrained(&mut teacher, &path)?;
        }
        Ok(teacher)
    }

    pub fn feature_dims(&self) -> (usize, usize) {
        (self.config.widths[3], self.config.aux_out_channels)
    }
}

pub fn build_teacher(num_classes: usize, config: TeacherConfig, rng: &mut impl Rng) -> Result<Teacher> {
    Teacher::new(num_classes, config, rng)
}

/// Overwrites every network tensor whose name appears in the checkpoint
/// file. Shape conflicts abort before anything is modified.
pub fn load_pretrained(net: &mut dyn Network, path: &Path) -> Result<LoadReport> {
    let record = checkpoint::load_checkpoint(path)?;
    let store = net.params();
    let mut report = LoadReport::default();
    let mut updates = Vec::new();
    for (id, p) in store.iter() {
        match record.tensors.iter().find(|(n, _)| n == &p.name) {
            Some((_, t)) => {
                if t.shape() != p.values.shape() {
                    return Err(Error::Load(format!(
                        "tensor {} has shape {:?} in {}, network expects {:?}",
                        p.name,
                        t.shape(),
                        path.display(),
                        p.values.shape()
                    )));
                }
                updates.push((id, t.clone()));
                report.loaded.push(p.name.clone());
            }
            None => report.skipped.push(p.name.clone()),
        }
    }
    let store = net.params_mut();
    for (id, t) in updates {
        store.set_values(id, t)?;
    }
    Ok(report)
}

impl Network for Teacher {
    fn kind(&self) -> NetKind {
        NetKind::Teacher
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn cam_layer(&self, head: Head) -> &'static str {
        match head {
            Head::Main => "layer4",
            Head::Aux => "aux",
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<ForwardBundle> {
        check_input(g.value(x), MIN_INPUT_SIDE)?;
        let p = &self.params;
        let mut taps = Vec::new();
        let mut h = self.stem.forward(g, p, x, mode)?;
        h = layers::max_pool(g, "stem.pool", h, 3, 2, 1)?;
        taps.push(("stem".to_string(), h));
        let mut layer3 = None;
        for (l, blocks) in self.layers.iter().enumerate() {
            for b in blocks {
                h = b.forward(g, p, h, mode)?;
            }
            taps.push((format!("layer{}", l + 1), h));
            if l == 2 {
                layer3 = Some(h);
            }
        }
        let f_main = layers::global_avg_pool(g, "head.gap", h)?;
        let main_logits = self.head.forward(g, p, f_main)?;

        let a = self.aux_block.forward(g, p, layer3.expect("four layers"), mode)?;
        taps.push(("aux".to_string(), a));
        let f_aux = layers::global_avg_pool(g, "aux.gap", a)?;
        let aux_logits = self.aux_head.forward(g, p, f_aux)?;
        Ok(ForwardBundle {
            main_logits,
            aux_logits,
            f_main,
            f_aux,
            taps,
        })
    }
}
