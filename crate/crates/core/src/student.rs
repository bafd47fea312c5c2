//! The lightweight hybrid student.
//!
//! Stem (7×7/2 conv, 3×3/2 max pool), four stages of dense-concat
//! inverted-residual blocks separated by 2×2 average-pool transitions,
//! global average pooling and a linear classifier. An auxiliary
//! alignment branch taps the third transition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::network::{check_input, ForwardBundle, Head, NetKind, Network};
use crate::nn::layers::{self, Activation, ConvBn, Linear};
use crate::nn::{Graph, Mode, ParamStore, Var};

pub const MIN_INPUT_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridBlockConfig {
    pub growth_rate: usize,
    pub expansion: usize,
    pub bottleneck_width: usize,
}

impl Default for HybridBlockConfig {
    fn default() -> Self {
        Self {
            growth_rate: 16,
            expansion: 3,
            bottleneck_width: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub num_blocks: [usize; 4],
    pub stem_channels: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            num_blocks: [4, 6, 8, 10],
            stem_channels: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub block: HybridBlockConfig,
    pub stages: StageConfig,
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.block;
        if b.growth_rate == 0 || b.expansion == 0 || b.bottleneck_width == 0 {
            return Err(config_err!("block widths must be positive: {:?}", b));
        }
        if self.stages.stem_channels == 0 || self.stages.num_blocks.contains(&0) {
            return Err(config_err!("stage config must be positive: {:?}", self.stages));
        }
        Ok(())
    }

    /// Output channels of each stage.
    pub fn stage_channels(&self) -> [usize; 4] {
        let mut c = self.stages.stem_channels;
        let mut out = [0; 4];
        for (o, &n) in out.iter_mut().zip(&self.stages.num_blocks) {
            c += n * self.block.growth_rate;
            *o = c;
        }
        out
    }
}

/// Bottleneck → inverted residual (main path plus linear shortcut) →
/// concatenation with the block input.
#[derive(Clone, Debug)]
pub struct HybridBlock {
    pub name: String,
    pub in_channels: usize,
    pub bottleneck: ConvBn,
    pub expand: ConvBn,
    pub depthwise: ConvBn,
    pub project: ConvBn,
    pub shortcut: ConvBn,
}

impl HybridBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        cfg: &HybridBlockConfig,
    ) -> Self {
        let bw = cfg.bottleneck_width;
        let ew = bw * cfg.expansion;
        let k = cfg.growth_rate;
        let n = |part: &str| format!("{name}.{part}");
        Self {
            name: name.to_string(),
            in_channels,
            bottleneck: ConvBn::dense(
                store,
                rng,
                &n("bottleneck"),
                in_channels,
                bw,
                1,
                1,
                0,
                Activation::Relu6,
            ),
            expand: ConvBn::dense(store, rng, &n("expand"), bw, ew, 1, 1, 0, Activation::Relu6),
            depthwise: ConvBn::depthwise(store, rng, &n("depthwise"), ew, 3, 1, 1, Activation::Relu6),
            project: ConvBn::dense(store, rng, &n("project"), ew, k, 1, 1, 0, Activation::None),
            shortcut: ConvBn::dense(store, rng, &n("shortcut"), bw, k, 1, 1, 0, Activation::None),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.project.bn.features
    }

    /// Returns `(block output, x_res)`.
    pub fn forward_parts(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<(Var, Var)> {
        let xb = self.bottleneck.forward(g, store, x, mode)?;
        let f = self.expand.forward(g, store, xb, mode)?;
        let f = self.depthwise.forward(g, store, f, mode)?;
        let f = self.project.forward(g, store, f, mode)?;
        let w = self.shortcut.forward(g, store, xb, mode)?;
        let xres = layers::add(g, &format!("{}.residual_add", self.name), f, w)?;
        let y = layers::concat_channels(g, &format!("{}.concat", self.name), x, xres)?;
        Ok((y, xres))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        Ok(self.forward_parts(g, store, x, mode)?.0)
    }
}

/// Depthwise 3×3 → pointwise 1×1 main path plus a 1×1 projection
/// shortcut, summed. Used by both networks' auxiliary branches.
#[derive(Clone, Debug)]
pub struct AlignmentBlock {
    pub name: String,
    pub depthwise: ConvBn,
    pub pointwise: ConvBn,
    pub shortcut: ConvBn,
}

impl AlignmentBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    ) -> Self {
        let n = |part: &str| format!("{name}.{part}");
        Self {
            name: name.to_string(),
            depthwise: ConvBn::depthwise(
                store,
                rng,
                &n("depthwise"),
                in_channels,
                3,
                stride,
                1,
                Activation::Relu6,
            ),
            pointwise: ConvBn::dense(
                store,
                rng,
                &n("pointwise"),
                in_channels,
                out_channels,
                1,
                1,
                0,
                Activation::None,
            ),
            shortcut: ConvBn::dense(
                store,
                rng,
                &n("shortcut"),
                in_channels,
                out_channels,
                1,
                stride,
                0,
                Activation::None,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let m = self.depthwise.forward(g, store, x, mode)?;
        let m = self.pointwise.forward(g, store, m, mode)?;
        let s = self.shortcut.forward(g, store, x, mode)?;
        layers::add(g, &format!("{}.add", self.name), m, s)
    }
}

#[derive(Clone, Debug)]
pub struct Student {
    pub config: StudentConfig,
    num_classes: usize,
    params: ParamStore,
    pub stem: ConvBn,
    pub stages: Vec<Vec<HybridBlock>>,
    pub head: Linear,
    pub aux_block: AlignmentBlock,
    pub aux_head: Linear,
}

impl Student {
    pub fn new(num_classes: usize, config: StudentConfig, rng: &mut impl Rng) -> Result<Self> {
        if num_classes < 2 {
            return Err(config_err!("need at least 2 classes, got {num_classes}"));
        }
        config.validate()?;
        let mut store = ParamStore::new();
        let stem_c = config.stages.stem_channels;
        let stem = ConvBn::dense(&mut store, rng, "stem", 3, stem_c, 7, 2, 3, Activation::Relu6);
        let mut c = stem_c;
        let mut stages = Vec::with_capacity(4);
        for (s, &n) in config.stages.num_blocks.iter().enumerate() {
            let mut blocks = Vec::with_capacity(n);
            for j in 0..n {
                let b = HybridBlock::new(&mut store, rng, &format!("stage{}.block{}", s + 1, j), c, &config.block);
                c = b.out_channels();
                blocks.push(b);
            }
            stages.push(blocks);
        }
        let head = Linear::new(&mut store, rng, "head.fc", c, num_classes, true);
        let aux_c = config.stage_channels()[2];
        let aux_block = AlignmentBlock::new(&mut store, rng, "aux", aux_c, aux_c, 1);
        let aux_head = Linear::new(&mut store, rng, "aux.fc", aux_c, num_classes, true);
        Ok(Self {
            config,
            num_classes,
            params: store,
            stem,
            stages,
            head,
            aux_block,
            aux_head,
        })
    }

    pub fn feature_dims(&self) -> (usize, usize) {
        let c = self.config.stage_channels();
        (c[3], c[2])
    }
}

/// Builds the student with `num_classes` outputs.
pub fn build_student(num_classes: usize, config: StudentConfig, rng: &mut impl Rng) -> Result<Student> {
    Student::new(num_classes, config, rng)
}

impl Network for Student {
    fn kind(&self) -> NetKind {
        NetKind::Student
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
            Head::Main => "stage4",
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
        for (s, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                h = b.forward(g, p, h, mode)?;
            }
            taps.push((format!("stage{}", s + 1), h));
            if s < 3 {
                h = layers::avg_pool(g, &format!("down{}", s + 1), h, 2, 2)?;
                taps.push((format!("down{}", s + 1), h));
            }
        }
        let f_main = layers::global_avg_pool(g, "head.gap", h)?;
        let main_logits = self.head.forward(g, p, f_main)?;

        let tap = taps
            .iter()
            .find(|(n, _)| n == "down3")
            .map(|t| t.1)
            .expect("down3 is always produced");
        let a = self.aux_block.forward(g, p, tap, mode)?;
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
