//! Shared surface of the student and teacher networks.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::{Graph, Mode, ParamStore, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Student,
    Teacher,
}

impl NetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NetKind::Student => "student",
            NetKind::Teacher => "teacher",
        }
    }
}

/// Which classifier head of a dual-head network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Main,
    Aux,
}

impl Head {
    pub const BOTH: [Head; 2] = [Head::Main, Head::Aux];

    pub fn as_str(self) -> &'static str {
        match self {
            Head::Main => "main",
            Head::Aux => "aux",
        }
    }
}

/// The four supervision outputs of one forward pass plus named
/// intermediate feature maps.
#[derive(Clone, Debug)]
pub struct ForwardBundle {
    pub main_logits: Var,
    pub aux_logits: Var,
    /// GAP vector feeding the main classifier.
    pub f_main: Var,
    /// GAP vector of the auxiliary alignment branch.
    pub f_aux: Var,
    pub taps: Vec<(String, Var)>,
}

impl ForwardBundle {
    pub fn logits(&self, head: Head) -> Var {
        match head {
            Head::Main => self.main_logits,
            Head::Aux => self.aux_logits,
        }
    }

    pub fn tap(&self, name: &str) -> Option<Var> {
        self.taps.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Detached copies of a bundle's values, used as distillation targets.
#[derive(Clone, Debug)]
pub struct BundleValues {
    pub main_logits: Tensor,
    pub aux_logits: Tensor,
    pub f_main: Tensor,
    pub f_aux: Tensor,
}

impl BundleValues {
    pub fn from_graph(g: &Graph, b: &ForwardBundle) -> Self {
        Self {
            main_logits: g.value(b.main_logits).clone(),
            aux_logits: g.value(b.aux_logits).clone(),
            f_main: g.value(b.f_main).clone(),
            f_aux: g.value(b.f_aux).clone(),
        }
    }

    /// Re-inserts the values into `g` as gradient-free inputs.
    pub fn to_graph(&self, g: &mut Graph) -> ForwardBundle {
        ForwardBundle {
            main_logits: g.input(self.main_logits.clone()),
            aux_logits: g.input(self.aux_logits.clone()),
            f_main: g.input(self.f_main.clone()),
            f_aux: g.input(self.f_aux.clone()),
            taps: Vec::new(),
        }
    }

    pub fn logits(&self, head: Head) -> &Tensor {
        match head {
            Head::Main => &self.main_logits,
            Head::Aux => &self.aux_logits,
        }
    }
}

pub trait Network: Send + Sync {
    fn kind(&self) -> NetKind;
    fn num_classes(&self) -> usize;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<ForwardBundle>;

    /// Default Grad-CAM layer for each head.
    fn cam_layer(&self, head: Head) -> &'static str;

    /// Forward pass on a fresh graph.
    fn run(&self, x: &Tensor, mode: Mode, grad: bool) -> Result<(Graph, ForwardBundle)> {
        let mut g = if grad { Graph::new() } else { Graph::no_grad() };
        let xv = g.input(x.clone());
        let b = self.forward(&mut g, xv, mode)?;
        Ok((g, b))
    }

    /// Gradient-free eval-mode outputs.
    fn predict(&self, x: &Tensor) -> Result<BundleValues> {
        let (g, b) = self.run(x, Mode::Eval, false)?;
        Ok(BundleValues::from_graph(&g, &b))
    }
}

pub(crate) fn check_input(x: &Tensor, min_side: usize) -> Result<()> {
    let s = x.map_shape()?;
    if s.channels != 3 {
        return Err(crate::error::shape_err!(
            "expected 3 input channels, got {}",
            s.channels
        ));
    }
    if s.height < min_side || s.width < min_side {
        return Err(config_err!(
            "input {}x{} is below the minimum side {min_side}",
            s.height,
            s.width
        ));
    }
    Ok(())
}
