#![allow(dead_code)]

use hkd_core::nn::{Graph, Mode, ParamId, ParamStore, Var};
use hkd_core::{ForwardBundle, Head, NetKind, Network, Result, Tensor};

/// 1×1 conv to a single channel, GAP, then a linear layer.
pub struct OneChannel {
    store: ParamStore,
    conv: ParamId,
    fc: ParamId,
    bias: ParamId,
    classes: usize,
}

impl OneChannel {
    pub fn new(conv: [f32; 3], fc: Vec<f32>, bias: Vec<f32>) -> Self {
        let classes = fc.len();
        let mut store = ParamStore::new();
        let conv = store.add("feat.weight", Tensor::new(&[1, 3, 1, 1], conv.to_vec()).unwrap(), true);
        let fc_id = store.add("head.fc.weight", Tensor::new(&[classes, 1], fc).unwrap(), true);
        let bias = store.add("head.fc.bias", Tensor::new(&[classes], bias).unwrap(), true);
        Self {
            store,
            conv,
            fc: fc_id,
            bias,
            classes,
        }
    }
}

impl Network for OneChannel {
    fn kind(&self) -> NetKind {
        NetKind::Student
    }
    fn num_classes(&self) -> usize {
        self.classes
    }
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn forward(&self, g: &mut Graph, x: Var, _mode: Mode) -> Result<ForwardBundle> {
        let w = g.param(&self.store, self.conv);
        let a = g.conv2d(x, w, None, 1, 0)?;
        let f = g.global_avg_pool(a)?;
        let flat = g.flatten(f)?;
        let fw = g.param(&self.store, self.fc);
        let fb = g.param(&self.store, self.bias);
        let z = g.linear(flat, fw, Some(fb))?;
        Ok(ForwardBundle {
            main_logits: z,
            aux_logits: z,
            f_main: f,
            f_aux: f,
            taps: vec![("feat".into(), a)],
        })
    }
    fn cam_layer(&self, _head: Head) -> &'static str {
        "feat"
    }
}
