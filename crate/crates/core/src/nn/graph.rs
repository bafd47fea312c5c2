//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass.
//! [`Graph::backward`] then walks the tape in reverse and returns the
//! gradient of a scalar with respect to every parameter (and any
//! explicitly retained intermediate value) that it depends on.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, conv::ConvGeom, depthwise::DwGeom, norm::BnGeom, pool::PoolGeom};
use super::param::{ParamId, ParamKey, ParamStore};
use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm behaviour: batch statistics (and running-stat updates) in
/// `Train`, running statistics in `Eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamKey),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        geom: DwGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        batch_mode: bool,
        geom: BnGeom,
    },
    Relu(Var),
    Relu6(Var),
    MaxPool {
        x: Var,
        arg: Vec<u32>,
        geom: PoolGeom,
    },
    AvgPool {
        x: Var,
        geom: PoolGeom,
    },
    GlobalAvgPool {
        x: Var,
        plane: usize,
    },
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    AddScalar(Var),
    WeightedSum(Vec<(Var, f32)>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    KlDiv {
        target: Var,
        learner: Var,
        tau: f32,
        log_p: Vec<f32>,
        log_q: Vec<f32>,
    },
    Euclidean {
        a: Var,
        b: Var,
        norms: Vec<f32>,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Pick {
        x: Var,
        class: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// One layer-level operation as seen by the analysis tools.
#[derive(Clone, Debug)]
pub struct TraceRecord {
    pub name: String,
    pub spec: super::layers::LayerSpec,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    no_grad: bool,
    state_updates: Vec<(ParamKey, Tensor)>,
    trace: Option<Vec<TraceRecord>>,
}

/// Result of [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamKey, Tensor>,
    retained: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn params(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.params.iter()
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.params.get(&store.key(id))
    }

    pub fn retained(&self, v: Var) -> Option<&Tensor> {
        self.retained.get(&v)
    }
}

fn log_softmax_rows(z: &[f32], cols: usize, tau: f32) -> Vec<f32> {
    let mut out = vec![0.0; z.len()];
    for (row, o) in z.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v / tau));
        let lse = row.iter().map(|&v| (v / tau - max).exp()).sum::<f32>().ln() + max;
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = v / tau - lse;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        super::kernels::flush_denormals();
        Self::default()
    }

    /// A graph that records values only; nothing on it requires gradients.
    pub fn no_grad() -> Self {
        super::kernels::flush_denormals();
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    /// A gradient-free graph that also collects a [`TraceRecord`] per layer.
    pub fn tracing() -> Self {
        super::kernels::flush_denormals();
        Self {
            no_grad: true,
            trace: Some(Vec::new()),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_tracing(&self) -> bool {
        self.trace.is_some()
    }

    pub fn record(&mut self, record: TraceRecord) {
        if let Some(t) = self.trace.as_mut() {
            t.push(record);
        }
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.trace.take().unwrap_or_default()
    }

    /// Running-statistic updates produced by train-mode batch norm.
    pub fn take_state_updates(&mut self) -> Vec<(ParamKey, Tensor)> {
        std::mem::take(&mut self.state_updates)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(Arc::new(value), op, requires_grad)
    }

    fn push_node(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; gradients are never propagated into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_node(Arc::new(t), Op::Leaf, false)
    }

    /// A leaf whose gradient can be retained by [`Graph::backward_retaining`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = !self.no_grad;
        self.push_node(Arc::new(t), Op::Leaf, rg)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let rg = !self.no_grad && p.trainable;
        self.push_node(Arc::clone(&p.values), Op::Param(store.key(id)), rg)
    }

    /// Same value, cut off from the gradient tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.push_node(value, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let s = self.value(x).map_shape()?;
        let (cout, cin, kh, kw) = match self.shape(w) {
            &[a, b, c, d] => (a, b, c, d),
            other => return Err(shape_err!("conv weight must be rank 4, got {:?}", other)),
        };
        if cin != s.channels {
            return Err(shape_err!(
                "conv expects {cin} input channels, input has {}",
                s.channels
            ));
        }
        if kh != kw {
            return Err(config_err!("only square kernels are supported, got {kh}x{kw}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err!("conv bias must have {cout} entries"));
            }
        }
        let (out_h, out_w) = match (
            kernels::window_out(s.height, kh, stride, pad),
            kernels::window_out(s.width, kw, stride, pad),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(config_err!(
                    "conv {kh}x{kw}/{stride} pad {pad} yields no output on {}x{}",
                    s.height,
                    s.width
                ))
            }
        };
        let geom = ConvGeom {
            batch: s.batch,
            in_channels: cin,
            height: s.height,
            width: s.width,
            out_channels: cout,
            kernel: kh,
            stride,
            pad,
            out_h,
            out_w,
        };
        let y = kernels::conv::forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(&[s.batch, cout, out_h, out_w], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let s = self.value(x).map_shape()?;
        let (c, k) = match self.shape(w) {
            &[c, 1, kh, kw] if kh == kw => (c, kh),
            other => return Err(shape_err!("depthwise weight must be (C,1,K,K), got {:?}", other)),
        };
        if c != s.channels {
            return Err(shape_err!("depthwise expects {c} channels, input has {}", s.channels));
        }
        let (out_h, out_w) = match (
            kernels::window_out(s.height, k, stride, pad),
            kernels::window_out(s.width, k, stride, pad),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(config_err!("depthwise {k}x{k}/{stride} yields no output")),
        };
        let geom = DwGeom {
            batch: s.batch,
            channels: c,
            height: s.height,
            width: s.width,
            kernel: k,
            stride,
            pad,
            out_h,
            out_w,
        };
        let y = kernels::depthwise::forward(&geom, self.value(x).data(), self.value(w).data());
        let out = Tensor::new(&[s.batch, c, out_h, out_w], y)?;
        Ok(self.push(out, Op::Depthwise { x, w, geom }, &[x, w]))
    }

    /// Batch normalization. In train mode the running statistics in
    /// `running` (mean, var) are scheduled for update with `momentum`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (ParamKey, ParamKey),
        running_values: (&Tensor, &Tensor),
        mode: Mode,
        momentum: f32,
        eps: f32,
    ) -> Result<Var> {
        let s = self.value(x).map_shape()?;
        if self.shape(gamma) != [s.channels] || self.shape(beta) != [s.channels] {
            return Err(shape_err!("batch norm affine must have {} entries", s.channels));
        }
        let geom = BnGeom {
            batch: s.batch,
            channels: s.channels,
            plane: s.plane(),
        };
        let (mean, var) = match mode {
            Mode::Train => {
                let count = geom.batch * geom.plane;
                if count < 2 {
                    return Err(config_err!(
                        "train-mode batch norm needs more than one value per channel"
                    ));
                }
                let (mean, var) = kernels::norm::batch_stats(&geom, self.value(x).data());
                let unbias = count as f32 / (count as f32 - 1.0);
                let rm: Vec<f32> = running_values
                    .0
                    .data()
                    .iter()
                    .zip(&mean)
                    .map(|(r, m)| (1.0 - momentum) * r + momentum * m)
                    .collect();
                let rv: Vec<f32> = running_values
                    .1
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(r, v)| (1.0 - momentum) * r + momentum * v * unbias)
                    .collect();
                self.state_updates.push((running.0, Tensor::new(&[s.channels], rm)?));
                self.state_updates.push((running.1, Tensor::new(&[s.channels], rv)?));
                (mean, var)
            }
            Mode::Eval => (running_values.0.data().to_vec(), running_values.1.data().to_vec()),
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let y = kernels::norm::normalize(
            &geom,
            self.value(x).data(),
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let out = Tensor::new(self.shape(x), y)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_mode: mode == Mode::Train,
                geom,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.clamp(0.0, 6.0));
        self.push(out, Op::Relu6(x), &[x])
    }

    fn pool_geom(&self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<(PoolGeom, usize, usize)> {
        let s = self.value(x).map_shape()?;
        if kernel > s.height + 2 * pad || kernel > s.width + 2 * pad {
            return Err(config_err!(
                "pool window {kernel} exceeds input {}x{}",
                s.height,
                s.width
            ));
        }
        let out_h =
            kernels::window_out(s.height, kernel, stride, pad).ok_or_else(|| config_err!("pool yields no output"))?;
        let out_w =
            kernels::window_out(s.width, kernel, stride, pad).ok_or_else(|| config_err!("pool yields no output"))?;
        Ok((
            PoolGeom {
                planes: s.batch * s.channels,
                height: s.height,
                width: s.width,
                kernel,
                stride,
                pad,
                out_h,
                out_w,
            },
            s.batch,
            s.channels,
        ))
    }

    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (geom, n, c) = self.pool_geom(x, kernel, stride, pad)?;
        let (y, arg) = kernels::pool::max_forward(&geom, self.value(x).data());
        let out = Tensor::new(&[n, c, geom.out_h, geom.out_w], y)?;
        Ok(self.push(out, Op::MaxPool { x, arg, geom }, &[x]))
    }

    pub fn avg_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (geom, n, c) = self.pool_geom(x, kernel, stride, 0)?;
        let y = kernels::pool::avg_forward(&geom, self.value(x).data());
        let out = Tensor::new(&[n, c, geom.out_h, geom.out_w], y)?;
        Ok(self.push(out, Op::AvgPool { x, geom }, &[x]))
    }

    /// `(N, C, H, W) -> (N, C, 1, 1)` channel means.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).map_shape()?;
        let plane = s.plane();
        let y: Vec<f32> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f32>() / plane as f32)
            .collect();
        let out = Tensor::new(&[s.batch, s.channels, 1, 1], y)?;
        Ok(self.push(out, Op::GlobalAvgPool { x, plane }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.nodes[x.0].value).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// `(N, C, 1, 1)` or `(N, C)` to `(N, C)`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = shape[0];
        let rest = shape[1..].iter().product::<usize>();
        self.reshape(x, &[n, rest])
    }

    /// `y = x·Wᵀ + b` with `W` of shape `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.value(x).matrix_dims()?;
        let (dout, win) = self.value(w).matrix_dims()?;
        if din != win {
            return Err(shape_err!("linear expects {win} inputs, got {din}"));
        }
        let mut y = vec![0.0; n * dout];
        kernels::matmul(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut y,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(shape_err!("linear bias must have {dout} entries"));
            }
            for row in y.chunks_mut(dout) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let out = Tensor::new(&[n, dout], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    /// Concatenates two feature maps along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).map_shape()?;
        let sb = self.value(b).map_shape()?;
        if sa.batch != sb.batch || sa.height != sb.height || sa.width != sb.width {
            return Err(shape_err!("cannot concatenate {} with {}", sa, sb));
        }
        let la = sa.channels * sa.plane();
        let lb = sb.channels * sb.plane();
        let mut y = Vec::with_capacity(sa.batch * (la + lb));
        for n in 0..sa.batch {
            y.extend_from_slice(&self.value(a).data()[n * la..(n + 1) * la]);
            y.extend_from_slice(&self.value(b).data()[n * lb..(n + 1) * lb]);
        }
        let out = Tensor::new(&[sa.batch, sa.channels + sb.channels, sa.height, sa.width], y)?;
        Ok(self.push(out, Op::Concat { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("cannot add {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let mut out = (*self.nodes[a.0].value).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    /// `Σ wᵢ·xᵢ` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.value(v).numel() != 1 {
                return Err(shape_err!("weighted_sum takes scalars"));
            }
            total += w * self.value(v).item();
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), &inputs))
    }

    /// Batch-mean softmax cross-entropy of `(N, C)` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.value(logits).matrix_dims()?;
        if labels.len() != n {
            return Err(shape_err!("{} labels for {n} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Domain(format!("label {bad} out of range for {c} classes")));
        }
        let logp = log_softmax_rows(self.value(logits).data(), c, 1.0);
        let loss = -labels.iter().enumerate().map(|(i, &y)| logp[i * c + y]).sum::<f32>() / n as f32;
        let probs = logp.iter().map(|v| v.exp()).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Batch mean of `KL(softmax(target/τ) ‖ softmax(learner/τ))`.
    pub fn kl_div(&mut self, target: Var, learner: Var, tau: f32) -> Result<Var> {
        if tau.is_nan() || tau <= 0.0 {
            return Err(Error::Domain(format!("temperature must be > 0, got {tau}")));
        }
        let (n, c) = self.value(target).matrix_dims()?;
        if self.shape(learner) != [n, c] {
            return Err(shape_err!(
                "kl_div shape mismatch {:?} vs {:?}",
                self.shape(target),
                self.shape(learner)
            ));
        }
        let log_p = log_softmax_rows(self.value(target).data(), c, tau);
        let log_q = log_softmax_rows(self.value(learner).data(), c, tau);
        let total: f32 = log_p.iter().zip(&log_q).map(|(&lp, &lq)| lp.exp() * (lp - lq)).sum();
        let loss = (total / n as f32).max(0.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KlDiv {
                target,
                learner,
                tau,
                log_p,
                log_q,
            },
            &[target, learner],
        ))
    }

    /// Batch mean of the row-wise Euclidean distance `‖a − b‖₂`.
    pub fn euclidean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(a).matrix_dims()?;
        if self.shape(b) != [n, d] {
            return Err(shape_err!(
                "distance shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let norms: Vec<f32> = self
            .value(a)
            .data()
            .chunks(d)
            .zip(self.value(b).data().chunks(d))
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt())
            .collect();
        let loss = norms.iter().sum::<f32>() / n as f32;
        Ok(self.push(Tensor::scalar(loss), Op::Euclidean { a, b, norms }, &[a, b]))
    }

    /// Mean over all elements of `(a − b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "mse shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let numel = self.value(a).numel();
        let loss = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f32>()
            / numel as f32;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { a, b }, &[a, b]))
    }

    /// `Σₙ x[n, class]` for `(N, C)` scores.
    pub fn pick(&mut self, x: Var, class: usize) -> Result<Var> {
        let (_, c) = self.value(x).matrix_dims()?;
        if class >= c {
            return Err(Error::Domain(format!("class {class} out of range for {c}")));
        }
        let v = self.value(x).data().chunks(c).map(|r| r[class]).sum();
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, class }, &[x]))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_retaining(loss, &[])
    }

    /// Reverse pass from a scalar. Gradients of the `retain` vars are kept
    /// in the result alongside the parameter gradients.
    pub fn backward_retaining(&self, loss: Var, retain: &[Var]) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        if self.no_grad {
            return Err(Error::State("backward on a gradient-free graph".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(shape_err!("backward needs a scalar, got {:?}", lv.shape()));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut out = Gradients::default();
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad || retain.contains(&loss) {
            grads[loss.0] = Some(Tensor::ones(lv.shape()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if retain.contains(&Var(i)) {
                out.retained.insert(Var(i), g.clone());
            }
            let node = &self.nodes[i];
            self.backward_node(node, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(e) => e.add_assign(&t),
                None => grads[v.0] = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(key) => match out.params.get_mut(key) {
                Some(e) => e.add_assign(&g),
                None => {
                    out.params.insert(*key, g);
                }
            },
            Op::Conv2d { x, w, b, geom } => {
                let r = kernels::conv::backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                );
                if let Some(dx) = r.dx {
                    acc(*x, Tensor::new(self.shape(*x), dx)?);
                }
                if let Some(dw) = r.dw {
                    acc(*w, Tensor::new(self.shape(*w), dw)?);
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    acc(*b, Tensor::new(self.shape(*b), db)?);
                }
            }
            Op::Depthwise { x, w, geom } => {
                if self.needs(*x) {
                    let dx = kernels::depthwise::backward_input(geom, self.value(*w).data(), g.data());
                    acc(*x, Tensor::new(self.shape(*x), dx)?);
                }
                if self.needs(*w) {
                    let dw = kernels::depthwise::backward_weight(geom, self.value(*x).data(), g.data());
                    acc(*w, Tensor::new(self.shape(*w), dw)?);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_mode,
                geom,
            } => {
                let r = kernels::norm::backward(
                    geom,
                    self.value(*x).data(),
                    g.data(),
                    mean,
                    inv_std,
                    self.value(*gamma).data(),
                    *batch_mode,
                );
                acc(*x, Tensor::new(self.shape(*x), r.dx)?);
                acc(*gamma, Tensor::new(self.shape(*gamma), r.dgamma)?);
                acc(*beta, Tensor::new(self.shape(*beta), r.dbeta)?);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let mut d = g;
                for (di, &v) in d.data_mut().iter_mut().zip(xv) {
                    if v <= 0.0 {
                        *di = 0.0;
                    }
                }
                acc(*x, d);
            }
            Op::Relu6(x) => {
                let xv = self.value(*x).data();
                let mut d = g;
                for (di, &v) in d.data_mut().iter_mut().zip(xv) {
                    if v <= 0.0 || v >= 6.0 {
                        *di = 0.0;
                    }
                }
                acc(*x, d);
            }
            Op::MaxPool { x, arg, geom } => {
                let dx = kernels::pool::max_backward(geom, arg, g.data());
                acc(*x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::AvgPool { x, geom } => {
                let dx = kernels::pool::avg_backward(geom, g.data());
                acc(*x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::GlobalAvgPool { x, plane } => {
                let inv = 1.0 / *plane as f32;
                let dx: Vec<f32> = g
                    .data()
                    .iter()
                    .flat_map(|&d| std::iter::repeat_n(d * inv, *plane))
                    .collect();
                acc(*x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::Reshape(x) => {
                acc(*x, g.reshape(self.shape(*x))?);
            }
            Op::Linear { x, w, b } => {
                let (n, din) = self.value(*x).matrix_dims()?;
                let (dout, _) = self.value(*w).matrix_dims()?;
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * din];
                    kernels::matmul(
                        n,
                        dout,
                        din,
                        g.data(),
                        false,
                        self.value(*w).data(),
                        false,
                        &mut dx,
                        false,
                    );
                    acc(*x, Tensor::new(&[n, din], dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; dout * din];
                    kernels::matmul(
                        dout,
                        n,
                        din,
                        g.data(),
                        true,
                        self.value(*x).data(),
                        false,
                        &mut dw,
                        false,
                    );
                    acc(*w, Tensor::new(&[dout, din], dw)?);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; dout];
                    for row in g.data().chunks(dout) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    acc(*b, Tensor::new(&[dout], db)?);
                }
            }
            Op::Concat { a, b } => {
                let sa = self.value(*a).map_shape()?;
                let sb = self.value(*b).map_shape()?;
                let la = sa.channels * sa.plane();
                let lb = sb.channels * sb.plane();
                let mut da = Vec::with_capacity(sa.numel());
                let mut db = Vec::with_capacity(sb.numel());
                for chunk in g.data().chunks(la + lb) {
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                acc(*a, Tensor::new(self.shape(*a), da)?);
                acc(*b, Tensor::new(self.shape(*b), db)?);
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Scale { x, factor } => {
                acc(*x, g.map(|d| d * factor));
            }
            Op::AddScalar(x) => acc(*x, g),
            Op::WeightedSum(terms) => {
                let d = g.item();
                for &(v, w) in terms {
                    acc(v, Tensor::new(self.shape(v), vec![d * w])?);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (n, c) = self.value(*logits).matrix_dims()?;
                let scale = g.item() / n as f32;
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * c + y] -= 1.0;
                }
                for v in &mut d {
                    *v *= scale;
                }
                acc(*logits, Tensor::new(&[n, c], d)?);
            }
            Op::KlDiv {
                target,
                learner,
                tau,
                log_p,
                log_q,
            } => {
                let (n, c) = self.value(*target).matrix_dims()?;
                let scale = g.item() / (n as f32 * tau);
                if self.needs(*learner) {
                    let d: Vec<f32> = log_p
                        .iter()
                        .zip(log_q)
                        .map(|(&lp, &lq)| (lq.exp() - lp.exp()) * scale)
                        .collect();
                    acc(*learner, Tensor::new(&[n, c], d)?);
                }
                if self.needs(*target) {
                    let mut d = vec![0.0; n * c];
                    for r in 0..n {
                        let lp = &log_p[r * c..(r + 1) * c];
                        let lq = &log_q[r * c..(r + 1) * c];
                        let mean_a: f32 = lp.iter().zip(lq).map(|(&p, &q)| p.exp() * (p - q)).sum();
                        for j in 0..c {
                            d[r * c + j] = lp[j].exp() * ((lp[j] - lq[j]) - mean_a) * scale;
                        }
                    }
                    acc(*target, Tensor::new(&[n, c], d)?);
                }
            }
            Op::Euclidean { a, b, norms } => {
                let (n, dim) = self.value(*a).matrix_dims()?;
                let scale = g.item() / n as f32;
                let mut da = vec![0.0; n * dim];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                for r in 0..n {
                    if norms[r] > 0.0 {
                        let k = scale / norms[r];
                        for j in 0..dim {
                            da[r * dim + j] = (av[r * dim + j] - bv[r * dim + j]) * k;
                        }
                    }
                }
                let db: Vec<f32> = da.iter().map(|v| -v).collect();
                acc(*a, Tensor::new(&[n, dim], da)?);
                acc(*b, Tensor::new(&[n, dim], db)?);
            }
            Op::Mse { a, b } => {
                let numel = self.value(*a).numel();
                let scale = 2.0 * g.item() / numel as f32;
                let da: Vec<f32> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| (x - y) * scale)
                    .collect();
                let db: Vec<f32> = da.iter().map(|v| -v).collect();
                acc(*a, Tensor::new(self.shape(*a), da)?);
                acc(*b, Tensor::new(self.shape(*b), db)?);
            }
            Op::Pick { x, class } => {
                let (n, c) = self.value(*x).matrix_dims()?;
                let mut d = vec![0.0; n * c];
                for r in 0..n {
                    d[r * c + class] = g.item();
                }
                acc(*x, Tensor::new(&[n, c], d)?);
            }
        }
        Ok(())
    }
}
