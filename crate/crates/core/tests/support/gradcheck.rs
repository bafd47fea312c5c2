//! Finite-difference gradient checks against straightforward f64
//! reference implementations of every graph operation.
//!
//! Each case builds a tiny graph, reduces its output to a scalar through a
//! fixed random projection, and compares the analytic f32 gradients with
//! central differences of the f64 reference (step 1e-3).

#![allow(dead_code, clippy::too_many_arguments)]

use hkd_core::distill::{self, FeatureLoss, KlDirection, LossWeights, ObjectiveConfig};
use hkd_core::nn::layers::{BatchNorm2d, BN_EPS};
use hkd_core::nn::{Graph, Mode, ParamStore, Var};
use hkd_core::{rng, ForwardBundle, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
pub const MIN_COORDS: usize = 100;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub coords: usize,
    pub worst: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst <= REL_TOL
    }
}

pub struct Gen(ChaCha8Rng);

impl Gen {
    pub fn new(seed: u64) -> Self {
        Gen(rng::substream(seed, 0xfd, &[]))
    }

    pub fn normal(&mut self, n: usize, std: f32) -> Vec<f32> {
        (0..n)
            .map(|_| {
                let u1: f32 = self.0.random_range(1e-7..1.0);
                let u2: f32 = self.0.random();
                std * (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
            })
            .collect()
    }

    /// Distinct values at least 0.01 apart, none within 0.05 of the
    /// activation kinks at 0 and 6; safe for max pooling and clipping.
    pub fn spaced(&mut self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        let mut grid: Vec<f32> = (0..)
            .map(|i| lo + 0.013 * i as f32)
            .take_while(|&v| v < hi)
            .filter(|v| v.abs() > 0.05 && (v - 6.0).abs() > 0.05)
            .collect();
        assert!(grid.len() >= n, "range too small");
        for i in (1..grid.len()).rev() {
            let j = self.0.random_range(0..=i);
            grid.swap(i, j);
        }
        grid.truncate(n);
        grid
    }

    pub fn labels(&mut self, n: usize, classes: usize) -> Vec<usize> {
        (0..n).map(|_| self.0.random_range(0..classes)).collect()
    }
}

fn f64s(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Coordinates to probe: all of them for small tensors, otherwise an
/// evenly strided subset of `budget`.
fn coords(n: usize, budget: usize) -> Vec<usize> {
    if n <= budget {
        (0..n).collect()
    } else {
        (0..budget).map(|i| i * n / budget).collect()
    }
}

/// Compares `analytic` with central differences of `f` around `at`.
/// Returns (coordinates checked, worst relative error), where the error
/// of each coordinate is `|a − n| / max(|a|, |n|, 1e-2·scale)` and
/// `scale` is the largest numeric gradient magnitude seen.
pub fn compare(analytic: &[f32], at: &[f32], budget: usize, f: &dyn Fn(&[f64]) -> f64) -> (usize, f64) {
    assert_eq!(analytic.len(), at.len());
    let base = f64s(at);
    let idx = coords(at.len(), budget);
    let numeric: Vec<f64> = idx
        .iter()
        .map(|&i| {
            let mut p = base.clone();
            p[i] += STEP;
            let up = f(&p);
            p[i] -= 2.0 * STEP;
            let down = f(&p);
            (up - down) / (2.0 * STEP)
        })
        .collect();
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = idx
        .iter()
        .zip(&numeric)
        .map(|(&i, &n)| {
            let a = analytic[i] as f64;
            (a - n).abs() / a.abs().max(n.abs()).max(1e-2 * scale).max(1e-12)
        })
        .fold(0.0, f64::max);
    (idx.len(), worst)
}

/// `Σ r ⊙ y` on the graph.
fn project(g: &mut Graph, y: Var, r: &[f32]) -> Var {
    let n = g.value(y).numel();
    let flat = g.reshape(y, &[1, n]).unwrap();
    let w = g.input(Tensor::new(&[1, n], r.to_vec()).unwrap());
    g.linear(flat, w, None).unwrap()
}

fn dot(a: &[f64], r: &[f32]) -> f64 {
    a.iter().zip(r).map(|(x, &w)| x * w as f64).sum()
}

pub mod reference {
    //! NCHW f64 reference operations.

    pub type Shape = [usize; 4];

    pub fn out_dim(n: usize, k: usize, s: usize, p: usize) -> usize {
        (n + 2 * p - k) / s + 1
    }

    pub fn conv2d(
        x: &[f64],
        xs: Shape,
        w: &[f64],
        cout: usize,
        k: usize,
        b: Option<&[f64]>,
        s: usize,
        p: usize,
    ) -> Vec<f64> {
        let [n, cin, h, wd] = xs;
        let (oh, ow) = (out_dim(h, k, s, p), out_dim(wd, k, s, p));
        let mut y = vec![0.0; n * cout * oh * ow];
        for ni in 0..n {
            for co in 0..cout {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b[co]);
                        for ci in 0..cin {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let ih = (i * s + kh) as isize - p as isize;
                                    let iw = (j * s + kw) as isize - p as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                        acc += x[((ni * cin + ci) * h + ih as usize) * wd + iw as usize]
                                            * w[((co * cin + ci) * k + kh) * k + kw];
                                    }
                                }
                            }
                        }
                        y[((ni * cout + co) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        y
    }

    pub fn depthwise(x: &[f64], xs: Shape, w: &[f64], k: usize, s: usize, p: usize) -> Vec<f64> {
        let [n, c, h, wd] = xs;
        let (oh, ow) = (out_dim(h, k, s, p), out_dim(wd, k, s, p));
        let mut y = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let ch = nc % c;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for kh in 0..k {
                        for kw in 0..k {
                            let ih = (i * s + kh) as isize - p as isize;
                            let iw = (j * s + kw) as isize - p as isize;
                            if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                acc += x[(nc * h + ih as usize) * wd + iw as usize] * w[(ch * k + kh) * k + kw];
                            }
                        }
                    }
                    y[(nc * oh + i) * ow + j] = acc;
                }
            }
        }
        y
    }

    /// Batch statistics when `stats` is `None`, else fixed (mean, var).
    pub fn batch_norm(
        x: &[f64],
        xs: Shape,
        gamma: &[f64],
        beta: &[f64],
        stats: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Vec<f64> {
        let [n, c, h, w] = xs;
        let plane = h * w;
        let mut y = vec![0.0; x.len()];
        for ch in 0..c {
            let vals = || (0..n).flat_map(move |ni| (0..plane).map(move |i| (ni * c + ch) * plane + i));
            let (mean, var) = match stats {
                Some((m, v)) => (m[ch], v[ch]),
                None => {
                    let m = vals().map(|i| x[i]).sum::<f64>() / (n * plane) as f64;
                    let v = vals().map(|i| (x[i] - m).powi(2)).sum::<f64>() / (n * plane) as f64;
                    (m, v)
                }
            };
            for i in vals() {
                y[i] = gamma[ch] * (x[i] - mean) / (var + eps).sqrt() + beta[ch];
            }
        }
        y
    }

    pub fn relu(x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v.max(0.0)).collect()
    }

    pub fn relu6(x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v.clamp(0.0, 6.0)).collect()
    }

    pub fn pool(x: &[f64], xs: Shape, k: usize, s: usize, p: usize, max: bool) -> Vec<f64> {
        let [n, c, h, w] = xs;
        let (oh, ow) = (out_dim(h, k, s, p), out_dim(w, k, s, p));
        let mut y = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut sum = 0.0;
                    for kh in 0..k {
                        for kw in 0..k {
                            let ih = (i * s + kh) as isize - p as isize;
                            let iw = (j * s + kw) as isize - p as isize;
                            if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                let v = x[(nc * h + ih as usize) * w + iw as usize];
                                best = best.max(v);
                                sum += v;
                            }
                        }
                    }
                    y[(nc * oh + i) * ow + j] = if max { best } else { sum / (k * k) as f64 };
                }
            }
        }
        y
    }

    pub fn global_avg_pool(x: &[f64], plane: usize) -> Vec<f64> {
        x.chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect()
    }

    pub fn linear(x: &[f64], n: usize, din: usize, w: &[f64], dout: usize, b: Option<&[f64]>) -> Vec<f64> {
        let mut y = vec![0.0; n * dout];
        for i in 0..n {
            for o in 0..dout {
                y[i * dout + o] =
                    b.map_or(0.0, |b| b[o]) + (0..din).map(|d| x[i * din + d] * w[o * din + d]).sum::<f64>();
            }
        }
        y
    }

    pub fn concat(a: &[f64], ca: usize, b: &[f64], cb: usize, n: usize, plane: usize) -> Vec<f64> {
        let mut y = Vec::with_capacity(a.len() + b.len());
        for i in 0..n {
            y.extend_from_slice(&a[i * ca * plane..(i + 1) * ca * plane]);
            y.extend_from_slice(&b[i * cb * plane..(i + 1) * cb * plane]);
        }
        y
    }

    pub fn log_softmax(row: &[f64], tau: f64) -> Vec<f64> {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v / tau));
        let lse = row.iter().map(|&v| (v / tau - m).exp()).sum::<f64>().ln() + m;
        row.iter().map(|&v| v / tau - lse).collect()
    }

    pub fn cross_entropy(z: &[f64], c: usize, labels: &[usize]) -> f64 {
        z.chunks(c)
            .zip(labels)
            .map(|(r, &y)| -log_softmax(r, 1.0)[y])
            .sum::<f64>()
            / labels.len() as f64
    }

    /// Batch mean of KL(softmax(p/τ) ‖ softmax(q/τ)).
    pub fn kl(p: &[f64], q: &[f64], c: usize, tau: f64) -> f64 {
        let n = p.len() / c;
        p.chunks(c)
            .zip(q.chunks(c))
            .map(|(a, b)| {
                let (lp, lq) = (log_softmax(a, tau), log_softmax(b, tau));
                lp.iter().zip(&lq).map(|(x, y)| x.exp() * (x - y)).sum::<f64>()
            })
            .sum::<f64>()
            / n as f64
    }

    pub fn euclidean(a: &[f64], b: &[f64], d: usize) -> f64 {
        let n = a.len() / d;
        a.chunks(d)
            .zip(b.chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / n as f64
    }

    pub fn mse(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / a.len() as f64
    }
}

use reference as r;

fn tensor(shape: &[usize], v: Vec<f32>) -> Tensor {
    Tensor::new(shape, v).unwrap()
}

fn grad_of(g: &Graph, grads: &hkd_core::nn::Gradients, v: Var) -> Vec<f32> {
    grads
        .retained(v)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
}

/// Runs `build` on fresh leaves for every input, projects the output and
/// checks each input's gradient against `reference` (called with all
/// inputs in f64).
fn check_op(
    name: &str,
    gen: &mut Gen,
    inputs: Vec<(Vec<usize>, Vec<f32>)>,
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
    reference: &dyn Fn(&[Vec<f64>]) -> Vec<f64>,
) -> CheckOutcome {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(s, v)| g.leaf(tensor(s, v.clone()))).collect();
    let y = build(&mut g, &vars);
    let proj = gen.normal(g.value(y).numel(), 1.0);
    let loss = project(&mut g, y, &proj);
    let grads = g.backward_retaining(loss, &vars).unwrap();
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| f64s(v)).collect();
    let budget = MIN_COORDS.div_ceil(inputs.len()).max(MIN_COORDS / 2);
    let mut total = 0;
    let mut worst = 0.0f64;
    for (k, (_, v)) in inputs.iter().enumerate() {
        let analytic = grad_of(&g, &grads, vars[k]);
        let f = |p: &[f64]| {
            let mut all = base.clone();
            all[k] = p.to_vec();
            dot(&reference(&all), &proj)
        };
        let (n, w) = compare(&analytic, v, budget, &f);
        total += n;
        worst = worst.max(w);
    }
    CheckOutcome {
        name: name.to_string(),
        coords: total,
        worst,
    }
}

fn check_scalar_loss(
    name: &str,
    inputs: Vec<(Vec<usize>, Vec<f32>)>,
    differentiated: &[usize],
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
    reference: &dyn Fn(&[Vec<f64>]) -> f64,
) -> CheckOutcome {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(s, v)| g.leaf(tensor(s, v.clone()))).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward_retaining(loss, &vars).unwrap();
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| f64s(v)).collect();
    let mut total = 0;
    let mut worst = 0.0f64;
    for &k in differentiated {
        let analytic = grad_of(&g, &grads, vars[k]);
        let f = |p: &[f64]| {
            let mut all = base.clone();
            all[k] = p.to_vec();
            reference(&all)
        };
        let (n, w) = compare(&analytic, &inputs[k].1, MIN_COORDS, &f);
        total += n;
        worst = worst.max(w);
    }
    CheckOutcome {
        name: name.to_string(),
        coords: total,
        worst,
    }
}

pub fn layer_checks() -> Vec<CheckOutcome> {
    let mut gen = Gen::new(7);
    let mut out = Vec::new();

    let xs = [2, 3, 6, 6];
    let x = gen.normal(2 * 3 * 36, 1.0);
    let w = gen.normal(4 * 3 * 9, 0.4);
    let b = gen.normal(4, 0.5);
    out.push(check_op(
        "conv2d 3x3 stride 2 pad 1 with bias",
        &mut gen,
        vec![(xs.to_vec(), x.clone()), (vec![4, 3, 3, 3], w), (vec![4], b)],
        &|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap(),
        &|a| r::conv2d(&a[0], xs, &a[1], 4, 3, Some(&a[2]), 2, 1),
    ));
    let w1 = gen.normal(5 * 3, 0.4);
    out.push(check_op(
        "conv2d 1x1",
        &mut gen,
        vec![(xs.to_vec(), x.clone()), (vec![5, 3, 1, 1], w1)],
        &|g, v| g.conv2d(v[0], v[1], None, 1, 0).unwrap(),
        &|a| r::conv2d(&a[0], xs, &a[1], 5, 1, None, 1, 0),
    ));
    for stride in [1, 2] {
        let wd = gen.normal(3 * 9, 0.5);
        out.push(check_op(
            &format!("depthwise 3x3 stride {stride}"),
            &mut gen,
            vec![(xs.to_vec(), x.clone()), (vec![3, 1, 3, 3], wd)],
            &|g, v| g.depthwise_conv2d(v[0], v[1], stride, 1).unwrap(),
            &|a| r::depthwise(&a[0], xs, &a[1], 3, stride, 1),
        ));
    }

    for mode in [Mode::Train, Mode::Eval] {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 3);
        let gamma = gen.normal(3, 0.5).iter().map(|v| v + 1.0).collect::<Vec<_>>();
        let beta = gen.normal(3, 0.5);
        let rmean = gen.normal(3, 0.3);
        let rvar: Vec<f32> = gen.normal(3, 0.3).iter().map(|v| v.abs() + 0.5).collect();
        store.set_values(bn.gamma, tensor(&[3], gamma.clone())).unwrap();
        store.set_values(bn.beta, tensor(&[3], beta.clone())).unwrap();
        store.set_values(bn.running_mean, tensor(&[3], rmean.clone())).unwrap();
        store.set_values(bn.running_var, tensor(&[3], rvar.clone())).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(tensor(&xs, x.clone()));
        let y = bn.forward(&mut g, &store, xv, mode).unwrap();
        let proj = gen.normal(g.value(y).numel(), 1.0);
        let loss = project(&mut g, y, &proj);
        let grads = g.backward_retaining(loss, &[xv]).unwrap();
        let stats = (f64s(&rmean), f64s(&rvar));
        let refn = |xx: &[f64], gm: &[f64], bt: &[f64]| {
            let st = (mode == Mode::Eval).then_some((&stats.0[..], &stats.1[..]));
            dot(&r::batch_norm(xx, xs, gm, bt, st, BN_EPS as f64), &proj)
        };
        let (g64, b64, x64) = (f64s(&gamma), f64s(&beta), f64s(&x));
        let mut worst = 0.0f64;
        let mut total = 0;
        for (which, analytic, at) in [
            (0, grad_of(&g, &grads, xv), x.clone()),
            (1, grads.param(&store, bn.gamma).unwrap().data().to_vec(), gamma.clone()),
            (2, grads.param(&store, bn.beta).unwrap().data().to_vec(), beta.clone()),
        ] {
            let f = |p: &[f64]| match which {
                0 => refn(p, &g64, &b64),
                1 => refn(&x64, p, &b64),
                _ => refn(&x64, &g64, p),
            };
            let (n, w) = compare(&analytic, &at, MIN_COORDS, &f);
            total += n;
            worst = worst.max(w);
        }
        out.push(CheckOutcome {
            name: format!("batch norm ({mode:?})"),
            coords: total,
            worst,
        });
    }

    let xk = gen.spaced(2 * 3 * 36, -3.0, 8.0);
    out.push(check_op(
        "relu",
        &mut gen,
        vec![(xs.to_vec(), xk.clone())],
        &|g, v| g.relu(v[0]),
        &|a| r::relu(&a[0]),
    ));
    out.push(check_op(
        "relu6",
        &mut gen,
        vec![(xs.to_vec(), xk.clone())],
        &|g, v| g.relu6(v[0]),
        &|a| r::relu6(&a[0]),
    ));
    out.push(check_op(
        "max pool 3x3 stride 2 pad 1",
        &mut gen,
        vec![(xs.to_vec(), xk.clone())],
        &|g, v| g.max_pool(v[0], 3, 2, 1).unwrap(),
        &|a| r::pool(&a[0], xs, 3, 2, 1, true),
    ));
    out.push(check_op(
        "avg pool 2x2 stride 2",
        &mut gen,
        vec![(xs.to_vec(), x.clone())],
        &|g, v| g.avg_pool(v[0], 2, 2).unwrap(),
        &|a| r::pool(&a[0], xs, 2, 2, 0, false),
    ));
    out.push(check_op(
        "global average pool",
        &mut gen,
        vec![(xs.to_vec(), x.clone())],
        &|g, v| g.global_avg_pool(v[0]).unwrap(),
        &|a| r::global_avg_pool(&a[0], 36),
    ));
    let xl = gen.normal(4 * 6, 1.0);
    let wl = gen.normal(3 * 6, 0.5);
    let bl = gen.normal(3, 0.5);
    out.push(check_op(
        "linear",
        &mut gen,
        vec![(vec![4, 6], xl.clone()), (vec![3, 6], wl), (vec![3], bl)],
        &|g, v| g.linear(v[0], v[1], Some(v[2])).unwrap(),
        &|a| r::linear(&a[0], 4, 6, &a[1], 3, Some(&a[2])),
    ));
    let xb = gen.normal(2 * 2 * 36, 1.0);
    out.push(check_op(
        "channel concat",
        &mut gen,
        vec![(xs.to_vec(), x.clone()), (vec![2, 2, 6, 6], xb)],
        &|g, v| g.concat_channels(v[0], v[1]).unwrap(),
        &|a| r::concat(&a[0], 3, &a[1], 2, 2, 36),
    ));
    let x2 = gen.normal(x.len(), 1.0);
    out.push(check_op(
        "residual add",
        &mut gen,
        vec![(xs.to_vec(), x.clone()), (xs.to_vec(), x2)],
        &|g, v| g.add(v[0], v[1]).unwrap(),
        &|a| a[0].iter().zip(&a[1]).map(|(p, q)| p + q).collect(),
    ));

    let z = gen.normal(4 * 3, 1.5);
    let z2 = gen.normal(4 * 3, 1.5);
    let labels = gen.labels(4, 3);
    let lab = labels.clone();
    out.push(check_scalar_loss(
        "cross entropy",
        vec![(vec![4, 3], z.clone())],
        &[0],
        &|g, v| g.cross_entropy(v[0], &lab).unwrap(),
        &|a| r::cross_entropy(&a[0], 3, &labels),
    ));
    for tau in [1.0f32, 4.0] {
        out.push(check_scalar_loss(
            &format!("kl divergence tau {tau}"),
            vec![(vec![4, 3], z.clone()), (vec![4, 3], z2.clone())],
            &[0, 1],
            &|g, v| g.kl_div(v[0], v[1], tau).unwrap(),
            &|a| r::kl(&a[0], &a[1], 3, tau as f64),
        ));
    }
    let fa = gen.normal(4 * 8, 1.0);
    let fb = gen.normal(4 * 8, 1.0);
    out.push(check_scalar_loss(
        "euclidean distance",
        vec![(vec![4, 8], fa.clone()), (vec![4, 8], fb.clone())],
        &[0, 1],
        &|g, v| g.euclidean(v[0], v[1]).unwrap(),
        &|a| r::euclidean(&a[0], &a[1], 8),
    ));
    out.push(check_scalar_loss(
        "mean squared error",
        vec![(vec![4, 8], fa), (vec![4, 8], fb)],
        &[0, 1],
        &|g, v| g.mse(v[0], v[1]).unwrap(),
        &|a| r::mse(&a[0], &a[1]),
    ));
    out
}

/// conv → BN(train) → ReLU → GAP → linear → cross-entropy, with every
/// parameter and the input checked.
pub fn two_layer_net_check() -> CheckOutcome {
    let mut gen = Gen::new(11);
    let xs = [4, 2, 5, 5];
    let x = gen.normal(4 * 2 * 25, 1.0);
    let w = gen.normal(3 * 2 * 9, 0.5);
    let gamma: Vec<f32> = gen.normal(3, 0.2).iter().map(|v| v + 1.0).collect();
    let beta = gen.normal(3, 0.2);
    let wl = gen.normal(3 * 3, 0.7);
    let bl = gen.normal(3, 0.1);
    let labels = gen.labels(4, 3);
    let mut store = ParamStore::new();
    let bn = BatchNorm2d::new(&mut store, "bn", 3);
    store.set_values(bn.gamma, tensor(&[3], gamma.clone())).unwrap();
    store.set_values(bn.beta, tensor(&[3], beta.clone())).unwrap();

    let mut g = Graph::new();
    let vx = g.leaf(tensor(&xs, x.clone()));
    let vw = g.leaf(tensor(&[3, 2, 3, 3], w.clone()));
    let vwl = g.leaf(tensor(&[3, 3], wl.clone()));
    let vbl = g.leaf(tensor(&[3], bl.clone()));
    let h = g.conv2d(vx, vw, None, 1, 1).unwrap();
    let h = bn.forward(&mut g, &store, h, Mode::Train).unwrap();
    let h = g.relu(h);
    let h = g.global_avg_pool(h).unwrap();
    let h = g.flatten(h).unwrap();
    let z = g.linear(h, vwl, Some(vbl)).unwrap();
    let loss = g.cross_entropy(z, &labels).unwrap();
    let grads = g.backward_retaining(loss, &[vx, vw, vwl, vbl]).unwrap();

    let all = [f64s(&x), f64s(&w), f64s(&gamma), f64s(&beta), f64s(&wl), f64s(&bl)];
    let net = |p: &[Vec<f64>]| {
        let h = r::conv2d(&p[0], xs, &p[1], 3, 3, None, 1, 1);
        let h = r::batch_norm(&h, [4, 3, 5, 5], &p[2], &p[3], None, BN_EPS as f64);
        let h = r::global_avg_pool(&r::relu(&h), 25);
        let z = r::linear(&h, 4, 3, &p[4], 3, Some(&p[5]));
        r::cross_entropy(&z, 3, &labels)
    };
    let analytic = [
        grad_of(&g, &grads, vx),
        grad_of(&g, &grads, vw),
        grads.param(&store, bn.gamma).unwrap().data().to_vec(),
        grads.param(&store, bn.beta).unwrap().data().to_vec(),
        grad_of(&g, &grads, vwl),
        grad_of(&g, &grads, vbl),
    ];
    let at = [x, w, gamma, beta, wl, bl];
    let mut total = 0;
    let mut worst = 0.0f64;
    for k in 0..at.len() {
        let f = |p: &[f64]| {
            let mut a = all.to_vec();
            a[k] = p.to_vec();
            net(&a)
        };
        let (n, e) = compare(&analytic[k], &at[k], MIN_COORDS, &f);
        total += n;
        worst = worst.max(e);
    }
    CheckOutcome {
        name: "two-layer network".into(),
        coords: total,
        worst,
    }
}

/// Full weighted student objective on a 4-sample, 3-class bundle with
/// 512-d main and 352-d aux features, differentiated with respect to
/// every student output. Detached mentors stay fixed in the reference.
pub fn composite_student_loss_check(feature_loss: FeatureLoss) -> CheckOutcome {
    let mut gen = Gen::new(13);
    let (n, c, dm, da) = (4, 3, 512, 352);
    let s = [
        gen.normal(n * c, 1.5),
        gen.normal(n * c, 1.5),
        gen.normal(n * dm, 1.0),
        gen.normal(n * da, 1.0),
    ];
    let t = [
        gen.normal(n * c, 1.5),
        gen.normal(n * c, 1.5),
        gen.normal(n * dm, 1.0),
        gen.normal(n * da, 1.0),
    ];
    let labels = gen.labels(n, c);
    let weights = LossWeights::default();
    let cfg = ObjectiveConfig {
        weights,
        feature_loss,
        kl_direction: KlDirection::MentorTarget,
    };
    let shapes = [vec![n, c], vec![n, c], vec![n, dm], vec![n, da]];

    let mut g = Graph::new();
    let sv: Vec<Var> = s
        .iter()
        .zip(&shapes)
        .map(|(v, sh)| g.leaf(tensor(sh, v.clone())))
        .collect();
    let tv: Vec<Var> = t
        .iter()
        .zip(&shapes)
        .map(|(v, sh)| g.input(tensor(sh, v.clone())))
        .collect();
    let bundle = |v: &[Var]| ForwardBundle {
        main_logits: v[0],
        aux_logits: v[1],
        f_main: v[2],
        f_aux: v[3],
        taps: Vec::new(),
    };
    let (total, _) = distill::student_total(&mut g, &bundle(&sv), &bundle(&tv), &labels, &cfg).unwrap();
    let grads = g.backward_retaining(total, &sv).unwrap();

    let t64: Vec<Vec<f64>> = t.iter().map(|v| f64s(v)).collect();
    let aux_mentor = f64s(&s[1]);
    let w = weights;
    let objective = |p: &[Vec<f64>]| {
        let hard = r::cross_entropy(&p[0], c, &labels) + r::cross_entropy(&p[1], c, &labels);
        let fd = match feature_loss {
            FeatureLoss::Euclidean => r::euclidean(&p[2], &t64[2], dm) + r::euclidean(&p[3], &t64[3], da),
            FeatureLoss::Mse => r::mse(&p[2], &t64[2]) + r::mse(&p[3], &t64[3]),
        };
        let rd = r::kl(&t64[0], &p[0], c, w.tau as f64) + r::kl(&t64[1], &p[1], c, w.tau as f64);
        let sd = r::kl(&aux_mentor, &p[0], c, w.tau_prime as f64);
        w.lambda1 as f64 * hard + w.lambda2 as f64 * fd + w.lambda3 as f64 * rd + w.lambda4 as f64 * sd
    };
    let base: Vec<Vec<f64>> = s.iter().map(|v| f64s(v)).collect();
    let mut total_coords = 0;
    let mut worst = 0.0f64;
    for k in 0..4 {
        let analytic = grad_of(&g, &grads, sv[k]);
        let f = |p: &[f64]| {
            let mut a = base.clone();
            a[k] = p.to_vec();
            objective(&a)
        };
        let (cnt, e) = compare(&analytic, &s[k], MIN_COORDS, &f);
        total_coords += cnt;
        worst = worst.max(e);
    }
    CheckOutcome {
        name: format!("composite student loss ({feature_loss:?})"),
        coords: total_coords,
        worst,
    }
}
