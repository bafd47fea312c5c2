//! Per-channel batch normalization over `(N, H, W)`.

use rayon::prelude::*;

#[derive(Clone, Copy, Debug)]
pub struct BnGeom {
    pub batch: usize,
    pub channels: usize,
    pub plane: usize,
}

impl BnGeom {
    fn count(&self) -> usize {
        self.batch * self.plane
    }
}

/// Biased per-channel mean and variance.
pub fn batch_stats(g: &BnGeom, x: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let m = g.count() as f32;
    (0..g.channels)
        .into_par_iter()
        .map(|c| {
            let mut sum = 0.0f32;
            for n in 0..g.batch {
                sum += x[(n * g.channels + c) * g.plane..][..g.plane].iter().sum::<f32>();
            }
            let mean = sum / m;
            let mut sq = 0.0f32;
            for n in 0..g.batch {
                for &v in &x[(n * g.channels + c) * g.plane..][..g.plane] {
                    sq += (v - mean) * (v - mean);
                }
            }
            (mean, sq / m)
        })
        .unzip()
}

/// `y = gamma * (x - mean) * inv_std + beta` per channel.
pub fn normalize(g: &BnGeom, x: &[f32], mean: &[f32], inv_std: &[f32], gamma: &[f32], beta: &[f32]) -> Vec<f32> {
    let mut y = vec![0.0; x.len()];
    y.par_chunks_mut(g.plane).enumerate().for_each(|(nc, out)| {
        let c = nc % g.channels;
        let scale = gamma[c] * inv_std[c];
        let shift = beta[c] - mean[c] * scale;
        for (o, &v) in out.iter_mut().zip(&x[nc * g.plane..(nc + 1) * g.plane]) {
            *o = v * scale + shift;
        }
    });
    y
}

pub struct BnGrads {
    pub dx: Vec<f32>,
    pub dgamma: Vec<f32>,
    pub dbeta: Vec<f32>,
}

/// Backward pass. With `batch_mode` the statistics are treated as
/// functions of `x` (training); otherwise they are constants (eval).
pub fn backward(
    g: &BnGeom,
    x: &[f32],
    dy: &[f32],
    mean: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    batch_mode: bool,
) -> BnGrads {
    let (dbeta, dgamma): (Vec<f32>, Vec<f32>) = (0..g.channels)
        .into_par_iter()
        .map(|c| {
            let mut sd = 0.0f32;
            let mut sdx = 0.0f32;
            for n in 0..g.batch {
                let off = (n * g.channels + c) * g.plane;
                for (&d, &v) in dy[off..off + g.plane].iter().zip(&x[off..off + g.plane]) {
                    sd += d;
                    sdx += d * (v - mean[c]) * inv_std[c];
                }
            }
            (sd, sdx)
        })
        .unzip();
    let m = g.count() as f32;
    let mut dx = vec![0.0; x.len()];
    dx.par_chunks_mut(g.plane).enumerate().for_each(|(nc, out)| {
        let c = nc % g.channels;
        let k = gamma[c] * inv_std[c];
        let off = nc * g.plane;
        if batch_mode {
            for i in 0..g.plane {
                let xhat = (x[off + i] - mean[c]) * inv_std[c];
                out[i] = k * (dy[off + i] - dbeta[c] / m - xhat * dgamma[c] / m);
            }
        } else {
            for i in 0..g.plane {
                out[i] = k * dy[off + i];
            }
        }
    });
    BnGrads { dx, dgamma, dbeta }
}
