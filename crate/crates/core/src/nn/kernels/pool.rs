//! Max, average and global-average pooling.

use rayon::prelude::*;

#[derive(Clone, Copy, Debug)]
pub struct PoolGeom {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Returns outputs and, per output, the flat in-plane index of the max.
/// Padding positions never win.
pub fn max_forward(g: &PoolGeom, x: &[f32]) -> (Vec<f32>, Vec<u32>) {
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let mut y = vec![0.0; g.planes * out_plane];
    let mut arg = vec![0u32; g.planes * out_plane];
    y.par_chunks_mut(out_plane)
        .zip(arg.par_chunks_mut(out_plane))
        .enumerate()
        .for_each(|(pl, (out, idx))| {
            let xp = &x[pl * in_plane..(pl + 1) * in_plane];
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    let ih0 = (oh * g.stride) as isize - g.pad as isize;
                    let iw0 = (ow * g.stride) as isize - g.pad as isize;
                    for kh in 0..g.kernel {
                        let ih = ih0 + kh as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        for kw in 0..g.kernel {
                            let iw = iw0 + kw as isize;
                            if iw < 0 || iw >= g.width as isize {
                                continue;
                            }
                            let i = ih as usize * g.width + iw as usize;
                            if xp[i] > best {
                                best = xp[i];
                                best_i = i;
                            }
                        }
                    }
                    out[oh * g.out_w + ow] = best;
                    idx[oh * g.out_w + ow] = best_i as u32;
                }
            }
        });
    (y, arg)
}

pub fn max_backward(g: &PoolGeom, arg: &[u32], dy: &[f32]) -> Vec<f32> {
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let mut dx = vec![0.0; g.planes * in_plane];
    dx.par_chunks_mut(in_plane).enumerate().for_each(|(pl, dxp)| {
        for o in 0..out_plane {
            dxp[arg[pl * out_plane + o] as usize] += dy[pl * out_plane + o];
        }
    });
    dx
}

/// Average pooling without padding.
pub fn avg_forward(g: &PoolGeom, x: &[f32]) -> Vec<f32> {
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let inv = 1.0 / (g.kernel * g.kernel) as f32;
    let mut y = vec![0.0; g.planes * out_plane];
    y.par_chunks_mut(out_plane).enumerate().for_each(|(pl, out)| {
        let xp = &x[pl * in_plane..(pl + 1) * in_plane];
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let mut acc = 0.0;
                for kh in 0..g.kernel {
                    let row = (oh * g.stride + kh) * g.width + ow * g.stride;
                    acc += xp[row..row + g.kernel].iter().sum::<f32>();
                }
                out[oh * g.out_w + ow] = acc * inv;
            }
        }
    });
    y
}

pub fn avg_backward(g: &PoolGeom, dy: &[f32]) -> Vec<f32> {
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let inv = 1.0 / (g.kernel * g.kernel) as f32;
    let mut dx = vec![0.0; g.planes * in_plane];
    dx.par_chunks_mut(in_plane).enumerate().for_each(|(pl, dxp)| {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let d = dy[pl * out_plane + oh * g.out_w + ow] * inv;
                for kh in 0..g.kernel {
                    let row = (oh * g.stride + kh) * g.width + ow * g.stride;
                    for v in &mut dxp[row..row + g.kernel] {
                        *v += d;
                    }
                }
            }
        }
    });
    dx
}
