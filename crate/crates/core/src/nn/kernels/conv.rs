//! Dense 2-D convolution (cross-correlation) as GEMMs over a
//! channel-major im2col buffer (`Cin·K·K × samples·positions`).
//!
//! Samples are grouped so every GEMM has at least [`MIN_COLUMNS`]
//! columns; a pointwise, unit-stride, unpadded convolution on a single
//! sample multiplies the input planes directly.

use super::matmul;

const MIN_COLUMNS: usize = 512;
const COL_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_len(&self) -> usize {
        self.out_channels * self.positions()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Samples per GEMM.
    fn group(&self) -> usize {
        let p = self.positions().max(1);
        let want = MIN_COLUMNS.div_ceil(p);
        let fit = (COL_BUDGET / (self.ckk() * p).max(1)).max(1);
        want.min(fit).clamp(1, self.batch.max(1))
    }

    /// Range of output columns whose input column `ow·stride + kw − pad`
    /// lies inside the image.
    fn valid_cols(&self, kw: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kw).div_ceil(self.stride);
        let limit = self.width + self.pad;
        let hi = if limit > kw {
            ((limit - kw - 1) / self.stride + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Fills the `positions`-wide block at column `off` of every row of `col`
/// (row stride `ld`) from one sample.
fn im2col(g: &ConvGeom, x: &[f32], col: &mut [f32], ld: usize, off: usize) {
    let k = g.kernel;
    let p = g.positions();
    let plane = g.height * g.width;
    for ci in 0..g.in_channels {
        let xc = &x[ci * plane..(ci + 1) * plane];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut col[((ci * k + kh) * k + kw) * ld + off..][..p];
                let (lo, hi) = g.valid_cols(kw);
                for oh in 0..g.out_h {
                    let out = &mut row[oh * g.out_w..(oh + 1) * g.out_w];
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.height as isize || lo >= hi {
                        out.fill(0.0);
                        continue;
                    }
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    let xr = &xc[ih as usize * g.width..][..g.width];
                    let start = lo * g.stride + kw - g.pad;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&xr[start..start + hi - lo]);
                    } else {
                        for (o, ow) in out[lo..hi].iter_mut().zip(lo..hi) {
                            *o = xr[ow * g.stride + kw - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds one sample's block of a patch-gradient buffer.
fn col2im(g: &ConvGeom, col: &[f32], ld: usize, off: usize, dx: &mut [f32]) {
    let k = g.kernel;
    let p = g.positions();
    let plane = g.height * g.width;
    for ci in 0..g.in_channels {
        let dxc = &mut dx[ci * plane..(ci + 1) * plane];
        for kh in 0..k {
            for kw in 0..k {
                let row = &col[((ci * k + kh) * k + kw) * ld + off..][..p];
                let (lo, hi) = g.valid_cols(kw);
                if lo >= hi {
                    continue;
                }
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let src = &row[oh * g.out_w..(oh + 1) * g.out_w];
                    let dr = &mut dxc[ih as usize * g.width..][..g.width];
                    let start = lo * g.stride + kw - g.pad;
                    if g.stride == 1 {
                        for (d, s) in dr[start..start + hi - lo].iter_mut().zip(&src[lo..hi]) {
                            *d += s;
                        }
                    } else {
                        for ow in lo..hi {
                            dr[ow * g.stride + kw - g.pad] += src[ow];
                        }
                    }
                }
            }
        }
    }
}

/// Copies `count` samples of `rows × p` planes into a `rows × count·p`
/// matrix, or back with `gather = false`.
fn interleave(src_or_dst: &mut [f32], mat: &mut [f32], rows: usize, p: usize, count: usize, gather: bool) {
    let ld = count * p;
    for j in 0..count {
        for r in 0..rows {
            let a = &mut src_or_dst[(j * rows + r) * p..][..p];
            let b = &mut mat[r * ld + j * p..][..p];
            if gather {
                b.copy_from_slice(a);
            } else {
                a.copy_from_slice(b);
            }
        }
    }
}

fn fill_cols(g: &ConvGeom, x: &[f32], first: usize, count: usize, col: &mut [f32]) {
    let (in_len, p) = (g.in_len(), g.positions());
    let ld = count * p;
    if g.is_pointwise() {
        let mut xs = x[first * in_len..(first + count) * in_len].to_vec();
        interleave(&mut xs, col, g.in_channels, p, count, true);
    } else {
        for j in 0..count {
            im2col(g, &x[(first + j) * in_len..][..in_len], col, ld, j * p);
        }
    }
}

pub fn forward(g: &ConvGeom, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let p = g.positions();
    let ckk = g.ckk();
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let mut y = vec![0.0; g.batch * out_len];
    let group = g.group();
    let direct = g.is_pointwise() && group == 1;
    let mut col = if direct { Vec::new() } else { vec![0.0; ckk * group * p] };
    let mut out = if group == 1 {
        Vec::new()
    } else {
        vec![0.0; g.out_channels * group * p]
    };
    let mut first = 0;
    while first < g.batch {
        let count = group.min(g.batch - first);
        let cols = count * p;
        let b: &[f32] = if direct {
            &x[first * in_len..(first + 1) * in_len]
        } else {
            fill_cols(g, x, first, count, &mut col);
            &col[..ckk * cols]
        };
        let ys = &mut y[first * out_len..(first + count) * out_len];
        if count == 1 {
            matmul(g.out_channels, ckk, p, w, false, b, false, ys, false);
        } else {
            let o = &mut out[..g.out_channels * cols];
            matmul(g.out_channels, ckk, cols, w, false, b, false, o, false);
            interleave(ys, o, g.out_channels, p, count, false);
        }
        first += count;
    }
    if let Some(bias) = bias {
        for (i, row) in y.chunks_mut(p).enumerate() {
            let b = bias[i % g.out_channels];
            row.iter_mut().for_each(|v| *v += b);
        }
    }
    y
}

pub struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

pub fn backward(
    g: &ConvGeom,
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let p = g.positions();
    let ckk = g.ckk();
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let mut dx = need_dx.then(|| vec![0.0; g.batch * in_len]);
    let mut dw = need_dw.then(|| vec![0.0; g.out_channels * ckk]);
    let db = need_db.then(|| {
        (0..g.out_channels)
            .map(|co| {
                (0..g.batch)
                    .map(|n| dy[n * out_len + co * p..][..p].iter().sum::<f32>())
                    .sum()
            })
            .collect()
    });
    let group = g.group();
    let direct = g.is_pointwise() && group == 1;
    let mut col = if direct { Vec::new() } else { vec![0.0; ckk * group * p] };
    let mut dyc = if group == 1 {
        Vec::new()
    } else {
        vec![0.0; g.out_channels * group * p]
    };
    let mut first = 0;
    while first < g.batch {
        let count = group.min(g.batch - first);
        let cols = count * p;
        let dys: &[f32] = if count == 1 {
            &dy[first * out_len..(first + 1) * out_len]
        } else {
            let mut src = dy[first * out_len..(first + count) * out_len].to_vec();
            interleave(&mut src, &mut dyc, g.out_channels, p, count, true);
            &dyc[..g.out_channels * cols]
        };
        if let Some(dw) = dw.as_mut() {
            let b: &[f32] = if direct {
                &x[first * in_len..(first + 1) * in_len]
            } else {
                fill_cols(g, x, first, count, &mut col);
                &col[..ckk * cols]
            };
            matmul(g.out_channels, cols, ckk, dys, false, b, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[first * in_len..(first + count) * in_len];
            if direct {
                matmul(ckk, g.out_channels, p, w, true, dys, false, dxs, false);
            } else {
                let dcol = &mut col[..ckk * cols];
                matmul(ckk, g.out_channels, cols, w, true, dys, false, dcol, false);
                if g.is_pointwise() {
                    interleave(dxs, dcol, g.in_channels, p, count, false);
                } else {
                    for j in 0..count {
                        col2im(g, dcol, cols, j * p, &mut dxs[j * in_len..(j + 1) * in_len]);
                    }
                }
            }
        }
        first += count;
    }
    ConvGrads { dx, dw, db }
}
