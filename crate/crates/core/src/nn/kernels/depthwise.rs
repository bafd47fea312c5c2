//! Depthwise 2-D convolution (channel multiplier 1), direct loops
//! arranged as one strided row update per kernel tap.

use rayon::prelude::*;

#[derive(Clone, Copy, Debug)]
pub struct DwGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl DwGeom {
    /// Output columns whose tap `kw` reads inside the image.
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

    fn input_row(&self, oh: usize, kh: usize) -> Option<usize> {
        let ih = (oh * self.stride + kh) as isize - self.pad as isize;
        (ih >= 0 && ih < self.height as isize).then_some(ih as usize)
    }

    /// Calls `f(tap, ih, lo, hi, start)` for every tap and output row, where
    /// output columns `lo..hi` read input columns `start + (ow − lo)·stride`.
    #[inline]
    fn for_rows(&self, oh: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        for kh in 0..self.kernel {
            let Some(ih) = self.input_row(oh, kh) else { continue };
            for kw in 0..self.kernel {
                let (lo, hi) = self.valid_cols(kw);
                if lo < hi {
                    f(kh * self.kernel + kw, ih, lo, hi, lo * self.stride + kw - self.pad);
                }
            }
        }
    }
}

pub fn forward(g: &DwGeom, x: &[f32], w: &[f32]) -> Vec<f32> {
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let kk = g.kernel * g.kernel;
    let mut y = vec![0.0; g.batch * g.channels * out_plane];
    y.par_chunks_mut(out_plane).enumerate().for_each(|(nc, out)| {
        let c = nc % g.channels;
        let xp = &x[nc * in_plane..(nc + 1) * in_plane];
        let wk = &w[c * kk..(c + 1) * kk];
        for oh in 0..g.out_h {
            let orow = &mut out[oh * g.out_w..(oh + 1) * g.out_w];
            g.for_rows(oh, |t, ih, lo, hi, start| {
                let xr = &xp[ih * g.width..(ih + 1) * g.width];
                let wt = wk[t];
                if g.stride == 1 {
                    for (o, &v) in orow[lo..hi].iter_mut().zip(&xr[start..start + hi - lo]) {
                        *o += wt * v;
                    }
                } else {
                    for (j, o) in orow[lo..hi].iter_mut().enumerate() {
                        *o += wt * xr[start + j * g.stride];
                    }
                }
            });
        }
    });
    y
}

pub fn backward_input(g: &DwGeom, w: &[f32], dy: &[f32]) -> Vec<f32> {
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let kk = g.kernel * g.kernel;
    let mut dx = vec![0.0; g.batch * g.channels * in_plane];
    dx.par_chunks_mut(in_plane).enumerate().for_each(|(nc, dxp)| {
        let c = nc % g.channels;
        let dyp = &dy[nc * out_plane..(nc + 1) * out_plane];
        let wk = &w[c * kk..(c + 1) * kk];
        for oh in 0..g.out_h {
            let drow = &dyp[oh * g.out_w..(oh + 1) * g.out_w];
            g.for_rows(oh, |t, ih, lo, hi, start| {
                let xr = &mut dxp[ih * g.width..(ih + 1) * g.width];
                let wt = wk[t];
                if g.stride == 1 {
                    for (d, &v) in xr[start..start + hi - lo].iter_mut().zip(&drow[lo..hi]) {
                        *d += wt * v;
                    }
                } else {
                    for (j, &v) in drow[lo..hi].iter().enumerate() {
                        xr[start + j * g.stride] += wt * v;
                    }
                }
            });
        }
    });
    dx
}

pub fn backward_weight(g: &DwGeom, x: &[f32], dy: &[f32]) -> Vec<f32> {
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let kk = g.kernel * g.kernel;
    let mut dw = vec![0.0; g.channels * kk];
    dw.par_chunks_mut(kk).enumerate().for_each(|(c, dwk)| {
        for n in 0..g.batch {
            let nc = n * g.channels + c;
            let xp = &x[nc * in_plane..(nc + 1) * in_plane];
            let dyp = &dy[nc * out_plane..(nc + 1) * out_plane];
            for oh in 0..g.out_h {
                let drow = &dyp[oh * g.out_w..(oh + 1) * g.out_w];
                g.for_rows(oh, |t, ih, lo, hi, start| {
                    let xr = &xp[ih * g.width..(ih + 1) * g.width];
                    let s: f32 = if g.stride == 1 {
                        xr[start..start + hi - lo]
                            .iter()
                            .zip(&drow[lo..hi])
                            .map(|(a, b)| a * b)
                            .sum()
                    } else {
                        drow[lo..hi]
                            .iter()
                            .enumerate()
                            .map(|(j, b)| xr[start + j * g.stride] * b)
                            .sum()
                    };
                    dwk[t] += s;
                });
            }
        }
    });
    dw
}
