//! Image decoding, resizing and train-time augmentation on `(3, H, W)`
//! tensors.

use std::path::Path;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorJitterSpec {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl Default for ColorJitterSpec {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineSpec {
    /// Maximum shift as a fraction of the image side.
    pub translate: f32,
    pub scale_min: f32,
    pub scale_max: f32,
}

impl Default for AffineSpec {
    fn default() -> Self {
        Self {
            translate: 0.1,
            scale_min: 0.9,
            scale_max: 1.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    #[serde(default = "default_resize")]
    pub resize: usize,
    #[serde(default)]
    pub hflip: bool,
    #[serde(default)]
    pub vflip: bool,
    /// Rotation bound in degrees; 0 disables rotation.
    #[serde(default)]
    pub rotation: f32,
    #[serde(default)]
    pub color_jitter: Option<ColorJitterSpec>,
    #[serde(default)]
    pub affine: Option<AffineSpec>,
}

fn default_resize() -> usize {
    224
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            resize: default_resize(),
            hflip: false,
            vflip: false,
            rotation: 0.0,
            color_jitter: None,
            affine: None,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resize == 0 {
            return Err(config_err!("resize target must be positive"));
        }
        if !(self.rotation >= 0.0 && self.rotation <= 180.0) {
            return Err(config_err!("rotation bound must be within [0, 180] degrees"));
        }
        if let Some(j) = self.color_jitter {
            if [j.brightness, j.contrast, j.saturation]
                .iter()
                .any(|v| !(0.0..1.0).contains(v))
            {
                return Err(config_err!("color jitter strengths must be in [0, 1)"));
            }
        }
        if let Some(a) = self.affine {
            if !(0.0..0.5).contains(&a.translate) || !(a.scale_min > 0.0 && a.scale_min <= a.scale_max) {
                return Err(config_err!("invalid affine ranges"));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && !self.vflip && self.rotation == 0.0 && self.color_jitter.is_none() && self.affine.is_none()
    }
}

/// One concrete draw of the stochastic transforms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub angle: f32,
    pub translate: (f32, f32),
    pub scale: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            hflip: false,
            vflip: false,
            angle: 0.0,
            translate: (0.0, 0.0),
            scale: 1.0,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
        }
    }
}

/// Draws transform parameters in a fixed order: flips, angle, affine,
/// jitter. Disabled transforms consume no randomness.
pub fn sample_params(spec: &AugmentationSpec, rng: &mut impl Rng) -> AugmentParams {
    let mut p = AugmentParams::default();
    if spec.hflip {
        p.hflip = rng.random_bool(0.5);
    }
    if spec.vflip {
        p.vflip = rng.random_bool(0.5);
    }
    if spec.rotation > 0.0 {
        p.angle = rng.random_range(-spec.rotation..=spec.rotation);
    }
    if let Some(a) = spec.affine {
        if a.translate > 0.0 {
            p.translate = (
                rng.random_range(-a.translate..=a.translate),
                rng.random_range(-a.translate..=a.translate),
            );
        }
        p.scale = if a.scale_max > a.scale_min {
            rng.random_range(a.scale_min..=a.scale_max)
        } else {
            a.scale_min
        };
    }
    if let Some(j) = spec.color_jitter {
        let mut factor = |s: f32| {
            if s > 0.0 {
                rng.random_range(1.0 - s..=1.0 + s)
            } else {
                1.0
            }
        };
        p.brightness = factor(j.brightness);
        p.contrast = factor(j.contrast);
        p.saturation = factor(j.saturation);
    }
    p
}

/// Applies a parameter draw: flips, geometric warp, colour jitter.
pub fn apply(img: &Tensor, p: &AugmentParams) -> Result<Tensor> {
    let mut out = img.clone();
    if p.hflip {
        out = hflip(&out)?;
    }
    if p.vflip {
        out = vflip(&out)?;
    }
    if p.angle != 0.0 || p.translate != (0.0, 0.0) || p.scale != 1.0 {
        out = warp(&out, p.angle, p.translate, p.scale)?;
    }
    if (p.brightness, p.contrast, p.saturation) != (1.0, 1.0, 1.0) {
        out = color_jitter(&out, p.brightness, p.contrast, p.saturation)?;
    }
    Ok(out)
}

fn chw(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(crate::error::shape_err!(
            "expected a (C, H, W) image, got {:?}",
            img.shape()
        )),
    }
}

pub fn hflip(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(img)?;
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for row in 0..c * h {
        for x in 0..w {
            out[row * w + x] = src[row * w + (w - 1 - x)];
        }
    }
    Tensor::new(&[c, h, w], out)
}

pub fn vflip(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(img)?;
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let d = (ch * h + y) * w;
            let s = (ch * h + (h - 1 - y)) * w;
            out[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Rotation by `angle` degrees about the centre, then scaling by `scale`
/// and shifting by `translate` (fractions of width, height). Bilinear
/// sampling with zero fill outside the source.
pub fn warp(img: &Tensor, angle: f32, translate: (f32, f32), scale: f32) -> Result<Tensor> {
    let (c, h, w) = chw(img)?;
    let src = img.data();
    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    let (tx, ty) = (translate.0 * w as f32, translate.1 * h as f32);
    let (sin, cos) = angle.to_radians().sin_cos();
    let mut out = vec![0.0; src.len()];
    let fetch = |ch: usize, y: isize, x: isize| -> f32 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            src[(ch * h + y as usize) * w + x as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let dx = (x as f32 - cx - tx) / scale;
            let dy = (y as f32 - cy - ty) / scale;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let v = fetch(ch, y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + fetch(ch, y0, x0 + 1) * fx * (1.0 - fy)
                    + fetch(ch, y0 + 1, x0) * (1.0 - fx) * fy
                    + fetch(ch, y0 + 1, x0 + 1) * fx * fy;
                out[(ch * h + y) * w + x] = v;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Brightness, contrast, then saturation factors, clamping to `[0, 1]`
/// after each step. Expects 3 channels.
pub fn color_jitter(img: &Tensor, brightness: f32, contrast: f32, saturation: f32) -> Result<Tensor> {
    let (c, h, w) = chw(img)?;
    if c != 3 {
        return Err(crate::error::shape_err!("colour jitter needs 3 channels, got {c}"));
    }
    let plane = h * w;
    let mut d = img.data().to_vec();
    let gray = |d: &[f32], i: usize| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i];
    for v in d.iter_mut() {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    let mean = (0..plane).map(|i| gray(&d, i)).sum::<f32>() / plane as f32;
    for v in d.iter_mut() {
        *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
    }
    for i in 0..plane {
        let g = gray(&d, i);
        for ch in 0..3 {
            let v = &mut d[ch * plane + i];
            *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[c, h, w], d)
}

/// Decodes an image file into `(3, H, W)` values in `[0, 1]`; grayscale
/// is replicated across channels and alpha is dropped.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = w * h;
    let mut out = vec![0.0; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for ch in 0..3 {
            out[ch * plane + i] = px[ch] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], out)
}

/// Bilinear (triangle filter) resize to `size x size`.
pub fn resize(img: &Tensor, size: usize) -> Result<Tensor> {
    let (c, h, w) = chw(img)?;
    if h == size && w == size {
        return Ok(img.clone());
    }
    if c != 3 {
        return Err(crate::error::shape_err!("resize needs 3 channels, got {c}"));
    }
    let plane = h * w;
    let src = img.data();
    let mut inter = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        inter.extend_from_slice(&[src[i], src[plane + i], src[2 * plane + i]]);
    }
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, inter).expect("buffer size matches dimensions");
    let r = image::imageops::resize(&buf, size as u32, size as u32, FilterType::Triangle);
    let plane = size * size;
    let mut out = vec![0.0; 3 * plane];
    for (i, px) in r.pixels().enumerate() {
        for ch in 0..3 {
            out[ch * plane + i] = px[ch];
        }
    }
    Tensor::new(&[3, size, size], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(&[c, h, w], (0..c * h * w).map(|i| (i % 97) as f32 / 97.0).collect()).unwrap()
    }

    #[test]
    fn flips_are_involutions() {
        let t = ramp(3, 5, 7);
        assert_eq!(hflip(&hflip(&t).unwrap()).unwrap(), t);
        assert_eq!(vflip(&vflip(&t).unwrap()).unwrap(), t);
        let f = hflip(&t).unwrap();
        assert_eq!(f.data()[0], t.data()[6]);
    }

    #[test]
    fn rotation_draws_stay_in_bound() {
        let spec = AugmentationSpec {
            rotation: 10.0,
            ..Default::default()
        };
        let mut r = rng::substream(0, rng::DOMAIN_AUGMENT, &[]);
        let (mut lo, mut hi) = (0.0f32, 0.0f32);
        for _ in 0..10_000 {
            let a = sample_params(&spec, &mut r).angle;
            assert!((-10.0..=10.0).contains(&a));
            lo = lo.min(a);
            hi = hi.max(a);
        }
        assert!(lo < -9.9 && hi > 9.9);
    }

    #[test]
    fn identity_warp_and_quarter_turn() {
        let t = ramp(3, 4, 4);
        let same = warp(&t, 0.0, (0.0, 0.0), 1.0).unwrap();
        assert!(same.max_abs_diff(&t) < 1e-6);
        let mut img = Tensor::zeros(&[1, 3, 3]);
        img.data_mut()[1] = 1.0; // top middle
        let r = warp(&img, 90.0, (0.0, 0.0), 1.0).unwrap();
        let hot: Vec<usize> = (0..9).filter(|&i| r.data()[i] > 0.5).collect();
        assert_eq!(hot.len(), 1);
        assert_ne!(hot[0], 1);
        assert!((r.sum() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn warp_zero_fills() {
        let t = Tensor::ones(&[1, 8, 8]);
        let r = warp(&t, 0.0, (0.5, 0.0), 1.0).unwrap();
        assert_eq!(r.data()[0], 0.0);
        assert_eq!(r.data()[7], 1.0);
    }

    #[test]
    fn jitter_identity_and_clamp() {
        let t = ramp(3, 4, 4);
        assert!(color_jitter(&t, 1.0, 1.0, 1.0).unwrap().max_abs_diff(&t) < 1e-6);
        let b = color_jitter(&t, 5.0, 1.0, 1.0).unwrap();
        assert!(b.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn resize_keeps_constant_images() {
        let t = Tensor::full(&[3, 10, 6], 0.25);
        let r = resize(&t, 4).unwrap();
        assert_eq!(r.shape(), &[3, 4, 4]);
        assert!(r.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn png_decode_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = image::GrayImage::from_fn(3, 2, |x, y| image::Luma([(x * 50 + y * 10) as u8]));
        img.save(&p).unwrap();
        let t = load_image(&p).unwrap();
        assert_eq!(t.shape(), &[3, 2, 3]);
        assert_eq!(t.data()[4], 60.0 / 255.0);
        assert_eq!(t.data()[6 + 4], 60.0 / 255.0);
        assert!(matches!(
            load_image(&dir.path().join("nope.png")),
            Err(Error::Image { .. })
        ));
    }
}
