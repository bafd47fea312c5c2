use image::imageops::FilterType;
use image::{ImageBuffer, Luma};

use crate::error::{config_err, Result};
use crate::network::{Head, Network};
use crate::nn::{Graph, Mode};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCamMap {
    /// Rectified weighted channel sum at the layer's resolution, `(Hl, Wl)`.
    pub raw: Tensor,
    /// Upsampled to the input resolution and min-max normalised, `(H, W)`.
    pub normalized: Tensor,
    pub class: usize,
    pub layer: String,
}

/// Grad-CAM for one image `(1, 3, H, W)`. The target class defaults to
/// the argmax of the chosen head and the layer to the network's default
/// for that head.
pub fn grad_cam(
    net: &dyn Network,
    image: &Tensor,
    class: Option<usize>,
    head: Head,
    layer: Option<&str>,
) -> Result<GradCamMap> {
    let s = image.map_shape()?;
    if s.batch != 1 {
        return Err(config_err!("grad-cam takes a single image, got batch {}", s.batch));
    }
    let layer = layer.unwrap_or_else(|| net.cam_layer(head)).to_string();
    let mut g = Graph::new();
    let x = g.input(image.clone());
    let out = net.forward(&mut g, x, Mode::Eval)?;
    let act = out
        .tap(&layer)
        .ok_or_else(|| config_err!("{layer:?} is not a spatial layer of this network"))?;
    let shape = g.shape(act).to_vec();
    if shape.len() != 4 {
        return Err(config_err!("{layer:?} is not a spatial feature map"));
    }
    let logits = out.logits(head);
    let n_classes = g.shape(logits)[1];
    let class = match class {
        Some(c) if c >= n_classes => {
            return Err(config_err!("class {c} out of range for {n_classes} classes"));
        }
        Some(c) => c,
        None => g.value(logits).argmax_rows()[0],
    };
    let score = g.pick(logits, class)?;
    let grads = g.backward_retaining(score, &[act])?;
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let plane = h * w;
    let zeros = Tensor::zeros(&shape);
    let grad = grads.retained(act).unwrap_or(&zeros);
    let a = g.value(act).data();
    let mut raw = vec![0.0f32; plane];
    for ch in 0..c {
        let gs = &grad.data()[ch * plane..(ch + 1) * plane];
        let alpha = gs.iter().sum::<f32>() / plane as f32;
        if alpha == 0.0 {
            continue;
        }
        for (r, &v) in raw.iter_mut().zip(&a[ch * plane..(ch + 1) * plane]) {
            *r += alpha * v;
        }
    }
    for r in raw.iter_mut() {
        *r = r.max(0.0);
    }
    let raw = Tensor::new(&[h, w], raw)?;
    let normalized = normalize(&upsample(&raw, s.height, s.width)?);
    Ok(GradCamMap {
        raw,
        normalized,
        class,
        layer,
    })
}

fn upsample(map: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (mh, mw) = map.matrix_dims()?;
    if (mh, mw) == (h, w) {
        return Ok(map.clone());
    }
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(mw as u32, mh as u32, map.data().to_vec()).expect("buffer size matches dimensions");
    let r = image::imageops::resize(&buf, w as u32, h as u32, FilterType::Triangle);
    Tensor::new(&[h, w], r.into_raw().into_iter().map(|v| v.max(0.0)).collect())
}

/// Min-max scaling to `[0, 1]`; a constant positive map becomes all ones
/// and an all-zero map stays zero.
fn normalize(map: &Tensor) -> Tensor {
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let data = if hi > lo {
        map.data().iter().map(|&v| (v - lo) / (hi - lo)).collect()
    } else if hi > 0.0 {
        vec![1.0; map.numel()]
    } else {
        vec![0.0; map.numel()]
    };
    Tensor::new(map.shape(), data).expect("same shape")
}
