//! Grad-CAM heatmaps and overlays.

use std::path::Path;

use serde::Serialize;

use crate::autograd::Tape;
use crate::data::{resize_bilinear, tensor_to_image};
use crate::error::{Error, Result};
use crate::model::M2ANet;
use crate::ops::{Broadcast, NormMode};
use crate::tensor::Tensor;

/// Opacity of the colormap where the heatmap is 1.
pub const OVERLAY_ALPHA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Heatmap {
    /// Row-major `height × width` values in `[0, 1]`.
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub layer: String,
    pub target_class: usize,
}

/// `ReLU(Σ_c ᾱ_c · A_c)` normalized by its maximum, where `ᾱ_c` is the
/// spatial mean of the gradient on channel `c`. Both tensors are
/// `(1, c, h, w)`. An all-zero map stays all zero.
pub fn cam_from(activation: &Tensor, gradient: &Tensor) -> Result<Vec<f64>> {
    let [n, c, h, w] = activation.shape();
    if n != 1 || gradient.shape() != activation.shape() {
        return Err(Error::dim(
            "grad_cam",
            "shape",
            format!(
                "activation {:?} vs gradient {:?}",
                activation.shape(),
                gradient.shape()
            ),
        ));
    }
    let hw = (h * w) as f64;
    let mut cam = vec![0.0; h * w];
    for ch in 0..c {
        let weight = gradient.plane(0, ch).iter().sum::<f64>() / hw;
        for (o, &a) in cam.iter_mut().zip(activation.plane(0, ch)) {
            *o += weight * a;
        }
    }
    let max = cam.iter().fold(0.0f64, |m, &v| m.max(v));
    Ok(cam
        .into_iter()
        .map(|v| if max > 0.0 { v.max(0.0) / max } else { 0.0 })
        .collect())
}

/// Grad-CAM of `target_class` for one `(1, 3, s, s)` image at `layer`
/// (default: the last MBConv stage).
pub fn grad_cam(
    model: &M2ANet,
    image: &Tensor,
    target_class: usize,
    layer: Option<&str>,
) -> Result<Heatmap> {
    if target_class >= model.config.num_classes {
        return Err(Error::Config(format!(
            "target class {target_class} out of range 0..{}",
            model.config.num_classes
        )));
    }
    if image.shape()[0] != 1 {
        return Err(Error::dim("grad_cam", "n", "expected a single image"));
    }
    let layer = layer.map_or_else(|| model.last_local_layer(), str::to_string);
    let mut tape = Tape::frozen_params();
    let x = tape.constant(image.clone());
    let out = model.forward_tapped(&mut tape, &x, NormMode::Infer, Some(&layer))?;
    let tapped = out
        .tapped
        .ok_or_else(|| Error::Config(format!("layer `{layer}` produced no activation")))?;
    let k = model.config.num_classes;
    let onehot = tape.constant(Tensor::from_fn([1, k, 1, 1], |[_, c, _, _]| {
        f64::from(c == target_class)
    }));
    let picked = tape.mul(&out.logits, &onehot, Broadcast::None)?;
    let score = tape.sum(&picked)?;
    let grads = tape.backward(&score)?;
    let activation = tapped.value();
    let zero = Tensor::zeros(activation.shape());
    let gradient = grads.get(&tapped).unwrap_or(&zero);
    let [_, _, h, w] = activation.shape();
    Ok(Heatmap {
        values: cam_from(activation, gradient)?,
        height: h,
        width: w,
        layer,
        target_class,
    })
}

/// Blue → cyan → green → yellow → red.
pub fn colormap(v: f64) -> [f64; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
    ];
    let x = v.clamp(0.0, 1.0) * 4.0;
    let i = (x.floor() as usize).min(3);
    let f = x - i as f64;
    std::array::from_fn(|c| STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f)
}

impl Heatmap {
    pub fn as_tensor(&self) -> Tensor {
        Tensor::new([1, 1, self.height, self.width], self.values.clone())
            .expect("heatmap dims match values")
    }

    /// Bilinear upsampling to `h × w`, as `(1, 1, h, w)`.
    pub fn upsample(&self, h: usize, w: usize) -> Tensor {
        resize_bilinear(&self.as_tensor(), h, w)
    }

    /// Colormap blended over `image` with opacity proportional to the heat.
    pub fn overlay(&self, image: &Tensor) -> Tensor {
        let [_, _, h, w] = image.shape();
        let heat = self.upsample(h, w);
        Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
            let v = heat.at([0, 0, y, x]);
            let a = OVERLAY_ALPHA * v;
            let base = image.at([0, c, y, x]);
            if a == 0.0 {
                base
            } else {
                (1.0 - a) * base + a * colormap(v)[c]
            }
        })
    }

    pub fn write_overlay(&self, image: &Tensor, path: &Path) -> Result<()> {
        tensor_to_image(&self.overlay(image)).save(path)?;
        Ok(())
    }

    /// Raw values as `y,x,value` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["y", "x", "value"])?;
        for y in 0..self.height {
            for x in 0..self.width {
                w.write_record([
                    y.to_string(),
                    x.to_string(),
                    self.values[y * self.width + x].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Mean upsampled heat inside and outside a `(1, 1, h, w)` indicator mask.
    pub fn region_means(&self, mask: &Tensor) -> Result<(f64, f64)> {
        let [_, _, h, w] = mask.shape();
        let heat = self.upsample(h, w);
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
        for (&v, &m) in heat.data().iter().zip(mask.data()) {
            if m > 0.5 {
                inside += v;
                n_in += 1;
            } else {
                outside += v;
                n_out += 1;
            }
        }
        if n_in == 0 || n_out == 0 {
            return Err(Error::Contract("mask must contain both regions".into()));
        }
        Ok((inside / n_in as f64, outside / n_out as f64))
    }
}
