//! Class activation maps.
//!
//! The head after pooling is linearized: dense layers contribute their weight
//! matrices, batch norms their per-channel scale `gamma / sqrt(var + eps)`;
//! biases, BN shifts, swish and dropout are dropped. Projecting the final
//! feature maps onto the resulting per-channel weights gives the map.

use super::network::{Network, BN_EPSILON};
use crate::arch::HeadLayer;
use crate::error::{Error, Result};
use crate::tensor::kernels::bilinear_plane;
use crate::tensor::Tensor;

/// Weights from pooled feature channels to the `target` logit.
pub fn effective_class_weights(net: &Network, target: usize) -> Result<Vec<f32>> {
    if target >= net.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "class {target} out of range for {} classes",
            net.num_classes()
        )));
    }
    let layers = net.spec.head_layers();
    let mut v: Option<Vec<f32>> = None;
    for layer in layers.iter().rev() {
        match layer {
            HeadLayer::Dense(name) => {
                let w = net.params.tensor(&format!("{name}.w"))?;
                let (fin, fout) = w.dims2("cam")?;
                let col = v
                    .take()
                    .unwrap_or_else(|| (0..fout).map(|u| f32::from(u == target)).collect());
                v = Some(
                    (0..fin)
                        .map(|k| w.row(k).iter().zip(&col).map(|(a, b)| a * b).sum())
                        .collect(),
                );
            }
            HeadLayer::BatchNorm(name) => {
                let gamma = net.params.tensor(&format!("{name}.gamma"))?;
                let var = net.params.tensor(&format!("{name}.var"))?;
                if let Some(v) = v.as_mut() {
                    for ((x, &g), &s) in v.iter_mut().zip(gamma.data()).zip(var.data()) {
                        *x *= g / (s + BN_EPSILON).sqrt();
                    }
                }
            }
            HeadLayer::Swish | HeadLayer::Dropout(_) => {}
        }
    }
    v.ok_or_else(|| Error::InvalidArgument("head has no dense layer".into()))
}

/// `sum_c weights[c] * features[.., .., c]`, bilinearly upsampled to
/// `(out_res, out_res)` and min-max normalized. A flat map comes back as
/// all zeros.
pub fn cam_from_features(features: &Tensor, weights: &[f32], out_res: usize) -> Result<Tensor> {
    let (h, w, c) = match *features.shape() {
        [h, w, c] | [1, h, w, c] => (h, w, c),
        _ => {
            return Err(Error::shape(
                "cam",
                "features",
                "(h, w, c)",
                format!("{:?}", features.shape()),
            ))
        }
    };
    if weights.len() != c {
        return Err(Error::shape("cam", "weights", c, weights.len()));
    }
    let raw: Vec<f32> = features
        .data()
        .chunks(c)
        .map(|px| px.iter().zip(weights).map(|(a, b)| a * b).sum())
        .collect();
    let up = bilinear_plane(&raw, h, w, out_res, out_res);
    let (lo, hi) = up
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    let norm = if span > 0.0 && span.is_finite() {
        up.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; up.len()]
    };
    Tensor::new(vec![out_res, out_res], norm)
}

/// Heatmap for `target` over one image `(r, r, 3)`, at the input resolution.
pub fn activation_map(net: &Network, image: &Tensor, target: usize) -> Result<Tensor> {
    let r = net.input_resolution();
    let batch = match *image.shape() {
        [h, w, 3] => image.clone().reshape(&[1, h, w, 3])?,
        [1, _, _, 3] => image.clone(),
        _ => {
            return Err(Error::shape(
                "activation_map",
                "image",
                format!("({r}, {r}, 3)"),
                format!("{:?}", image.shape()),
            ))
        }
    };
    if net.spec.feature_resolution() < 2 {
        return Err(Error::InvalidArgument(format!(
            "final feature map is {0}x{0}; no spatial structure to map",
            net.spec.feature_resolution()
        )));
    }
    let weights = effective_class_weights(net, target)?;
    let (features, _) = net.infer(&batch)?;
    cam_from_features(&features, &weights, r)
}

/// Blends a jet-style colouring of `map` over the grayscale of `image`.
pub fn heatmap_rgb(image: &Tensor, map: &Tensor, alpha: f32) -> Result<image::RgbImage> {
    let (h, w) = match *map.shape() {
        [h, w] => (h, w),
        _ => return Err(Error::shape("heatmap", "map", "(h, w)", format!("{:?}", map.shape()))),
    };
    if image.shape() != [h, w, 3] {
        return Err(Error::shape(
            "heatmap",
            "image",
            format!("[{h}, {w}, 3]"),
            format!("{:?}", image.shape()),
        ));
    }
    let jet = |t: f32| {
        let f = |x: f32| (1.5 - (4.0 * t - x).abs()).clamp(0.0, 1.0);
        [f(3.0), f(2.0), f(1.0)]
    };
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        let g = image.data()[i * 3..i * 3 + 3].iter().sum::<f32>() / 3.0;
        let c = jet(map.data()[i]);
        px.0 = c.map(|c| ((alpha * c + (1.0 - alpha) * g).clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(out)
}
