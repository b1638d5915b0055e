//! Synthetic chest-film stand-ins with class-specific structure.
//!
//! Every image has a noisy thorax silhouette with two darker lung fields.
//! Normal lungs stay clear, Pneumonia adds one dense consolidation in a
//! random lobe, COVID19 adds bilateral peripheral ground-glass haze. The
//! classes are separable by construction, which makes the set useful for
//! smoke-testing training, not for anything clinical.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::Image;
use super::{Label, Manifest, ManifestEntry, Partition, Source};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn blob(dy: f64, dx: f64, sigma: f64) -> f64 {
    (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()
}

/// Single-channel intensities in `[0, 1]`, quantized to 8-bit levels.
fn render(label: Label, res: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let r = res as f64;
    let jitter = |rng: &mut ChaCha8Rng, s: f64| rng.gen_range(-s..=s);
    let lung_y = 0.5 + jitter(rng, 0.04);
    let lung_dx = 0.2 + jitter(rng, 0.02);
    let lesion_side = if rng.gen::<bool>() { -1.0 } else { 1.0 };
    let lesion_y = lung_y + jitter(rng, 0.1);
    let lesion_sigma = 0.08 + jitter(rng, 0.02);
    let haze_y = lung_y + 0.1 + jitter(rng, 0.05);
    let mut px = Vec::with_capacity(res * res);
    for y in 0..res {
        for x in 0..res {
            let (fy, fx) = ((y as f64 + 0.5) / r, (x as f64 + 0.5) / r);
            // Thorax: bright ellipse, dark lungs inside it.
            let body = blob((fy - 0.5) / 1.3, fx - 0.5, 0.32);
            let lungs =
                blob((fy - lung_y) / 1.6, fx - 0.5 + lung_dx, 0.1) + blob((fy - lung_y) / 1.6, fx - 0.5 - lung_dx, 0.1);
            let mut v = 0.1 + 0.55 * body - 0.35 * lungs;
            match label {
                Label::Normal => {}
                Label::Pneumonia => {
                    v += 0.6 * blob(fy - lesion_y, fx - 0.5 - lesion_side * lung_dx, lesion_sigma);
                }
                Label::Covid19 => {
                    let off = lung_dx + 0.06;
                    v += 0.35 * blob((fy - haze_y) / 1.8, fx - 0.5 - off, 0.09);
                    v += 0.35 * blob((fy - haze_y) / 1.8, fx - 0.5 + off, 0.09);
                    v += 0.15;
                }
            }
            v += jitter(rng, 0.04);
            px.push(((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32);
        }
    }
    px
}

/// One `(res, res, 3)` image; the gray plane is replicated.
pub fn synth_image(label: Label, resolution: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((label as u64 + 1) << 56));
    let gray = render(label, resolution, &mut rng);
    let data = gray.iter().flat_map(|&v| [v, v, v]).collect();
    Image {
        pixels: Tensor::new(vec![resolution, resolution, 3], data).expect("square"),
        bit_depth: 8,
    }
}

/// `per_class[i]` images of each class, interleaved N, P, C, N, P, C, ...
pub fn synth_set(per_class: [usize; 3], resolution: usize, seed: u64) -> Vec<(Image, Label)> {
    let mut out = Vec::new();
    let max = per_class.iter().copied().max().unwrap_or(0);
    for i in 0..max {
        for label in Label::ALL {
            if i < per_class[label as usize] {
                let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
                out.push((synth_image(label, resolution, s), label));
            }
        }
    }
    out
}

/// Writes 8-bit grayscale PNGs under `dir` and returns the two source
/// manifests (paths relative to `dir`): Normal and Pneumonia from RSNA,
/// COVID19 from the COVID collection.
pub fn write_corpus(dir: &Path, per_class: [usize; 3], resolution: usize, seed: u64) -> Result<(Manifest, Manifest)> {
    let (mut rsna, mut covid) = (Vec::new(), Vec::new());
    for label in Label::ALL {
        let sub = dir.join(label.as_str());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for i in 0..per_class[label as usize] {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let img = synth_image(label, resolution, s);
            let gray: Vec<u8> = img
                .pixels
                .data()
                .iter()
                .step_by(3)
                .map(|&v| (v * 255.0).round() as u8)
                .collect();
            let rel = format!("{}/{i:05}.png", label.as_str());
            let buf = image::GrayImage::from_raw(resolution as u32, resolution as u32, gray).expect("sized buffer");
            buf.save(dir.join(&rel))?;
            let (src, list) = match label {
                Label::Covid19 => (Source::CovidCollection, &mut covid),
                _ => (Source::Rsna, &mut rsna),
            };
            list.push(ManifestEntry::new(rel, label, src, Partition::Train));
        }
    }
    Ok((Manifest::new(rsna), Manifest::new(covid)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synth_image(Label::Covid19, 32, 4);
        assert_eq!(a, synth_image(Label::Covid19, 32, 4));
        assert_ne!(a, synth_image(Label::Covid19, 32, 5));
        assert!(a.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn classes_differ_on_average() {
        let mean = |l| (0..10).map(|s| synth_image(l, 32, s).pixels.sum() as f64).sum::<f64>() / 10.0;
        let (n, p, c) = (mean(Label::Normal), mean(Label::Pneumonia), mean(Label::Covid19));
        assert!(n < p && n < c, "{n} {p} {c}");
    }

    #[test]
    fn set_is_interleaved() {
        let s = synth_set([2, 1, 2], 8, 0);
        let labels: Vec<Label> = s.iter().map(|(_, l)| *l).collect();
        assert_eq!(
            labels,
            [
                Label::Normal,
                Label::Pneumonia,
                Label::Covid19,
                Label::Normal,
                Label::Covid19
            ]
        );
    }
}
