//! Decoding, intensity normalization, resizing and augmentation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::DynamicImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ManifestEntry;
use crate::error::{Error, Result};
use crate::tensor::kernels::bilinear_plane;
use crate::tensor::Tensor;

/// Undecoded-intensity raster, row-major `(h, w, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub bit_depth: u32,
    pub data: Vec<u16>,
}

/// Pixels in `[0, 1]`, shape `(h, w, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Tensor,
    pub bit_depth: u32,
}

impl Image {
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[0], s[1], s[2])
    }
}

/// Reads a PNG/JPEG. Alpha channels are dropped.
pub fn decode(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, bit_depth, data): (usize, u32, Vec<u16>) = match img {
        DynamicImage::ImageLuma8(b) => (1, 8, b.into_raw().into_iter().map(u16::from).collect()),
        DynamicImage::ImageLumaA8(_) => (1, 8, img.to_luma8().into_raw().into_iter().map(u16::from).collect()),
        DynamicImage::ImageRgb8(b) => (3, 8, b.into_raw().into_iter().map(u16::from).collect()),
        DynamicImage::ImageRgba8(_) => (3, 8, img.to_rgb8().into_raw().into_iter().map(u16::from).collect()),
        DynamicImage::ImageLuma16(b) => (1, 16, b.into_raw()),
        DynamicImage::ImageLumaA16(_) => (1, 16, img.to_luma16().into_raw()),
        DynamicImage::ImageRgb16(b) => (3, 16, b.into_raw()),
        DynamicImage::ImageRgba16(_) => (3, 16, img.to_rgb16().into_raw()),
        _ => return Err(Error::UnsupportedBitDepth(32)),
    };
    Ok(RawImage {
        height: h,
        width: w,
        channels,
        bit_depth,
        data,
    })
}

/// Divides by the bit-depth maximum (255 or 65535).
pub fn normalize(raw: &RawImage) -> Result<Image> {
    let max = match raw.bit_depth {
        8 => 255.0,
        16 => 65535.0,
        d => return Err(Error::UnsupportedBitDepth(d)),
    };
    if let Some(&v) = raw.data.iter().find(|&&v| f32::from(v) > max) {
        return Err(Error::InvalidArgument(format!(
            "pixel value {v} exceeds {}-bit range",
            raw.bit_depth
        )));
    }
    let pixels = Tensor::new(
        vec![raw.height, raw.width, raw.channels],
        raw.data.iter().map(|&v| f32::from(v) / max).collect(),
    )?;
    Ok(Image {
        pixels,
        bit_depth: raw.bit_depth,
    })
}

/// Bilinear resize to `(resolution, resolution, 3)`; grayscale is replicated.
pub fn resize(img: &Image, resolution: usize) -> Result<Image> {
    let (h, w, c) = img.dims();
    if resolution == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument("resize needs non-empty input and output".into()));
    }
    if c != 1 && c != 3 {
        return Err(Error::InvalidArgument(format!("expected 1 or 3 channels, found {c}")));
    }
    let src = img.pixels.data();
    let planes: Vec<Vec<f32>> = (0..c)
        .map(|ch| {
            let plane: Vec<f32> = src.iter().skip(ch).step_by(c).copied().collect();
            bilinear_plane(&plane, h, w, resolution, resolution)
        })
        .collect();
    let mut out = Vec::with_capacity(resolution * resolution * 3);
    for i in 0..resolution * resolution {
        for ch in 0..3 {
            out.push(planes[if c == 1 { 0 } else { ch }][i].clamp(0.0, 1.0));
        }
    }
    Ok(Image {
        pixels: Tensor::new(vec![resolution, resolution, 3], out)?,
        bit_depth: img.bit_depth,
    })
}

/// Decode, normalize and resize.
pub fn load_image(path: impl AsRef<Path>, resolution: usize) -> Result<Image> {
    resize(&normalize(&decode(path)?)?, resolution)
}

/// Loads a manifest entry, resolving relative paths against `root` and
/// replaying its augmentation recipe.
pub fn load_entry(entry: &ManifestEntry, root: Option<&Path>, resolution: usize) -> Result<Image> {
    let p = Path::new(&entry.image_path);
    let path = match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    };
    let img = load_image(&path, resolution)?;
    Ok(match &entry.aug_recipe {
        Some(r) => apply_recipe(&img, r),
        None => img,
    })
}

/// Random transform family; each transform fires independently.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugSpec {
    pub max_rotation_deg: f64,
    pub zoom_fraction: f64,
    pub horizontal_flip: bool,
    pub p_rotate: f64,
    pub p_zoom: f64,
    pub p_flip: f64,
}

impl Default for AugSpec {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            zoom_fraction: 0.2,
            horizontal_flip: true,
            p_rotate: 0.5,
            p_zoom: 0.5,
            p_flip: 0.5,
        }
    }
}

impl AugSpec {
    pub fn with_probability(self, p: f64) -> Self {
        Self {
            p_rotate: p,
            p_zoom: p,
            p_flip: p,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in01 = |p: f64| (0.0..=1.0).contains(&p);
        if !(0.0..=15.0).contains(&self.max_rotation_deg)
            || !(0.0..=0.2).contains(&self.zoom_fraction)
            || ![self.p_rotate, self.p_zoom, self.p_flip].into_iter().all(in01)
        {
            return Err(Error::InvalidArgument(format!("augmentation out of range: {self:?}")));
        }
        Ok(())
    }

    /// One concrete recipe. Always consumes the same number of draws so
    /// recipes stay aligned across probability settings.
    pub fn draw(&self, rng: &mut impl Rng) -> AugRecipe {
        let fire_rot = rng.gen::<f64>() < self.p_rotate;
        let rot = rng.gen_range(-1.0..=1.0) * self.max_rotation_deg;
        let fire_zoom = rng.gen::<f64>() < self.p_zoom;
        let zoom = 1.0 + rng.gen_range(0.0..=1.0) * self.zoom_fraction;
        let fire_flip = rng.gen::<f64>() < self.p_flip;
        AugRecipe {
            rotation_deg: if fire_rot { rot } else { 0.0 },
            zoom: if fire_zoom { zoom } else { 1.0 },
            flip: self.horizontal_flip && fire_flip,
        }
    }
}

/// A concrete transform: rotate about the center, zoom by center crop, then
/// mirror left-right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugRecipe {
    pub rotation_deg: f64,
    pub zoom: f64,
    pub flip: bool,
}

impl AugRecipe {
    pub const IDENTITY: AugRecipe = AugRecipe {
        rotation_deg: 0.0,
        zoom: 1.0,
        flip: false,
    };
}

impl fmt::Display for AugRecipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rot={};zoom={};flip={}",
            self.rotation_deg,
            self.zoom,
            u8::from(self.flip)
        )
    }
}

impl FromStr for AugRecipe {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Manifest(format!("malformed aug_recipe `{s}`"));
        let parts: Vec<&str> = s.split(';').collect();
        let [r, z, fl] = parts.as_slice() else {
            return Err(bad());
        };
        let rotation_deg: f64 = r.strip_prefix("rot=").ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let zoom: f64 = z.strip_prefix("zoom=").ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let flip = match fl.strip_prefix("flip=").ok_or_else(bad)? {
            "0" => false,
            "1" => true,
            _ => return Err(bad()),
        };
        if !rotation_deg.is_finite() || !zoom.is_finite() || zoom < 1.0 {
            return Err(bad());
        }
        Ok(Self {
            rotation_deg,
            zoom,
            flip,
        })
    }
}

fn sample(src: &[f32], h: usize, w: usize, c: usize, ch: usize, fy: f64, fx: f64) -> f32 {
    // Edge pixels extend outward.
    let fy = fy.clamp(0.0, (h - 1) as f64);
    let fx = fx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = ((fy - y0 as f64) as f32, (fx - x0 as f64) as f32);
    let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
    let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
    let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
    top * (1.0 - ty) + bot * ty
}

pub fn apply_recipe(img: &Image, recipe: &AugRecipe) -> Image {
    let (h, w, c) = img.dims();
    let src = img.pixels.data();
    let mut data = if recipe.rotation_deg != 0.0 || recipe.zoom != 1.0 {
        let (sin, cos) = recipe.rotation_deg.to_radians().sin_cos();
        let inv_zoom = 1.0 / recipe.zoom;
        let (hc, wc) = (h as f64 / 2.0, w as f64 / 2.0);
        let mut out = Vec::with_capacity(src.len());
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 + 0.5 - hc, x as f64 + 0.5 - wc);
                // Inverse map: undo rotation, then undo zoom.
                let sx = (cos * dx + sin * dy) * inv_zoom + wc - 0.5;
                let sy = (-sin * dx + cos * dy) * inv_zoom + hc - 0.5;
                for ch in 0..c {
                    out.push(sample(src, h, w, c, ch, sy, sx).clamp(0.0, 1.0));
                }
            }
        }
        out
    } else {
        src.to_vec()
    };
    if recipe.flip {
        for row in data.chunks_exact_mut(w * c) {
            for x in 0..w / 2 {
                for ch in 0..c {
                    row.swap(x * c + ch, (w - 1 - x) * c + ch);
                }
            }
        }
    }
    Image {
        pixels: Tensor::new(vec![h, w, c], data).expect("same dims"),
        bit_depth: img.bit_depth,
    }
}

/// Draws a recipe under `seed` and applies it.
pub fn augment(img: &Image, aug: &AugSpec, seed: u64) -> Image {
    let recipe = aug.draw(&mut ChaCha8Rng::seed_from_u64(seed));
    apply_recipe(img, &recipe)
}
