//! RGB images and the augmentation transforms used to expand the corpus.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{Provenance, Sample};

/// Row-major interleaved RGB image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * Self::CHANNELS {
            return Err(Error::InvalidShape {
                op: "image",
                shape: vec![height, width, Self::CHANNELS],
                reason: format!("got {} values", pixels.len()),
            });
        }
        let mut img = Self {
            width,
            height,
            pixels,
        };
        img.clamp();
        Ok(img)
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let pixels = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, pixels).expect("valid dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for (px, v) in self.pixels[i..i + 3].iter_mut().zip(rgb) {
            *px = v.clamp(0.0, 1.0);
        }
    }

    /// Planar `3×H×W` copy of the pixels, the layout convolutions consume.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * 3];
        for (p, px) in self.pixels.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c];
            }
        }
        out
    }

    fn clamp(&mut self) {
        for v in &mut self.pixels {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Rounds every channel to the nearest multiple of 1/255 so that an
    /// 8-bit PNG round trip is lossless.
    pub fn quantize(&mut self) {
        for v in &mut self.pixels {
            *v = (*v * 255.0).round() / 255.0;
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let pixels = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(width, height, pixels)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer matches dimensions");
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Decodes PNG (or any enabled format) bytes as RGB.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(w as usize, h as usize, img.as_raw())
    }

    /// Bilinear resample to `width×height` (pixel-center alignment, edge
    /// clamped). Returns a copy when the size already matches.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Image::filled(width, height, [0.0; 3]);
        for y in 0..height {
            for x in 0..width {
                let px = (x as f64 + 0.5) * sx - 0.5;
                let py = (y as f64 + 0.5) * sy - 0.5;
                out.set(x, y, self.sample_bilinear(px, py));
            }
        }
        out
    }

    /// Nearest-edge replication outside the image.
    fn at_clamped(&self, x: isize, y: isize) -> [f64; 3] {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.get(cx, cy)
    }

    fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let x0 = x.floor();
        let y0 = y.floor();
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let p00 = self.at_clamped(x0, y0);
        let p10 = self.at_clamped(x0 + 1, y0);
        let p01 = self.at_clamped(x0, y0 + 1);
        let p11 = self.at_clamped(x0 + 1, y0 + 1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - fx) + p10[c] * fx;
            let bottom = p01[c] * (1.0 - fx) + p11[c] * fx;
            out[c] = top * (1.0 - fy) + bottom * fy;
        }
        out
    }

    fn remap(&self, f: impl Fn(f64, f64) -> (f64, f64)) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let (sx, sy) = f(x as f64, y as f64);
                out.set(x, y, self.sample_bilinear(sx, sy));
            }
        }
        out
    }
}

/// Mixes seed components into one well-distributed 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(0x6a09_e667_f3bc_c909, |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub const SHIFT_FRACTION: f64 = 0.30;
pub const SHEAR_FRACTION: f64 = 0.15;
pub const ZOOM_FRACTION: f64 = 0.05;
pub const BRIGHTNESS_RANGE: f64 = 0.80;
pub const COLOR_JITTER: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Rotate90,
    WidthShift,
    HeightShift,
    Shear,
    Zoom,
    ColorJitter,
    Hflip,
    Vflip,
    Brightness,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 9] = [
        Self::Rotate90,
        Self::WidthShift,
        Self::HeightShift,
        Self::Shear,
        Self::Zoom,
        Self::ColorJitter,
        Self::Hflip,
        Self::Vflip,
        Self::Brightness,
    ];
}

/// One transform kind plus the seed its parameters are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    pub seed: u64,
}

/// Concrete transform parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AugmentParams {
    /// Counter-clockwise quarter turns, 1..=3.
    Rotate90 { quarter_turns: u8 },
    /// Whole-pixel displacement; positive moves content right / down.
    WidthShift { dx: i64 },
    HeightShift { dy: i64 },
    /// Horizontal displacement per row, relative to the image center row.
    Shear { factor: f64 },
    /// >1 enlarges the content.
    Zoom { factor: f64 },
    ColorJitter { offsets: [f64; 3] },
    Hflip,
    Vflip,
    Brightness { factor: f64 },
}

impl AugmentSpec {
    /// Draws parameters inside the declared ranges for an image of the
    /// given size.
    pub fn sample(&self, width: usize, height: usize) -> AugmentParams {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let shift = |rng: &mut ChaCha8Rng, extent: usize| {
            let max = (SHIFT_FRACTION * extent as f64).floor() as i64;
            rng.gen_range(-max..=max)
        };
        match self.kind {
            AugmentKind::Rotate90 => AugmentParams::Rotate90 {
                quarter_turns: rng.gen_range(1..=3),
            },
            AugmentKind::WidthShift => AugmentParams::WidthShift { dx: shift(&mut rng, width) },
            AugmentKind::HeightShift => AugmentParams::HeightShift { dy: shift(&mut rng, height) },
            AugmentKind::Shear => AugmentParams::Shear {
                factor: rng.gen_range(-SHEAR_FRACTION..=SHEAR_FRACTION),
            },
            AugmentKind::Zoom => AugmentParams::Zoom {
                factor: rng.gen_range(1.0 - ZOOM_FRACTION..=1.0 + ZOOM_FRACTION),
            },
            AugmentKind::ColorJitter => AugmentParams::ColorJitter {
                offsets: [(); 3].map(|_| rng.gen_range(-COLOR_JITTER..=COLOR_JITTER)),
            },
            AugmentKind::Hflip => AugmentParams::Hflip,
            AugmentKind::Vflip => AugmentParams::Vflip,
            AugmentKind::Brightness => AugmentParams::Brightness {
                factor: rng.gen_range(1.0 - BRIGHTNESS_RANGE..=1.0 + BRIGHTNESS_RANGE),
            },
        }
    }
}

/// Samples parameters from `spec` and applies them.
pub fn apply_augmentation(img: &Image, spec: &AugmentSpec) -> Image {
    apply_params(img, &spec.sample(img.width(), img.height()))
}

pub fn apply_params(img: &Image, params: &AugmentParams) -> Image {
    let (w, h) = (img.width as f64, img.height as f64);
    match *params {
        AugmentParams::Rotate90 { quarter_turns } => {
            (0..quarter_turns % 4).fold(img.clone(), |acc, _| rotate_quarter(&acc))
        }
        AugmentParams::WidthShift { dx } => {
            let mut out = img.clone();
            for y in 0..img.height {
                for x in 0..img.width {
                    out.set(x, y, img.at_clamped(x as isize - dx as isize, y as isize));
                }
            }
            out
        }
        AugmentParams::HeightShift { dy } => {
            let mut out = img.clone();
            for y in 0..img.height {
                for x in 0..img.width {
                    out.set(x, y, img.at_clamped(x as isize, y as isize - dy as isize));
                }
            }
            out
        }
        AugmentParams::Shear { factor } => {
            let cy = (h - 1.0) / 2.0;
            img.remap(|x, y| (x - factor * (y - cy), y))
        }
        AugmentParams::Zoom { factor } => {
            let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
            img.remap(|x, y| (cx + (x - cx) / factor, cy + (y - cy) / factor))
        }
        AugmentParams::ColorJitter { offsets } => {
            let mut out = img.clone();
            for px in out.pixels.chunks_mut(3) {
                for c in 0..3 {
                    px[c] += offsets[c];
                }
            }
            out.clamp();
            out
        }
        AugmentParams::Hflip => {
            let mut out = img.clone();
            for y in 0..img.height {
                for x in 0..img.width {
                    out.set(x, y, img.get(img.width - 1 - x, y));
                }
            }
            out
        }
        AugmentParams::Vflip => {
            let mut out = img.clone();
            for y in 0..img.height {
                for x in 0..img.width {
                    out.set(x, y, img.get(x, img.height - 1 - y));
                }
            }
            out
        }
        AugmentParams::Brightness { factor } => {
            let mut out = img.clone();
            for v in &mut out.pixels {
                *v *= factor;
            }
            out.clamp();
            out
        }
    }
}

/// One counter-clockwise quarter turn. Non-square images are turned by a
/// half turn instead so dimensions are preserved.
pub fn rotate_quarter(img: &Image) -> Image {
    let (w, h) = (img.width, img.height);
    let mut out = img.clone();
    if w != h {
        for y in 0..h {
            for x in 0..w {
                out.set(x, y, img.get(w - 1 - x, h - 1 - y));
            }
        }
        return out;
    }
    for y in 0..h {
        for x in 0..w {
            // destination (x, y) takes source (w-1-y, x)
            out.set(x, y, img.get(w - 1 - y, x));
        }
    }
    out
}

/// The eight transform families a copy is drawn from; the flip family picks
/// horizontal or vertical with equal odds.
fn draw_kind(rng: &mut ChaCha8Rng) -> AugmentKind {
    match rng.gen_range(0..8) {
        0 => AugmentKind::Rotate90,
        1 => AugmentKind::WidthShift,
        2 => AugmentKind::HeightShift,
        3 => AugmentKind::Shear,
        4 => AugmentKind::Zoom,
        5 => AugmentKind::ColorJitter,
        6 => {
            if rng.gen_bool(0.5) {
                AugmentKind::Hflip
            } else {
                AugmentKind::Vflip
            }
        }
        _ => AugmentKind::Brightness,
    }
}

/// Keeps every input sample and appends `multiplier - 1` augmented copies
/// of each. Copy `j` of input `i` is seeded from `(seed, i, j)`, so the
/// result does not depend on scheduling.
pub fn expand_dataset(samples: &[Sample], multiplier: usize, seed: u64) -> Result<Vec<Sample>> {
    if samples.is_empty() {
        return Err(Error::Empty("sample list"));
    }
    if multiplier == 0 {
        return Err(Error::Config("multiplier must be at least 1".into()));
    }
    let expanded: Vec<Vec<Sample>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, base)| {
            let mut group = Vec::with_capacity(multiplier);
            group.push(base.clone());
            for j in 1..multiplier {
                let copy_seed = derive_seed(&[seed, i as u64, j as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(copy_seed);
                let spec = AugmentSpec {
                    kind: draw_kind(&mut rng),
                    seed: rng.gen(),
                };
                let params = spec.sample(base.image.width(), base.image.height());
                let mut image = apply_params(&base.image, &params);
                image.quantize();
                let mut chain = match &base.provenance {
                    Provenance::Original => Vec::new(),
                    Provenance::Augmented { chain, .. } => chain.clone(),
                };
                chain.push(params);
                group.push(Sample {
                    id: format!("{}-aug{j}", base.id),
                    image,
                    spec: base.spec.clone(),
                    captions: base.captions.clone(),
                    split: base.split,
                    provenance: Provenance::Augmented {
                        source: base.id.clone(),
                        chain,
                    },
                });
            }
            group
        })
        .collect();
    Ok(expanded.into_iter().flatten().collect())
}
