//! Procedural class-conditional images and a handcrafted feature encoder.
//!
//! Each class owns a shape, a hue and a nominal pose; images jitter those
//! around the class values. `similarity_structure` is the ratio of
//! within-class to between-class style variance, so `0.0` makes every image
//! of a class identical and larger values blur the classes together.
//!
//! The encoder concatenates a centered square-root color histogram (8 bins
//! per channel) with the opponent-color mean and spatial moments of the
//! bright foreground, then L2-normalizes. It stands in for a pretrained image
//! embedding in the similarity query and in the Fréchet distance proxy.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::checkpoint::{Reader, WriteLe};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const MIN_IMAGE_SIZE: usize = 8;
pub const HIST_BINS: usize = 8;
/// Encoder output dimension: histogram, two opponent colors, six shape moments.
pub const FEATURE_DIM: usize = HIST_BINS * CHANNELS + 2 + 6;
/// Block weights relative to the histogram block.
const COLOR_WEIGHT: f64 = 2.0;
const SHAPE_WEIGHT: f64 = 3.0;
/// HSV value above which a pixel counts as foreground; backgrounds stay below.
const FG_LEVEL: f64 = 0.4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub similarity_structure: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 8,
            images_per_class: 64,
            image_size: 16,
            seed: 0,
            similarity_structure: 0.05,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(Error::Config(format!(
                "image_size {} < {MIN_IMAGE_SIZE}: patchification needs at least 2x2 patches",
                self.image_size
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.images_per_class == 0 {
            return Err(Error::Config("images_per_class must be positive".into()));
        }
        if !(self.similarity_structure >= 0.0 && self.similarity_structure.is_finite()) {
            return Err(Error::Config(
                "similarity_structure must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Bar,
    Diamond,
    Frame,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Bar,
        ShapeKind::Diamond,
        ShapeKind::Frame,
    ];

    fn code(self) -> u32 {
        ShapeKind::ALL
            .iter()
            .position(|&s| s == self)
            .expect("listed") as u32
    }

    fn from_code(code: u32) -> Option<Self> {
        ShapeKind::ALL.get(code as usize).copied()
    }

    /// Signed distance in shape-local units (negative inside).
    fn sdf(self, x: f64, y: f64) -> f64 {
        match self {
            ShapeKind::Disk => (x * x + y * y).sqrt() - 1.0,
            ShapeKind::Square => x.abs().max(y.abs()) - 0.85,
            ShapeKind::Triangle => {
                let k = 3f64.sqrt();
                (k * x.abs() + y).max(-2.0 * y) * 0.5 - 0.5
            }
            ShapeKind::Ring => ((x * x + y * y).sqrt() - 0.75).abs() - 0.3,
            ShapeKind::Cross => {
                let a = x.abs().max(y.abs() * 3.0) - 1.0;
                let b = y.abs().max(x.abs() * 3.0) - 1.0;
                a.min(b) / 3.0 * 2.0
            }
            ShapeKind::Bar => (x.abs() - 1.0).max(y.abs() - 0.35),
            ShapeKind::Diamond => (x.abs() + y.abs()) / 2f64.sqrt() - 0.75,
            ShapeKind::Frame => (x.abs().max(y.abs()) - 0.65).abs() - 0.25,
        }
    }
}

/// Generator latents of one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub shape: ShapeKind,
    /// Foreground hue in turns.
    pub hue: f64,
    /// Shape radius as a fraction of the image size.
    pub scale: f64,
    /// Center offset in `[-1, 1]` image coordinates.
    pub center_x: f64,
    pub center_y: f64,
    /// Radians.
    pub rotation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    pub id: u64,
    pub class_id: usize,
    pub style: StyleParams,
    /// `[H, W, 3]` in `[0, 1]`.
    pub pixels: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub image_size: usize,
    pub seed: u64,
    pub images: Vec<ToyImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.images.iter().position(|im| im.id == id)
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Renders a style into `[size, size, 3]` pixels in `[0, 1]`.
pub fn render(style: &StyleParams, size: usize) -> Tensor {
    let fg = hsv_to_rgb(style.hue, 0.85, 0.95);
    let bg_top = hsv_to_rgb(style.hue + 0.5, 0.5, 0.35);
    let bg_bottom = hsv_to_rgb(style.hue + 0.5, 0.5, 0.12);
    let (sin, cos) = style.rotation.sin_cos();
    let radius = style.scale.max(1e-3) * 2.0;
    let px = 2.0 / size as f64;
    let mut data = Vec::with_capacity(size * size * CHANNELS);
    for row in 0..size {
        let v = (row as f64 + 0.5) / size as f64;
        for col in 0..size {
            // image coordinates in [-1, 1]
            let ix = (col as f64 + 0.5) * px - 1.0 - style.center_x;
            let iy = (row as f64 + 0.5) * px - 1.0 - style.center_y;
            let lx = (cos * ix + sin * iy) / radius;
            let ly = (-sin * ix + cos * iy) / radius;
            let d = style.shape.sdf(lx, ly) * radius;
            // one pixel of anti-aliasing
            let cover = (0.5 - d / px).clamp(0.0, 1.0);
            for c in 0..CHANNELS {
                let bg = bg_top[c] * (1.0 - v) + bg_bottom[c] * v;
                data.push((bg * (1.0 - cover) + fg[c] * cover).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![size, size, CHANNELS], data).expect("render shape")
}

struct ClassStyle {
    shape: ShapeKind,
    hue: f64,
    scale: f64,
    center_x: f64,
    center_y: f64,
    rotation: f64,
}

// Between-class spreads (standard deviations) of the continuous latents.
const HUE_SPREAD: f64 = 0.1;
const SCALE_SPREAD: f64 = 0.05;
const CENTER_SPREAD: f64 = 0.15;
const ROTATION_SPREAD: f64 = 0.9;

/// Generates `num_classes * images_per_class` images, class-major, with ids
/// `0..count` in generation order.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let jitter = spec.similarity_structure.sqrt();
    let mut images = Vec::with_capacity(spec.num_classes * spec.images_per_class);
    for class in 0..spec.num_classes {
        let mut crng = rng::rng_from(spec.seed, &[tag::DATASET, class as u64]);
        let cs = ClassStyle {
            shape: ShapeKind::ALL[class % ShapeKind::ALL.len()],
            // evenly spread hues with a small random phase per class
            hue: (class as f64 + crng.random_range(-0.2..0.2)) / spec.num_classes as f64,
            scale: 0.4 + crng.random_range(-1.0..1.0) * SCALE_SPREAD * 3f64.sqrt(),
            center_x: crng.random_range(-1.0..1.0) * CENTER_SPREAD * 3f64.sqrt(),
            center_y: crng.random_range(-1.0..1.0) * CENTER_SPREAD * 3f64.sqrt(),
            rotation: crng.random_range(-PI..PI),
        };
        for i in 0..spec.images_per_class {
            let mut irng = rng::rng_from(spec.seed, &[tag::DATASET, class as u64, 1 + i as u64]);
            let z = rng::normal_vec(&mut irng, 5);
            let style = StyleParams {
                shape: cs.shape,
                hue: (cs.hue + jitter * HUE_SPREAD * z[0]).rem_euclid(1.0),
                scale: (cs.scale + jitter * SCALE_SPREAD * z[1]).clamp(0.15, 0.7),
                center_x: (cs.center_x + jitter * CENTER_SPREAD * z[2]).clamp(-0.5, 0.5),
                center_y: (cs.center_y + jitter * CENTER_SPREAD * z[3]).clamp(-0.5, 0.5),
                rotation: (cs.rotation + jitter * ROTATION_SPREAD * z[4]).rem_euclid(TAU),
            };
            images.push(ToyImage {
                id: (class * spec.images_per_class + i) as u64,
                class_id: class,
                style,
                pixels: render(&style, spec.image_size),
            });
        }
    }
    Ok(Dataset {
        num_classes: spec.num_classes,
        image_size: spec.image_size,
        seed: spec.seed,
        images,
    })
}

/// Encodes `[H, W, 3]` pixels into a unit-norm feature vector of
/// [`FEATURE_DIM`] entries.
pub fn encode_pixels(pixels: &Tensor) -> Result<Vec<f64>> {
    pixels.require_rank(3, "encode")?;
    let (h, w, c) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    if c != CHANNELS || h == 0 || w == 0 {
        return Err(Error::Dimension(format!(
            "encode expects [H, W, 3], got {:?}",
            pixels.shape()
        )));
    }
    pixels.check_finite("encode")?;
    let n = (h * w) as f64;
    let mut hist = [0.0; HIST_BINS * CHANNELS];
    // foreground weights: brightness above the background ceiling
    let mut fg = Vec::with_capacity(h * w);
    let (mut mass, mut red_green, mut yellow_blue, mut mx, mut my) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, px) in pixels.data().chunks(CHANNELS).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            let bin = ((v.clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
            hist[ch * HIST_BINS + bin] += 1.0 / n;
        }
        let value = px[0].max(px[1]).max(px[2]);
        let wt = (value - FG_LEVEL).max(0.0);
        let (x, y) = coords(i, w, h);
        mass += wt;
        red_green += wt * (px[0] - px[1]);
        yellow_blue += wt * (0.5 * (px[0] + px[1]) - px[2]);
        mx += wt * x;
        my += wt * y;
        fg.push((wt, x, y));
    }
    let uniform = (1.0 / HIST_BINS as f64).sqrt();
    let mut feat: Vec<f64> = hist.iter().map(|v| v.sqrt() - uniform).collect();
    if mass > 0.0 {
        let (cx, cy) = (mx / mass, my / mass);
        let (mut mu20, mut mu02, mut mu11) = (0.0, 0.0, 0.0);
        for &(wt, x, y) in &fg {
            mu20 += wt * (x - cx) * (x - cx);
            mu02 += wt * (y - cy) * (y - cy);
            mu11 += wt * (x - cx) * (y - cy);
        }
        feat.extend([red_green / mass, yellow_blue / mass].map(|v| COLOR_WEIGHT * v));
        feat.extend(
            [cx, cy, mu20 / mass, mu02 / mass, mu11 / mass, mass / n].map(|v| SHAPE_WEIGHT * v),
        );
    } else {
        feat.resize(FEATURE_DIM, 0.0);
    }
    let norm = feat.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Numeric("encoder features vanished".into()));
    }
    feat.iter_mut().for_each(|v| *v /= norm);
    Ok(feat)
}

fn coords(i: usize, w: usize, h: usize) -> (f64, f64) {
    let (row, col) = (i / w, i % w);
    (
        (col as f64 + 0.5) / w as f64 * 2.0 - 1.0,
        (row as f64 + 0.5) / h as f64 * 2.0 - 1.0,
    )
}

pub fn encode(image: &ToyImage) -> Result<Vec<f64>> {
    encode_pixels(&image.pixels)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub const DATASET_MAGIC: &[u8; 4] = b"GDD1";

impl Dataset {
    /// `GDD1` layout: magic, then `u32 K, u32 count, u32 H, u32 W, u32 Ch,
    /// u64 seed`, then per image `u64 id, u32 class, u32 shape,
    /// 5 x f64 style, H*W*Ch x f64 pixels`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.put_u32(self.num_classes as u32);
        out.put_u32(self.images.len() as u32);
        out.put_u32(self.image_size as u32);
        out.put_u32(self.image_size as u32);
        out.put_u32(CHANNELS as u32);
        out.put_u64(self.seed);
        for im in &self.images {
            out.put_u64(im.id);
            out.put_u32(im.class_id as u32);
            out.put_u32(im.style.shape.code());
            let s = &im.style;
            out.put_f64s(&[s.hue, s.scale, s.center_x, s.center_y, s.rotation]);
            out.put_f64s(im.pixels.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, origin);
        r.magic(DATASET_MAGIC)?;
        let num_classes = r.u32()? as usize;
        let count = r.u32()? as usize;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let ch = r.u32()? as usize;
        let seed = r.u64()?;
        if h != w || ch != CHANNELS {
            return Err(r.err(format!("unsupported image geometry {h}x{w}x{ch}")));
        }
        let mut images = Vec::with_capacity(count);
        for _ in 0..count {
            let id = r.u64()?;
            let class_id = r.u32()? as usize;
            let shape =
                ShapeKind::from_code(r.u32()?).ok_or_else(|| r.err("unknown shape code"))?;
            let s = r.f64s(5)?;
            let pixels = Tensor::new(vec![h, w, ch], r.f64s(h * w * ch)?)?;
            if class_id >= num_classes {
                return Err(r.err(format!("class {class_id} out of range")));
            }
            images.push(ToyImage {
                id,
                class_id,
                style: StyleParams {
                    shape,
                    hue: s[0],
                    scale: s[1],
                    center_x: s[2],
                    center_y: s[3],
                    rotation: s[4],
                },
                pixels,
            });
        }
        r.finish()?;
        Ok(Dataset {
            num_classes,
            image_size: h,
            seed,
            images,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Mean pairwise cosine within classes and between classes, by brute force.
pub fn similarity_gap(dataset: &Dataset) -> Result<(f64, f64)> {
    let feats = dataset
        .images
        .iter()
        .map(encode)
        .collect::<Result<Vec<_>>>()?;
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..feats.len() {
        for j in i + 1..feats.len() {
            let c = cosine(&feats[i], &feats[j]);
            if dataset.images[i].class_id == dataset.images[j].class_id {
                within += c;
                nw += 1;
            } else {
                between += c;
                nb += 1;
            }
        }
    }
    Ok((within / nw.max(1) as f64, between / nb.max(1) as f64))
}
