//! Synthetic segmentation data: soft-edged blobs and rings on a textured
//! background, one grey channel, labels `0..C`.

mod degrade;
mod io;

pub use degrade::{add_gaussian_blur, add_gaussian_noise, add_random_mask, gaussian_kernel, Degradation, DegradationSpec};
pub use io::{
    load_dataset, read_pgm, save_dataset, sha256_hex, write_pgm, DatasetManifest, FileEntry, PgmScale,
};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_ATTEMPTS: usize = 500;
/// Edge softness of rendered shapes, in pixels.
const EDGE_WIDTH: f64 = 0.75;
/// Inner radius of a ring as a fraction of the outer radius.
const RING_HOLE: f64 = 0.55;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Blobs,
    Rings,
    Both,
}

impl std::str::FromStr for ShapeFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(ShapeFamily::Blobs),
            "rings" => Ok(ShapeFamily::Rings),
            "both" => Ok(ShapeFamily::Both),
            other => Err(Error::InvalidInput(format!("unknown shape family {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub family: ShapeFamily,
    /// Inclusive range of the foreground pixel fraction.
    pub fg_min: f64,
    pub fg_max: f64,
    /// Std of the smooth texture field added before normalisation.
    pub texture_noise: f64,
    /// Correlation length of the texture field in pixels (Gaussian sigma).
    pub texture_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            height: 32,
            width: 32,
            num_classes: 2,
            family: ShapeFamily::Blobs,
            fg_min: 0.12,
            fg_max: 0.35,
            texture_noise: 0.6,
            texture_scale: 6.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.height < 8 || self.width < 8 {
            return bad(format!("image size {}x{} is below 8x8", self.height, self.width));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if !(0.0 < self.fg_min && self.fg_min <= self.fg_max && self.fg_max < 1.0) {
            return bad(format!("foreground range [{}, {}] must satisfy 0 < min <= max < 1", self.fg_min, self.fg_max));
        }
        if !(self.texture_noise >= 0.0 && self.texture_noise.is_finite()) {
            return bad(format!("texture_noise must be finite and >= 0, got {}", self.texture_noise));
        }
        if !(self.texture_scale >= 0.0 && self.texture_scale.is_finite()) {
            return bad(format!("texture_scale must be finite and >= 0, got {}", self.texture_scale));
        }
        Ok(())
    }
}

/// One grey image with its label map, both row-major `H*W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Vec<f64>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Images `[B, 1, H, W]` and flattened labels for the chosen indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let n = self.pixels();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::InvalidInput(format!("sample {i} out of range for {} samples", self.len())))?;
            data.extend_from_slice(&s.image);
            labels.extend_from_slice(&s.labels);
        }
        Ok((Tensor::new(&[indices.len(), 1, self.height, self.width], data)?, labels))
    }

    /// Same labels, images passed through `f(index, image)`.
    pub fn map_images(&self, mut f: impl FnMut(usize, &[f64]) -> Result<Vec<f64>>) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| Ok(Sample { image: f(i, &s.image)?, labels: s.labels.clone() }))
            .collect::<Result<_>>()?;
        Ok(Dataset { samples, ..self.clone_empty() })
    }

    pub fn degrade(&self, spec: &DegradationSpec) -> Result<Dataset> {
        self.map_images(|i, img| spec.apply(img, self.height, self.width, i as u64))
    }

    fn clone_empty(&self) -> Dataset {
        Dataset { height: self.height, width: self.width, num_classes: self.num_classes, samples: Vec::new() }
    }
}

/// Per-image RNG: the spec seed picks the key, the image index the stream,
/// so each image is independent of how many others are drawn.
pub(crate) fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

struct Shape {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    theta: f64,
    ring: bool,
    class: usize,
}

impl Shape {
    /// Signed distance in pixels, approximated by scaling the normalised
    /// ellipse radius; negative inside.
    fn distance(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        let rho = (u * u + v * v).sqrt();
        let scale = self.rx.min(self.ry);
        let outer = (rho - 1.0) * scale;
        if self.ring {
            let inner = (RING_HOLE - rho) * scale;
            outer.max(inner)
        } else {
            outer
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sample_shapes(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let count = rng.gen_range(1..=2);
    let target = rng.gen_range(spec.fg_min..=spec.fg_max) * h * w / count as f64;
    (0..count)
        .map(|i| {
            let ring = match spec.family {
                ShapeFamily::Blobs => false,
                ShapeFamily::Rings => true,
                ShapeFamily::Both => rng.gen_bool(0.5),
            };
            let aspect: f64 = rng.gen_range(0.6..=1.0);
            let area_factor = if ring { 1.0 - RING_HOLE * RING_HOLE } else { 1.0 };
            // pi * rx * ry * area_factor = target
            let rx = (target / (std::f64::consts::PI * aspect * area_factor)).sqrt();
            let ry = rx * aspect;
            let margin = rx.max(ry) * 0.6;
            Shape {
                cy: rng.gen_range(margin.min(h / 2.0)..=(h - margin).max(h / 2.0)),
                cx: rng.gen_range(margin.min(w / 2.0)..=(w - margin).max(w / 2.0)),
                ry,
                rx,
                theta: rng.gen_range(0.0..std::f64::consts::PI),
                ring,
                class: 1 + (i % (spec.num_classes - 1)),
            }
        })
        .collect()
}

/// Renders one sample; `None` if the foreground fraction misses the range.
fn render(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Option<Sample> {
    let shapes = sample_shapes(spec, rng);
    let n = spec.height * spec.width;
    let mut image = vec![0.0; n];
    let mut labels = vec![0usize; n];
    for r in 0..spec.height {
        for c in 0..spec.width {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let idx = r * spec.width + c;
            for s in &shapes {
                let d = s.distance(y, x);
                // later shapes paint over earlier ones
                let cover = sigmoid(-d / EDGE_WIDTH);
                image[idx] = image[idx] * (1.0 - cover) + s.class as f64 * cover;
                if d < 0.0 {
                    labels[idx] = s.class;
                }
            }
        }
    }
    let fg = labels.iter().filter(|&&k| k != 0).count() as f64 / n as f64;
    if fg < spec.fg_min || fg > spec.fg_max {
        return None;
    }
    if spec.texture_noise > 0.0 {
        let texture = texture_field(spec, rng);
        image.iter_mut().zip(&texture).for_each(|(v, t)| *v += spec.texture_noise * t);
    }
    normalise(&mut image);
    Some(Sample { image, labels })
}

/// White noise blurred at `texture_scale` and rescaled to unit variance.
fn texture_field(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..spec.height * spec.width).map(|_| rng.sample(StandardNormal)).collect();
    let kernel = 2 * (3.0 * spec.texture_scale).ceil() as usize + 1;
    let mut field = add_gaussian_blur(&white, spec.height, spec.width, spec.texture_scale, kernel)
        .expect("texture buffer matches the image size");
    normalise(&mut field);
    field
}

/// Zero mean and unit variance in place; constant images become zero.
pub fn normalise(image: &mut [f64]) {
    let n = image.len() as f64;
    let mean = image.iter().sum::<f64>() / n;
    let var = image.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in image.iter_mut() {
        *v = if std > 0.0 { (*v - mean) / std } else { 0.0 };
    }
}

/// Draws `n` samples. Shapes are redrawn until the foreground fraction
/// lands in range.
pub fn generate(spec: &SyntheticSpec, n: usize) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..n)
        .map(|i| {
            let mut rng = image_rng(spec.seed, i as u64);
            (0..MAX_ATTEMPTS).find_map(|_| render(spec, &mut rng)).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "no shape layout hit foreground range [{}, {}] in {MAX_ATTEMPTS} tries",
                    spec.fg_min, spec.fg_max
                ))
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { height: spec.height, width: spec.width, num_classes: spec.num_classes, samples })
}
