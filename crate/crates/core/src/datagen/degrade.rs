use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::image_rng;
use crate::error::{Error, Result};

/// `x + N(0, sigma^2)` per pixel.
pub fn add_gaussian_noise(image: &[f64], sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.to_vec());
    }
    let mut rng = image_rng(seed, 0);
    Ok(image
        .iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            v + sigma * z
        })
        .collect())
}

/// Normalised 1D Gaussian weights of odd length (even `k` is bumped by one).
/// `sigma == 0` gives a unit impulse.
pub fn gaussian_kernel(sigma: f64, k: usize) -> Vec<f64> {
    let k = if k % 2 == 0 { k + 1 } else { k };
    let half = (k / 2) as isize;
    let raw: Vec<f64> = (-half..=half)
        .map(|i| if sigma > 0.0 { (-((i * i) as f64) / (2.0 * sigma * sigma)).exp() } else { (i == 0) as u8 as f64 })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mirror index without repeating the edge: `d c b | a b c d | c b a`.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflect padding.
pub fn add_gaussian_blur(image: &[f64], height: usize, width: usize, sigma: f64, k: usize) -> Result<Vec<f64>> {
    if image.len() != height * width {
        return Err(Error::shape("add_gaussian_blur", format!("{} pixels for {height}x{width}", image.len())));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) || k == 0 {
        return Err(Error::InvalidInput(format!("blur needs sigma >= 0 and k >= 1, got sigma {sigma}, k {k}")));
    }
    let kernel = gaussian_kernel(sigma, k);
    let half = (kernel.len() / 2) as isize;
    let mut rows = vec![0.0; image.len()];
    for r in 0..height {
        for c in 0..width {
            rows[r * width + c] = kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * image[r * width + reflect(c as isize + j as isize - half, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; image.len()];
    for r in 0..height {
        for c in 0..width {
            out[r * width + c] = kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * rows[reflect(r as isize + j as isize - half, height) * width + c])
                .sum();
        }
    }
    Ok(out)
}

/// Zeroes `round(ratio * patches)` randomly chosen `patch x patch` tiles.
/// Edge tiles are clipped to the image. Returns the image and the indices of
/// the masked tiles in raster order.
pub fn add_random_mask(
    image: &[f64],
    height: usize,
    width: usize,
    ratio: f64,
    patch: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if image.len() != height * width {
        return Err(Error::shape("add_random_mask", format!("{} pixels for {height}x{width}", image.len())));
    }
    if !(0.0..=1.0).contains(&ratio) || patch == 0 {
        return Err(Error::InvalidInput(format!("mask needs ratio in [0, 1] and patch >= 1, got {ratio}, {patch}")));
    }
    let (ph, pw) = (height.div_ceil(patch), width.div_ceil(patch));
    let total = ph * pw;
    let count = (ratio * total as f64).round() as usize;
    let mut rng = image_rng(seed, 0);
    let mut chosen = sample(&mut rng, total, count).into_vec();
    chosen.sort_unstable();
    let mut out = image.to_vec();
    for &p in &chosen {
        let (r0, c0) = ((p / pw) * patch, (p % pw) * patch);
        for r in r0..(r0 + patch).min(height) {
            out[r * width + c0..r * width + (c0 + patch).min(width)].fill(0.0);
        }
    }
    Ok((out, chosen))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Degradation {
    None,
    GaussianNoise { sigma: f64 },
    GaussianBlur { sigma: f64, kernel: usize },
    RandomMask { ratio: f64, patch: usize },
}

/// A degradation plus the seed its random draws derive from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub degradation: Degradation,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(degradation: Degradation, seed: u64) -> Self {
        DegradationSpec { degradation, seed }
    }

    /// Applies to image number `index`; each index draws from its own stream.
    pub fn apply(&self, image: &[f64], height: usize, width: usize, index: u64) -> Result<Vec<f64>> {
        let stream_seed = image_rng(self.seed, index).gen::<u64>();
        match self.degradation {
            Degradation::None => Ok(image.to_vec()),
            Degradation::GaussianNoise { sigma } => add_gaussian_noise(image, sigma, stream_seed),
            Degradation::GaussianBlur { sigma, kernel } => add_gaussian_blur(image, height, width, sigma, kernel),
            Degradation::RandomMask { ratio, patch } => {
                add_random_mask(image, height, width, ratio, patch, stream_seed).map(|(x, _)| x)
            }
        }
    }
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Degradation::None => write!(f, "none"),
            Degradation::GaussianNoise { sigma } => write!(f, "noise:{sigma}"),
            Degradation::GaussianBlur { sigma, kernel } => write!(f, "blur:{sigma}:{kernel}"),
            Degradation::RandomMask { ratio, patch } => write!(f, "mask:{ratio}:{patch}"),
        }
    }
}

/// `none`, `noise:SIGMA`, `blur:SIGMA:K`, `mask:RATIO[:PATCH]`.
impl FromStr for Degradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || Error::InvalidInput(format!("cannot parse degradation {s:?}"));
        let num = |i: usize| -> Result<f64> { parts.get(i).ok_or_else(bad)?.parse().map_err(|_| bad()) };
        let int = |i: usize| -> Result<usize> { parts.get(i).ok_or_else(bad)?.parse().map_err(|_| bad()) };
        let d = match (parts[0], parts.len()) {
            ("none", 1) => Degradation::None,
            ("noise", 2) => Degradation::GaussianNoise { sigma: num(1)? },
            ("blur", 3) => Degradation::GaussianBlur { sigma: num(1)?, kernel: int(2)? },
            ("mask", 2) => Degradation::RandomMask { ratio: num(1)?, patch: 8 },
            ("mask", 3) => Degradation::RandomMask { ratio: num(1)?, patch: int(2)? },
            _ => return Err(bad()),
        };
        match d {
            Degradation::GaussianNoise { sigma } | Degradation::GaussianBlur { sigma, .. } if !(sigma >= 0.0) => Err(bad()),
            Degradation::GaussianBlur { kernel: 0, .. } => Err(bad()),
            Degradation::RandomMask { ratio, patch } if !(0.0..=1.0).contains(&ratio) || patch == 0 => Err(bad()),
            d => Ok(d),
        }
    }
}
