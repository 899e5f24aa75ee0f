//! Uncertainty-aware filtering of whole images.
//!
//! A validation set with labels fixes a threshold `u*` on per-image mean
//! uncertainty; test images at or above it are flagged unreliable.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which pixels a mean uncertainty was averaged over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintySource {
    GtRegion,
    PredictedRegion,
    WholeImage,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanUncertainty {
    pub value: f64,
    /// True when the region was empty and the whole image was used.
    pub fell_back: bool,
}

/// Mean of `u` over `region`, or over the whole image if `region` is empty.
pub fn mean_uncertainty(u: &[f64], region: &[bool]) -> Result<MeanUncertainty> {
    if u.len() != region.len() {
        return Err(Error::shape("mean_uncertainty", format!("{} values, {} mask pixels", u.len(), region.len())));
    }
    if u.is_empty() {
        return Err(Error::InvalidInput("mean_uncertainty of an empty image".into()));
    }
    let (sum, count) = u
        .iter()
        .zip(region)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v, n + 1));
    Ok(if count == 0 {
        MeanUncertainty { value: u.iter().sum::<f64>() / u.len() as f64, fell_back: true }
    } else {
        MeanUncertainty { value: sum / count as f64, fell_back: false }
    })
}

/// Per-image calibration gap `|acc - exp(-mean_u)|`.
pub fn uce(acc: f64, mean_u: f64) -> f64 {
    (acc - (-mean_u).exp()).abs()
}

/// Pixel accuracy of `pred` against `gt`.
pub fn pixel_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("pixel_accuracy", format!("{} vs {} pixels", pred.len(), gt.len())));
    }
    Ok(pred.iter().zip(gt).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

/// `u*`: mean uncertainty of the validation image with the largest UCE.
/// Ties go to the larger mean uncertainty.
pub fn fit_threshold(validation: &[(f64, f64)]) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &(acc, mean_u) in validation {
        let gap = uce(acc, mean_u);
        best = match best {
            Some((g, m)) if g > gap || (g == gap && m >= mean_u) => Some((g, m)),
            _ => Some((gap, mean_u)),
        };
    }
    best.map(|(_, m)| m).ok_or_else(|| Error::InvalidInput("fit_threshold needs a nonempty validation set".into()))
}

/// Reliable (1) iff `test_mean_u < u_star`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Unreliable,
    Reliable,
}

impl Verdict {
    pub fn as_u8(self) -> u8 {
        match self {
            Verdict::Unreliable => 0,
            Verdict::Reliable => 1,
        }
    }
}

impl Serialize for Verdict {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Verdict {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(Verdict::Unreliable),
            1 => Ok(Verdict::Reliable),
            v => Err(serde::de::Error::custom(format!("verdict must be 0 or 1, got {v}"))),
        }
    }
}

pub fn filter(test_mean_u: f64, u_star: f64) -> Verdict {
    if test_mean_u < u_star {
        Verdict::Reliable
    } else {
        Verdict::Unreliable
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub image_id: String,
    pub mean_uncertainty: f64,
    /// Only known for validation images.
    pub uce: Option<f64>,
    pub threshold: f64,
    pub verdict: Verdict,
    pub uncertainty_source: UncertaintySource,
}

/// Test-time decision: `u` averaged over the predicted foreground
/// (any class other than 0), falling back to the whole image.
pub fn decide(image_id: impl Into<String>, u: &[f64], pred: &[usize], u_star: f64) -> Result<FilterDecision> {
    let region: Vec<bool> = pred.iter().map(|&k| k != 0).collect();
    let m = mean_uncertainty(u, &region)?;
    Ok(FilterDecision {
        image_id: image_id.into(),
        mean_uncertainty: m.value,
        uce: None,
        threshold: u_star,
        verdict: filter(m.value, u_star),
        uncertainty_source: if m.fell_back { UncertaintySource::WholeImage } else { UncertaintySource::PredictedRegion },
    })
}

/// Validation-side summary of one image: accuracy plus `u` averaged over the
/// ground-truth foreground.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationEntry {
    pub image_id: String,
    pub accuracy: f64,
    pub mean_uncertainty: f64,
    pub source: UncertaintySource,
}

pub fn validation_entry(image_id: impl Into<String>, u: &[f64], pred: &[usize], gt: &[usize]) -> Result<ValidationEntry> {
    let region: Vec<bool> = gt.iter().map(|&k| k != 0).collect();
    let m = mean_uncertainty(u, &region)?;
    Ok(ValidationEntry {
        image_id: image_id.into(),
        accuracy: pixel_accuracy(pred, gt)?,
        mean_uncertainty: m.value,
        source: if m.fell_back { UncertaintySource::WholeImage } else { UncertaintySource::GtRegion },
    })
}

/// Threshold from validation entries plus their decision records.
pub fn fit_from_validation(entries: &[ValidationEntry]) -> Result<(f64, Vec<FilterDecision>)> {
    let pairs: Vec<(f64, f64)> = entries.iter().map(|e| (e.accuracy, e.mean_uncertainty)).collect();
    let u_star = fit_threshold(&pairs)?;
    let decisions = entries
        .iter()
        .map(|e| FilterDecision {
            image_id: e.image_id.clone(),
            mean_uncertainty: e.mean_uncertainty,
            uce: Some(uce(e.accuracy, e.mean_uncertainty)),
            threshold: u_star,
            verdict: filter(e.mean_uncertainty, u_star),
            uncertainty_source: e.source,
        })
        .collect();
    Ok((u_star, decisions))
}

pub fn write_manifest(path: &Path, decisions: &[FilterDecision]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in decisions {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<FilterDecision>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d = serde_json::from_str(&line)
            .map_err(|e| Error::Format { path: path.to_path_buf(), detail: format!("line {}: {e}", i + 1) })?;
        out.push(d);
    }
    Ok(out)
}
