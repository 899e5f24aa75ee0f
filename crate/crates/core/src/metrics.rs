//! Segmentation and calibration metrics on flattened 2D masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ECE_BINS: usize = 10;

/// `0.05, 0.10, ..., 0.95`
pub fn default_ueo_thresholds() -> Vec<f64> {
    (1..20).map(|i| i as f64 * 0.05).collect()
}

/// `2|R ∩ G| / (|R| + |G|)`, 1 when both masks are empty.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("dice", format!("{} vs {} pixels", pred.len(), gt.len())));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Foreground pixels with at least one background 4-neighbour; outside the
/// image counts as background. Returned in raster order as `(row, col)`.
pub fn boundary(mask: &[bool], height: usize, width: usize) -> Vec<(usize, usize)> {
    let at = |r: isize, c: isize| -> bool {
        r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width && mask[r as usize * width + c as usize]
    };
    let mut out = Vec::new();
    for r in 0..height {
        for c in 0..width {
            if !mask[r * width + c] {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            if !at(ri - 1, ci) || !at(ri + 1, ci) || !at(ri, ci - 1) || !at(ri, ci + 1) {
                out.push((r, c));
            }
        }
    }
    out
}

/// Row-bucketed point set for exact nearest-neighbour queries on a grid.
struct GridIndex {
    rows: Vec<Vec<usize>>,
}

impl GridIndex {
    fn new(points: &[(usize, usize)], height: usize) -> Self {
        let mut rows = vec![Vec::new(); height];
        for &(r, c) in points {
            rows[r].push(c);
        }
        // raster order already sorts columns within a row
        GridIndex { rows }
    }

    /// Smallest squared Euclidean distance from `(r, c)` to the set.
    fn nearest_sq(&self, r: usize, c: usize) -> usize {
        let mut best = usize::MAX;
        for dr in 0..self.rows.len() {
            let dr2 = dr * dr;
            if dr2 >= best {
                break;
            }
            let candidates = [r.checked_sub(dr), if dr == 0 { None } else { Some(r + dr) }];
            for row in candidates.into_iter().flatten() {
                let Some(cols) = self.rows.get(row) else { continue };
                if cols.is_empty() {
                    continue;
                }
                let i = cols.partition_point(|&x| x < c);
                for j in [i.checked_sub(1), Some(i)].into_iter().flatten() {
                    if let Some(&x) = cols.get(j) {
                        let dc = x.abs_diff(c);
                        best = best.min(dr2 + dc * dc);
                    }
                }
            }
        }
        best
    }
}

/// Average symmetric surface distance in pixels. Both masks must be nonempty.
pub fn assd(pred: &[bool], gt: &[bool], height: usize, width: usize) -> Result<f64> {
    if pred.len() != height * width || gt.len() != height * width {
        return Err(Error::shape("assd", format!("masks of {} and {} pixels for {height}x{width}", pred.len(), gt.len())));
    }
    let sp = boundary(pred, height, width);
    let sg = boundary(gt, height, width);
    if sp.is_empty() || sg.is_empty() {
        return Err(Error::InvalidInput("assd needs two nonempty masks".into()));
    }
    let (ip, ig) = (GridIndex::new(&sp, height), GridIndex::new(&sg, height));
    let mut total = 0.0;
    for &(r, c) in &sp {
        total += (ig.nearest_sq(r, c) as f64).sqrt();
    }
    for &(r, c) in &sg {
        total += (ip.nearest_sq(r, c) as f64).sqrt();
    }
    Ok(total / (sp.len() + sg.len()) as f64)
}

/// Right-closed bin of `conf` among `bins` equal-width bins on [0, 1];
/// 0 goes to the first bin.
pub fn ece_bin(conf: f64, bins: usize) -> usize {
    let edge = |k: usize| k as f64 / bins as f64;
    let mut idx = ((conf * bins as f64).ceil() as usize).clamp(1, bins) - 1;
    while idx > 0 && conf <= edge(idx) {
        idx -= 1;
    }
    while idx + 1 < bins && conf > edge(idx + 1) {
        idx += 1;
    }
    idx
}

/// Expected calibration error `sum_m |B_m|/N * |acc(B_m) - conf(B_m)|`.
pub fn ece(confidence: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if confidence.len() != correct.len() {
        return Err(Error::shape("ece", format!("{} confidences, {} outcomes", confidence.len(), correct.len())));
    }
    if bins == 0 {
        return Err(Error::InvalidInput("ece needs at least one bin".into()));
    }
    if confidence.is_empty() {
        return Ok(0.0);
    }
    let mut count = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    for (&c, &ok) in confidence.iter().zip(correct) {
        let m = ece_bin(c, bins);
        count[m] += 1;
        hits[m] += ok as usize;
        conf_sum[m] += c;
    }
    let n = confidence.len() as f64;
    let mut total = 0.0;
    for m in 0..bins {
        if count[m] == 0 {
            continue;
        }
        let size = count[m] as f64;
        total += size / n * (hits[m] as f64 / size - conf_sum[m] / size).abs();
    }
    Ok(total)
}

/// Uncertainty-error overlap: Dice between `u >= tau` and the error mask,
/// maximised over `thresholds`. Returns `(overlap, tau)`; the first
/// threshold wins ties.
pub fn ueo(error: &[bool], uncertainty: &[f64], thresholds: &[f64]) -> Result<(f64, f64)> {
    if error.len() != uncertainty.len() {
        return Err(Error::shape("ueo", format!("{} error pixels, {} uncertainties", error.len(), uncertainty.len())));
    }
    if thresholds.is_empty() {
        return Err(Error::InvalidInput("ueo needs at least one threshold".into()));
    }
    let mut best = (f64::NEG_INFINITY, thresholds[0]);
    let mut mask = vec![false; error.len()];
    for &tau in thresholds {
        mask.iter_mut().zip(uncertainty).for_each(|(m, &u)| *m = u >= tau);
        let overlap = dice(&mask, error)?;
        if overlap > best.0 {
            best = (overlap, tau);
        }
    }
    Ok(best)
}

/// Metrics for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub id: String,
    pub dice: f64,
    /// Missing when a foreground mask is empty.
    pub assd: Option<f64>,
    pub ece: f64,
    pub ueo: f64,
    pub ueo_threshold: f64,
    pub accuracy: f64,
    pub mean_uncertainty: f64,
}

/// Everything needed to score one image.
pub struct ImageInputs<'a> {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub pred: &'a [usize],
    pub gt: &'a [usize],
    pub confidence: &'a [f64],
    pub uncertainty: &'a [f64],
}

/// Scores an image. Dice and ASSD are averaged over foreground classes
/// `1..C`; classes whose masks are empty on either side are skipped for
/// ASSD.
pub fn evaluate_image(inputs: &ImageInputs<'_>, bins: usize, thresholds: &[f64]) -> Result<ImageEval> {
    let n = inputs.height * inputs.width;
    if inputs.pred.len() != n || inputs.gt.len() != n || inputs.confidence.len() != n || inputs.uncertainty.len() != n {
        return Err(Error::shape("evaluate_image", format!("inputs do not match {}x{}", inputs.height, inputs.width)));
    }
    let mut dices = Vec::new();
    let mut assds = Vec::new();
    for k in 1..inputs.num_classes {
        let p: Vec<bool> = inputs.pred.iter().map(|&v| v == k).collect();
        let g: Vec<bool> = inputs.gt.iter().map(|&v| v == k).collect();
        dices.push(dice(&p, &g)?);
        if p.contains(&true) && g.contains(&true) {
            assds.push(assd(&p, &g, inputs.height, inputs.width)?);
        }
    }
    let correct: Vec<bool> = inputs.pred.iter().zip(inputs.gt).map(|(a, b)| a == b).collect();
    let errors: Vec<bool> = correct.iter().map(|c| !c).collect();
    let (ueo_v, tau) = ueo(&errors, inputs.uncertainty, thresholds)?;
    Ok(ImageEval {
        id: inputs.id.clone(),
        dice: mean(&dices).unwrap_or(1.0),
        assd: mean(&assds),
        ece: ece(inputs.confidence, &correct, bins)?,
        ueo: ueo_v,
        ueo_threshold: tau,
        accuracy: correct.iter().filter(|&&c| c).count() as f64 / n as f64,
        mean_uncertainty: inputs.uncertainty.iter().sum::<f64>() / n as f64,
    })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Per-image metrics plus aggregates. `assd_mean` excludes missing values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub images: Vec<ImageEval>,
    pub dice_mean: f64,
    pub assd_mean: Option<f64>,
    pub ece_mean: f64,
    /// ECE over all pixels of all images pooled together.
    pub ece_pooled: f64,
    pub ueo_mean: f64,
    pub ueo_threshold_mean: f64,
    pub mean_uncertainty: f64,
}

impl EvalReport {
    pub fn new(images: Vec<ImageEval>, ece_pooled: f64) -> Self {
        let col = |f: fn(&ImageEval) -> f64| mean(&images.iter().map(f).collect::<Vec<_>>()).unwrap_or(f64::NAN);
        let assds: Vec<f64> = images.iter().filter_map(|i| i.assd).collect();
        EvalReport {
            schema_version: 1,
            dice_mean: col(|i| i.dice),
            assd_mean: mean(&assds),
            ece_mean: col(|i| i.ece),
            ece_pooled,
            ueo_mean: col(|i| i.ueo),
            ueo_threshold_mean: col(|i| i.ueo_threshold),
            mean_uncertainty: col(|i| i.mean_uncertainty),
            images,
        }
    }
}
