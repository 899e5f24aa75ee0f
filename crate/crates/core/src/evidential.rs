//! Subjective-logic opinions over per-pixel Dirichlet distributions.
//!
//! Evidence `e >= 0` gives `alpha = e + 1`, strength `S = sum_c alpha_c`,
//! belief `b_c = (alpha_c - 1) / S` and uncertainty `u = C / S`, so that
//! `u + sum_c b_c = 1` at every pixel. The projected probability uses a
//! uniform base rate: `p_c = b_c + u / C = alpha_c / S`.
//!
//! Tensors are laid out `[batch, class, spatial...]`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tns, special, write_tns, Tensor};

/// Softplus head: maps raw backbone logits to strictly positive evidence.
pub fn evidence_from_logits(logits: &Tensor) -> Tensor {
    logits.softplus()
}

/// Per-pixel opinion derived from evidence. Every field stays attached to
/// the evidence graph so losses can differentiate through it.
#[derive(Clone, Debug)]
pub struct Opinion {
    pub evidence: Tensor,
    pub alpha: Tensor,
    /// `[batch, 1, spatial...]`
    pub strength: Tensor,
    pub belief: Tensor,
    /// `[batch, 1, spatial...]`
    pub uncertainty: Tensor,
    pub prob: Tensor,
    pub num_classes: usize,
}

pub fn opinion_from_evidence(evidence: &Tensor, num_classes: usize) -> Result<Opinion> {
    if evidence.rank() < 2 || evidence.shape()[1] != num_classes {
        return Err(Error::shape(
            "opinion_from_evidence",
            format!("expected class axis of size {num_classes} at dim 1, got {:?}", evidence.shape()),
        ));
    }
    if num_classes < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 classes, got {num_classes}")));
    }
    if let Some(i) = evidence.data().iter().position(|&v| !(v >= 0.0)) {
        return Err(Error::domain("opinion_from_evidence", format!("evidence[{i}] = {} is negative", evidence.data()[i])));
    }
    let alpha = evidence.add_scalar(1.0);
    let strength = alpha.sum_axis(1)?;
    let belief = evidence.div(&strength)?;
    let uncertainty = strength.scalar_div(num_classes as f64);
    let prob = alpha.div(&strength)?;
    Ok(Opinion { evidence: evidence.clone(), alpha, strength, belief, uncertainty, prob, num_classes })
}

impl Opinion {
    pub fn batch(&self) -> usize {
        self.evidence.shape()[0]
    }

    /// Pixels per image (product of the spatial dims).
    pub fn pixels(&self) -> usize {
        self.evidence.shape()[2..].iter().product()
    }

    /// Spatial dims without batch and class axes.
    pub fn spatial_shape(&self) -> &[usize] {
        &self.evidence.shape()[2..]
    }

    /// Flattened `[batch * pixels]` uncertainty values.
    pub fn uncertainty_values(&self) -> &[f64] {
        self.uncertainty.data()
    }

    /// Projected probability of the predicted class, per pixel.
    pub fn confidence(&self) -> Vec<f64> {
        let labels = predict(self);
        let (c, px) = (self.num_classes, self.pixels());
        labels
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let (b, j) = (i / px, i % px);
                self.prob.data()[(b * c + k) * px + j]
            })
            .collect()
    }

    /// Pixels carrying no evidence at all (`u == 1`).
    pub fn max_uncertainty_mask(&self) -> Vec<bool> {
        self.uncertainty.data().iter().map(|&u| u >= 1.0).collect()
    }

    /// Copy cut from the autodiff graph.
    pub fn detach(&self) -> Opinion {
        opinion_from_evidence(&self.evidence.detach(), self.num_classes).expect("valid opinion stays valid")
    }
}

/// Per-pixel argmax over the class axis of a `[batch, class, spatial...]`
/// tensor; ties go to the lowest class index. Output is `[batch * pixels]`.
pub fn argmax_classes(t: &Tensor) -> Vec<usize> {
    let shape = t.shape();
    let (batch, c) = (shape[0], shape[1]);
    let px: usize = shape[2..].iter().product();
    let d = t.data();
    let mut out = Vec::with_capacity(batch * px);
    for b in 0..batch {
        for j in 0..px {
            let mut best = 0;
            for k in 1..c {
                if d[(b * c + k) * px + j] > d[(b * c + best) * px + j] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Per-pixel decision `argmax_c b_c`, lowest index on ties.
pub fn predict(opinion: &Opinion) -> Vec<usize> {
    argmax_classes(&opinion.belief)
}

/// A point that is meant to lie on the probability simplex. Points off the
/// simplex are representable so densities can report zero mass for them.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexPoint(pub Vec<f64>);

impl SimplexPoint {
    pub const TOLERANCE: f64 = 1e-12;

    pub fn on_simplex(&self) -> bool {
        self.0.iter().all(|&p| (0.0..=1.0).contains(&p)) && (self.0.iter().sum::<f64>() - 1.0).abs() <= Self::TOLERANCE
    }
}

/// `ln B(alpha) = sum ln Gamma(alpha_c) - ln Gamma(sum alpha_c)`.
pub fn ln_multivariate_beta(alpha: &[f64]) -> f64 {
    alpha.iter().map(|&a| special::lgamma(a)).sum::<f64>() - special::lgamma(alpha.iter().sum())
}

/// Dirichlet log-density; `-inf` for points off the simplex. On the boundary
/// a zero coordinate contributes `0^(alpha_c - 1)` (1 when `alpha_c == 1`).
pub fn dirichlet_log_density(point: &SimplexPoint, alpha: &[f64]) -> Result<f64> {
    if point.0.len() != alpha.len() {
        return Err(Error::shape("dirichlet_log_density", format!("point has {} dims, alpha {}", point.0.len(), alpha.len())));
    }
    if let Some(a) = alpha.iter().find(|&&a| !(a > 0.0)) {
        return Err(Error::domain("dirichlet_log_density", format!("alpha entry {a} is not positive")));
    }
    if !point.on_simplex() {
        return Ok(f64::NEG_INFINITY);
    }
    let mut acc = -ln_multivariate_beta(alpha);
    for (&p, &a) in point.0.iter().zip(alpha) {
        if a == 1.0 {
            continue;
        }
        acc += (a - 1.0) * p.ln();
    }
    Ok(acc)
}

#[derive(Serialize, Deserialize)]
struct OpinionSidecar {
    schema_version: u32,
    num_classes: usize,
    shape: Vec<usize>,
}

/// Writes `evidence`, `alpha`, `belief` and `uncertainty` as TNS1 files plus `opinion.json`.
pub fn save_opinion(dir: impl AsRef<Path>, opinion: &Opinion) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_tns(dir.join("evidence.tns"), &opinion.evidence)?;
    write_tns(dir.join("alpha.tns"), &opinion.alpha)?;
    write_tns(dir.join("belief.tns"), &opinion.belief)?;
    write_tns(dir.join("uncertainty.tns"), &opinion.uncertainty)?;
    let sidecar = OpinionSidecar {
        schema_version: 1,
        num_classes: opinion.num_classes,
        shape: opinion.evidence.shape().to_vec(),
    };
    let path = dir.join("opinion.json");
    fs::write(&path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(path, e))
}

/// Rebuilds an opinion from a bundle written by [`save_opinion`].
pub fn load_opinion(dir: impl AsRef<Path>) -> Result<Opinion> {
    let dir = dir.as_ref();
    let path = dir.join("opinion.json");
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar: OpinionSidecar = serde_json::from_slice(&raw)?;
    let evidence = read_tns(dir.join("evidence.tns"))?;
    if evidence.shape() != sidecar.shape.as_slice() {
        return Err(Error::Format { path, detail: format!("sidecar shape {:?} vs evidence {:?}", sidecar.shape, evidence.shape()) });
    }
    opinion_from_evidence(&evidence, sidecar.num_classes)
}
