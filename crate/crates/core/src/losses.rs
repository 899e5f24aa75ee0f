//! Training objective for the evidential head.
//!
//! All terms are differentiable tensors averaged per pixel (batch x spatial):
//!
//! * integrated cross-entropy `sum_c y_c (psi(S) - psi(alpha_c))`
//! * KL from `Dir(alpha~)` to the uniform Dirichlet, `alpha~ = y + (1 - y) * alpha`
//! * soft Dice on belief masses, averaged over foreground classes
//! * calibrated uncertainty penalty (CUP), annealed by `beta_t`
//!
//! [`total_loss`] combines them; by default Dice is weighted by `1 - beta_t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidential::{argmax_classes, predict, Opinion};
use crate::tensor::{special, Tensor};

/// Clamp applied to `u` before the logarithms in the uncertainty penalty.
pub const CUP_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_kl: f64,
    pub beta0: f64,
    pub total_epochs: usize,
    pub dice_smooth: f64,
    /// Weight Dice by `1 - beta_t`; when false Dice enters with weight 1.
    pub anneal_dice: bool,
    /// Certainty cut-off for the hard-count CUP metric only.
    pub certainty_threshold: f64,
    /// Include the uncertainty penalty in the optimised total.
    pub cup_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_kl: 0.02,
            beta0: 0.01,
            total_epochs: 100,
            dice_smooth: 1e-5,
            anneal_dice: true,
            certainty_threshold: 0.5,
            cup_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(self.lambda_kl >= 0.0) {
            return bad(format!("lambda_kl must be >= 0, got {}", self.lambda_kl));
        }
        if !(self.beta0 > 0.0 && self.beta0 <= 1.0) {
            return bad(format!("beta0 must lie in (0, 1], got {}", self.beta0));
        }
        if self.total_epochs < 1 {
            return bad("total_epochs must be >= 1".into());
        }
        if !(self.dice_smooth > 0.0) {
            return bad(format!("dice_smooth must be > 0, got {}", self.dice_smooth));
        }
        if !(self.certainty_threshold > 0.0 && self.certainty_threshold < 1.0) {
            return bad(format!("certainty_threshold must lie in (0, 1), got {}", self.certainty_threshold));
        }
        Ok(())
    }
}

/// Scalar values of one evaluation of the objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ice: f64,
    pub kl: f64,
    pub dice: f64,
    pub cup: f64,
    pub total: f64,
    pub beta_t: f64,
    /// Log-weighted proxies for the accurate/inaccurate x certain/uncertain counts.
    pub n_ac: f64,
    pub n_au: f64,
    pub n_ic: f64,
    pub n_iu: f64,
}

/// Differentiable total plus its scalar breakdown.
pub struct LossTerms {
    pub total: Tensor,
    pub report: LossReport,
}

/// One-hot `[batch, classes, spatial...]` tensor from flattened labels.
pub fn one_hot(labels: &[usize], batch: usize, num_classes: usize, spatial: &[usize]) -> Result<Tensor> {
    let px: usize = spatial.iter().product();
    if labels.len() != batch * px {
        return Err(Error::shape("one_hot", format!("{} labels for batch {batch} x {px} pixels", labels.len())));
    }
    let mut data = vec![0.0; batch * num_classes * px];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::InvalidInput(format!("label {l} out of range for {num_classes} classes")));
        }
        let (b, j) = (i / px, i % px);
        data[(b * num_classes + l) * px + j] = 1.0;
    }
    let mut shape = vec![batch, num_classes];
    shape.extend_from_slice(spatial);
    Tensor::new(&shape, data)
}

fn check_pair(op: &'static str, a: &Tensor, y: &Tensor) -> Result<usize> {
    if a.shape() != y.shape() || a.rank() < 2 {
        return Err(Error::shape(op, format!("{:?} vs target {:?}", a.shape(), y.shape())));
    }
    Ok(a.shape()[0] * a.shape()[2..].iter().product::<usize>())
}

/// Integrated cross-entropy under `Dir(alpha)`.
pub fn ice_loss(alpha: &Tensor, y: &Tensor) -> Result<Tensor> {
    let npix = check_pair("ice_loss", alpha, y)?;
    let strength = alpha.sum_axis(1)?;
    let gap = strength.digamma()?.sub(&alpha.digamma()?)?;
    Ok(gap.mul(y)?.sum().mul_scalar(1.0 / npix as f64))
}

/// `KL(Dir(alpha) || Dir(1))` averaged per pixel, with no label adjustment.
pub fn kl_dirichlet_uniform(alpha: &Tensor) -> Result<Tensor> {
    if alpha.rank() < 2 {
        return Err(Error::shape("kl_dirichlet_uniform", format!("{:?}", alpha.shape())));
    }
    let c = alpha.shape()[1];
    let npix = alpha.numel() / c;
    let strength = alpha.sum_axis(1)?;
    let log_norm = strength
        .lgamma()?
        .add_scalar(-special::lgamma(c as f64))
        .sub(&alpha.lgamma()?.sum_axis(1)?)?;
    let spread = alpha.add_scalar(-1.0).mul(&alpha.digamma()?.sub(&strength.digamma()?)?)?.sum_axis(1)?;
    Ok(log_norm.add(&spread)?.sum().mul_scalar(1.0 / npix as f64))
}

/// `alpha~ = y + (1 - y) * alpha`: evidence for the true class is removed.
pub fn adjusted_alpha(alpha: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_pair("adjusted_alpha", alpha, y)?;
    alpha.mul(&y.rsub_scalar(1.0))?.add(y)
}

/// KL regulariser on the label-adjusted Dirichlet.
pub fn kl_to_uniform(alpha: &Tensor, y: &Tensor) -> Result<Tensor> {
    kl_dirichlet_uniform(&adjusted_alpha(alpha, y)?)
}

/// Per-class soft Dice `1 - (2 sum yb + s) / (sum y + sum b + s)` over batch
/// and space, averaged over foreground classes `1..C`.
pub fn soft_dice_loss(belief: &Tensor, y: &Tensor, smooth: f64) -> Result<Tensor> {
    check_pair("soft_dice_loss", belief, y)?;
    let (batch, c) = (belief.shape()[0], belief.shape()[1]);
    if c < 2 {
        return Err(Error::InvalidInput("soft Dice needs a foreground class".into()));
    }
    let px = belief.numel() / (batch * c);
    let per_class = |t: &Tensor| -> Result<Tensor> { t.reshape(&[batch, c, px])?.sum_axis(2)?.sum_axis(0) };
    let inter = per_class(&belief.mul(y)?)?;
    let denom = per_class(y)?.add(&per_class(belief)?)?.add_scalar(smooth);
    let ratio = inter.mul_scalar(2.0).add_scalar(smooth).div(&denom)?;
    let mut fg = vec![1.0; c];
    fg[0] = 0.0;
    let fg = Tensor::new(&[1, c, 1], fg)?;
    Ok(ratio.rsub_scalar(1.0).mul(&fg)?.sum().mul_scalar(1.0 / (c - 1) as f64))
}

/// Pixelwise `pred == label` as a `[batch, 1, spatial...]` 0/1 tensor.
fn accuracy_mask(y: &Tensor, pred: &[usize]) -> Result<Tensor> {
    let labels = argmax_classes(y);
    if labels.len() != pred.len() {
        return Err(Error::shape("cup", format!("{} predictions for {} pixels", pred.len(), labels.len())));
    }
    let mut shape = y.shape().to_vec();
    shape[1] = 1;
    Tensor::new(&shape, labels.iter().zip(pred).map(|(l, p)| if l == p { 1.0 } else { 0.0 }).collect())
}

/// Calibrated uncertainty penalty:
/// `-beta_t sum_acc sum_c b_c ln(1-u) - (1-beta_t) sum_inacc sum_c (1-b_c) ln u`, per pixel.
pub fn cup_loss(belief: &Tensor, uncertainty: &Tensor, y: &Tensor, pred: &[usize], beta_t: f64) -> Result<Tensor> {
    let npix = check_pair("cup_loss", belief, y)?;
    let c = belief.shape()[1] as f64;
    let acc = accuracy_mask(y, pred)?;
    if uncertainty.shape() != acc.shape() {
        return Err(Error::shape("cup_loss", format!("uncertainty {:?}, expected {:?}", uncertainty.shape(), acc.shape())));
    }
    let u = uncertainty.clamp(CUP_EPS, 1.0 - CUP_EPS);
    let bsum = belief.sum_axis(1)?;
    let accurate = acc.mul(&bsum)?.mul(&u.rsub_scalar(1.0).log())?.sum();
    let inaccurate = acc.rsub_scalar(1.0).mul(&bsum.rsub_scalar(c))?.mul(&u.log())?.sum();
    Ok(accurate
        .mul_scalar(-beta_t)
        .add(&inaccurate.mul_scalar(-(1.0 - beta_t)))?
        .mul_scalar(1.0 / npix as f64))
}

/// Log-weighted proxies `(N_AC, N_AU, N_IC, N_IU)`, per pixel.
pub fn cup_proxies(belief: &Tensor, uncertainty: &Tensor, y: &Tensor, pred: &[usize]) -> Result<[f64; 4]> {
    let npix = check_pair("cup_proxies", belief, y)?;
    let labels = argmax_classes(y);
    if pred.len() != labels.len() || uncertainty.numel() != labels.len() {
        return Err(Error::shape("cup_proxies", "prediction/uncertainty size mismatch"));
    }
    let c = belief.shape()[1];
    let px = npix / belief.shape()[0];
    let mut n = [0.0; 4];
    for (i, (&l, &p)) in labels.iter().zip(pred).enumerate() {
        let (b, j) = (i / px, i % px);
        let bsum: f64 = (0..c).map(|k| belief.data()[(b * c + k) * px + j]).sum();
        let u = uncertainty.data()[i].clamp(CUP_EPS, 1.0 - CUP_EPS);
        if l == p {
            n[0] += bsum * u.ln();
            n[1] += bsum * (1.0 - u).ln();
        } else {
            n[2] += (c as f64 - bsum) * u.ln();
            n[3] += (c as f64 - bsum) * (1.0 - u).ln();
        }
    }
    Ok(n.map(|v| v / npix as f64))
}

/// Hard-count calibration ratio `(N_AC + N_IU) / N` with "certain" meaning
/// `u < threshold`.
pub fn cup_metric(uncertainty: &[f64], labels: &[usize], pred: &[usize], threshold: f64) -> Result<f64> {
    if uncertainty.is_empty() {
        return Err(Error::InvalidInput("cup_metric on empty input".into()));
    }
    if labels.len() != uncertainty.len() || pred.len() != uncertainty.len() {
        return Err(Error::shape("cup_metric", "uncertainty, labels and predictions differ in length"));
    }
    let good = uncertainty
        .iter()
        .zip(labels.iter().zip(pred))
        .filter(|(&u, (l, p))| (l == p) == (u < threshold))
        .count();
    Ok(good as f64 / uncertainty.len() as f64)
}

/// Annealing factor `beta0 * exp(-ln(beta0) t / T)`, evaluated as
/// `beta0^(1 - t/T)` so both endpoints are exact. `t` is clamped to `[0, T]`.
pub fn anneal(t: usize, total: usize, beta0: f64) -> f64 {
    let total = total.max(1);
    let t = t.min(total);
    beta0.powf(1.0 - t as f64 / total as f64)
}

/// Full objective at epoch `t`.
pub fn total_loss(opinion: &Opinion, y: &Tensor, t: usize, cfg: &LossConfig) -> Result<LossTerms> {
    let beta_t = anneal(t, cfg.total_epochs, cfg.beta0);
    let pred = predict(opinion);
    let ice = ice_loss(&opinion.alpha, y)?;
    let kl = kl_to_uniform(&opinion.alpha, y)?;
    let dice = soft_dice_loss(&opinion.belief, y, cfg.dice_smooth)?;
    let cup = cup_loss(&opinion.belief, &opinion.uncertainty, y, &pred, beta_t)?;
    let dice_weight = if cfg.anneal_dice { 1.0 - beta_t } else { 1.0 };
    let mut total = ice.add(&kl.mul_scalar(cfg.lambda_kl))?.add(&dice.mul_scalar(dice_weight))?;
    if cfg.cup_enabled {
        total = total.add(&cup)?;
    }
    let [n_ac, n_au, n_ic, n_iu] = cup_proxies(&opinion.belief, &opinion.uncertainty, y, &pred)?;
    let report = LossReport {
        ice: ice.item(),
        kl: kl.item(),
        dice: dice.item(),
        cup: cup.item(),
        total: total.item(),
        beta_t,
        n_ac,
        n_au,
        n_ic,
        n_iu,
    };
    Ok(LossTerms { total, report })
}

/// Softmax cross-entropy on raw logits, the objective of the non-evidential baseline.
pub fn softmax_cross_entropy(logits: &Tensor, y: &Tensor) -> Result<Tensor> {
    let npix = check_pair("softmax_cross_entropy", logits, y)?;
    Ok(logits.log_softmax(1)?.mul(y)?.sum().mul_scalar(-1.0 / npix as f64))
}

/// Closed-form single-pixel gradient of `ice + lambda * KL(Dir(alpha) || Dir(1))`:
/// `psi'(a_c)[-y_c + lambda(a_c - 1)] + psi'(a_0)[-lambda(a_0 - C) + sum_j y_j]`.
/// The ICE term reaches every coordinate through `S`, hence the label sum
/// (1 for a one-hot target) in the second bracket.
pub fn grad_oracle_le(alpha: &[f64], y: &[f64], lambda: f64) -> Vec<f64> {
    let c = alpha.len() as f64;
    let a0: f64 = alpha.iter().sum();
    let ysum: f64 = y.iter().sum();
    let t0 = special::trigamma(a0);
    alpha
        .iter()
        .zip(y)
        .map(|(&a, &yc)| special::trigamma(a) * (-yc + lambda * (a - 1.0)) + t0 * (-lambda * (a0 - c) + ysum))
        .collect()
}

/// Same gradient when the KL term sees `alpha~ = y + (1 - y) alpha`, i.e. the
/// regulariser actually used by [`total_loss`]. The KL part is evaluated at
/// `alpha~` and gated by `1 - y_c`.
pub fn grad_oracle_le_adjusted(alpha: &[f64], y: &[f64], lambda: f64) -> Vec<f64> {
    let c = alpha.len() as f64;
    let a0: f64 = alpha.iter().sum();
    let adj: Vec<f64> = alpha.iter().zip(y).map(|(&a, &yc)| yc + (1.0 - yc) * a).collect();
    let adj0: f64 = adj.iter().sum();
    let ysum: f64 = y.iter().sum();
    alpha
        .iter()
        .zip(y)
        .zip(&adj)
        .map(|((&a, &yc), &at)| {
            let ice = ysum * special::trigamma(a0) - yc * special::trigamma(a);
            let kl = (at - 1.0) * special::trigamma(at) - (adj0 - c) * special::trigamma(adj0);
            ice + lambda * (1.0 - yc) * kl
        })
        .collect()
}
