use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward, Adam, Head, ModelState};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::evidential::{argmax_classes, evidence_from_logits, opinion_from_evidence, predict};
use crate::losses::{one_hot, softmax_cross_entropy, total_loss, LossConfig, LossReport};
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    Evidential(LossConfig),
    SoftmaxCe,
}

impl Objective {
    pub fn head(&self) -> Head {
        match self {
            Objective::Evidential(_) => Head::Evidential,
            Objective::SoftmaxCe => Head::Softmax,
        }
    }
}

/// One optimiser step on `x` `[B, in, H, W]` with flattened `labels`.
/// `epoch` drives the loss annealing. Non-finite logits or loss leave the state
/// untouched and returns [`Error::NonFinite`].
pub fn train_step(
    x: &Tensor,
    labels: &[usize],
    state: &mut ModelState,
    optimizer: &mut Adam,
    objective: &Objective,
    epoch: usize,
) -> Result<(LossReport, f64)> {
    state.zero_grad();
    let logits = forward(x, state)?;
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logits at step {} (epoch {epoch})", state.step)));
    }
    let s = logits.shape();
    let y = one_hot(labels, s[0], s[1], &s[2..])?;
    let (total, report) = match objective {
        Objective::Evidential(cfg) => {
            let opinion = opinion_from_evidence(&evidence_from_logits(&logits), s[1])?;
            let terms = total_loss(&opinion, &y, epoch, cfg)?;
            (terms.total, terms.report)
        }
        Objective::SoftmaxCe => {
            let ce = softmax_cross_entropy(&logits, &y)?;
            let report = LossReport { total: ce.item(), ..Default::default() };
            (ce, report)
        }
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {} (epoch {epoch}): {report:?}", state.step)));
    }
    total.backward()?;
    let lr = optimizer.step(state)?;
    Ok((report, lr))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seeds the per-epoch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 20, batch_size: 8, lr: 1e-3, seed: 0 }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

/// Sequential training loop over a fixed dataset.
pub struct Trainer {
    pub state: ModelState,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub config: TrainConfig,
    pub objective: Objective,
    /// Next epoch to run.
    pub epoch: usize,
}

impl Trainer {
    /// The poly schedule spans `epochs * ceil(n_train / batch_size)` steps and
    /// the loss annealing horizon is set to `epochs`.
    pub fn new(state: ModelState, config: TrainConfig, mut objective: Objective, n_train: usize) -> Result<Self> {
        if config.epochs == 0 || config.batch_size == 0 || n_train == 0 {
            return Err(Error::InvalidInput("epochs, batch_size and dataset size must be positive".into()));
        }
        if !(config.lr >= 0.0 && config.lr.is_finite()) {
            return Err(Error::InvalidInput(format!("learning rate must be finite and >= 0, got {}", config.lr)));
        }
        if let Objective::Evidential(cfg) = &mut objective {
            cfg.total_epochs = config.epochs;
            cfg.validate()?;
        }
        if state.head != objective.head() {
            return Err(Error::InvalidInput(format!("{:?} head trained with {:?} objective", state.head, objective)));
        }
        let max_iter = (config.epochs * n_train.div_ceil(config.batch_size)) as u64;
        Ok(Trainer {
            state,
            optimizer: Adam::new(config.lr, max_iter),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            objective,
            epoch: 0,
        })
    }

    /// Runs one shuffled pass; returns the batch-averaged report.
    pub fn run_epoch(&mut self, data: &Dataset, on_step: &mut dyn FnMut(&StepLog) -> Result<()>) -> Result<LossReport> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = LossReport::default();
        let mut batches = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let (x, labels) = data.batch(chunk)?;
            let (report, lr) =
                train_step(&x, &labels, &mut self.state, &mut self.optimizer, &self.objective, self.epoch)?;
            on_step(&StepLog { epoch: self.epoch, step: self.state.step, lr, report: report.clone() })?;
            accumulate(&mut sum, &report);
            batches += 1.0;
        }
        self.epoch += 1;
        scale(&mut sum, 1.0 / batches);
        Ok(sum)
    }

    /// Runs the remaining epochs.
    pub fn fit(&mut self, data: &Dataset, on_step: &mut dyn FnMut(&StepLog) -> Result<()>) -> Result<Vec<LossReport>> {
        let mut out = Vec::new();
        while self.epoch < self.config.epochs {
            out.push(self.run_epoch(data, on_step)?);
        }
        Ok(out)
    }
}

fn accumulate(acc: &mut LossReport, r: &LossReport) {
    acc.ice += r.ice;
    acc.kl += r.kl;
    acc.dice += r.dice;
    acc.cup += r.cup;
    acc.total += r.total;
    acc.beta_t += r.beta_t;
    acc.n_ac += r.n_ac;
    acc.n_au += r.n_au;
    acc.n_ic += r.n_ic;
    acc.n_iu += r.n_iu;
}

fn scale(acc: &mut LossReport, k: f64) {
    for v in [
        &mut acc.ice,
        &mut acc.kl,
        &mut acc.dice,
        &mut acc.cup,
        &mut acc.total,
        &mut acc.beta_t,
        &mut acc.n_ac,
        &mut acc.n_au,
        &mut acc.n_ic,
        &mut acc.n_iu,
    ] {
        *v *= k;
    }
}

/// Per-pixel outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePrediction {
    pub labels: Vec<usize>,
    /// Probability of the predicted class.
    pub confidence: Vec<f64>,
    /// `u = C / S` for the evidential head, `1 - max p` for softmax.
    pub uncertainty: Vec<f64>,
}

/// Gradient-free inference on a batch, split per image.
pub fn infer(state: &ModelState, x: &Tensor) -> Result<Vec<ImagePrediction>> {
    no_grad(|| {
        let logits = forward(x, state)?;
        let s = logits.shape().to_vec();
        let (batch, c, px) = (s[0], s[1], s[2..].iter().product::<usize>());
        let (labels, confidence, uncertainty) = match state.head {
            Head::Evidential => {
                let opinion = opinion_from_evidence(&evidence_from_logits(&logits), c)?;
                (predict(&opinion), opinion.confidence(), opinion.uncertainty_values().to_vec())
            }
            Head::Softmax => {
                let prob = logits.log_softmax(1)?.exp();
                let labels = argmax_classes(&prob);
                let conf: Vec<f64> = labels
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| prob.data()[((i / px) * c + k) * px + i % px])
                    .collect();
                let u = conf.iter().map(|p| 1.0 - p).collect();
                (labels, conf, u)
            }
        };
        Ok((0..batch)
            .map(|b| ImagePrediction {
                labels: labels[b * px..(b + 1) * px].to_vec(),
                confidence: confidence[b * px..(b + 1) * px].to_vec(),
                uncertainty: uncertainty[b * px..(b + 1) * px].to_vec(),
            })
            .collect())
    })
}

/// Inference over a whole dataset in batches.
pub fn predict_images(state: &ModelState, data: &Dataset, batch_size: usize) -> Result<Vec<ImagePrediction>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk)?;
        out.extend(infer(state, &x)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init, BackboneConfig};
    use crate::datagen::{generate, SyntheticSpec};

    #[test]
    fn loss_drops_on_toy_blobs() {
        let spec = SyntheticSpec { height: 16, width: 16, fg_min: 0.1, fg_max: 0.4, seed: 5, ..Default::default() };
        let data = generate(&spec, 16).unwrap();
        let cfg = BackboneConfig { base_width: 4, depth: 2, ..Default::default() };
        let state = init(&cfg, Head::Evidential).unwrap();
        let tc = TrainConfig { epochs: 25, batch_size: 8, lr: 3e-3, seed: 1 };
        let mut trainer = Trainer::new(state, tc, Objective::Evidential(LossConfig::default()), data.len()).unwrap();
        let reports = trainer.fit(&data, &mut |_| Ok(())).unwrap();
        assert_eq!(trainer.state.step, 50);
        let first = reports.first().unwrap().total;
        let last = reports.last().unwrap().total;
        assert!(last < 0.7 * first, "{first} -> {last}");
    }

    #[test]
    fn softmax_inference_is_consistent() {
        let cfg = BackboneConfig { base_width: 2, depth: 1, ..Default::default() };
        let state = init(&cfg, Head::Softmax).unwrap();
        let x = Tensor::new(&[2, 1, 4, 4], (0..32).map(|i| i as f64 / 10.0).collect()).unwrap();
        let preds = infer(&state, &x).unwrap();
        assert_eq!(preds.len(), 2);
        for p in &preds {
            for (&c, &u) in p.confidence.iter().zip(&p.uncertainty) {
                assert!(c >= 0.5 && (c + u - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn head_must_match_objective() {
        let state = init(&BackboneConfig::default(), Head::Softmax).unwrap();
        let r = Trainer::new(state, TrainConfig::default(), Objective::Evidential(LossConfig::default()), 4);
        assert!(r.is_err());
    }
}
