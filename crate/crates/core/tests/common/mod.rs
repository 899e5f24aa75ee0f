//! Shared test helpers: a central-difference gradient checker and
//! brute-force reference implementations of the metrics.

#![allow(dead_code)]

use eviseg::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_RTOL: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale
/// (`FD_RTOL * FD_FLOOR`), since their relative error is dominated by
/// rounding in the difference quotient.
pub const FD_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Uniform values whose magnitude is at least `gap`, keeping inputs off the
/// kinks of piecewise-linear ops.
pub fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, gap: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.gen_range(gap..hi);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::param(shape, data).unwrap()
}

/// Largest scaled discrepancy between autodiff and central differences
/// over every element of every input.
pub fn grad_error(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> Tensor) -> f64 {
    inputs.iter().for_each(Tensor::zero_grad);
    f(inputs).backward().unwrap();
    let analytic: Vec<Vec<f64>> =
        inputs.iter().map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()])).collect();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let shifted = |delta: f64| {
                let moved: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, s)| {
                        let mut d = s.data().to_vec();
                        if k == i {
                            d[j] += delta;
                        }
                        Tensor::new(s.shape(), d).unwrap()
                    })
                    .collect();
                f(&moved).item()
            };
            let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

/// Runs `trials` random cases through [`grad_error`] and returns the worst.
pub fn fd_trials(trials: usize, seed: u64, mut case: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Tensor>)) -> f64 {
    let mut r = rng(seed);
    (0..trials)
        .map(|_| {
            let (inputs, f) = case(&mut r);
            grad_error(&inputs, f.as_ref())
        })
        .fold(0.0, f64::max)
}

pub fn dice_oracle(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Boundary by explicit neighbour enumeration, raster order.
pub fn boundary_oracle(mask: &[bool], h: usize, w: usize) -> Vec<(i64, i64)> {
    let inside = |r: i64, c: i64| r >= 0 && c >= 0 && r < h as i64 && c < w as i64 && mask[(r as usize) * w + c as usize];
    let mut out = Vec::new();
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            if inside(r, c) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| !inside(r + dr, c + dc)) {
                out.push((r, c));
            }
        }
    }
    out
}

/// All-pairs ASSD.
pub fn assd_oracle(a: &[bool], b: &[bool], h: usize, w: usize) -> f64 {
    let sa = boundary_oracle(a, h, w);
    let sb = boundary_oracle(b, h, w);
    let nearest = |p: &(i64, i64), set: &[(i64, i64)]| {
        let d2 = set.iter().map(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)).min().unwrap();
        (d2 as f64).sqrt()
    };
    let mut total = 0.0;
    for p in &sa {
        total += nearest(p, &sb);
    }
    for p in &sb {
        total += nearest(p, &sa);
    }
    total / (sa.len() + sb.len()) as f64
}

/// Exhaustive binning: each bin scans every point.
pub fn ece_oracle(conf: &[f64], correct: &[bool], bins: usize) -> f64 {
    let n = conf.len() as f64;
    let mut total = 0.0;
    for m in 0..bins {
        let lo = m as f64 / bins as f64;
        let hi = (m + 1) as f64 / bins as f64;
        let (mut size, mut hits, mut csum) = (0usize, 0usize, 0.0);
        for (&c, &ok) in conf.iter().zip(correct) {
            let member = if m == 0 { c <= hi } else { c > lo && c <= hi };
            if member {
                size += 1;
                hits += ok as usize;
                csum += c;
            }
        }
        if size > 0 {
            let s = size as f64;
            total += s / n * (hits as f64 / s - csum / s).abs();
        }
    }
    total
}

pub fn ueo_oracle(error: &[bool], u: &[f64], thresholds: &[f64]) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, thresholds[0]);
    for &tau in thresholds {
        let mask: Vec<bool> = u.iter().map(|&v| v >= tau).collect();
        let d = dice_oracle(&mask, error);
        if d > best.0 {
            best = (d, tau);
        }
    }
    best
}

pub fn random_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.gen_bool(p)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Ice,
    Kl,
    Dice,
    Cup,
    Total,
}

pub const LOSS_KINDS: [LossKind; 5] = [LossKind::Ice, LossKind::Kl, LossKind::Dice, LossKind::Cup, LossKind::Total];

/// Random labels plus their one-hot target for a `[batch, c, 1, px]` layout.
fn random_target(r: &mut ChaCha8Rng, batch: usize, c: usize, px: usize) -> (Vec<usize>, Tensor) {
    let labels: Vec<usize> = (0..batch * px).map(|_| r.gen_range(0..c)).collect();
    let y = eviseg::losses::one_hot(&labels, batch, c, &[1, px]).unwrap();
    (labels, y)
}

/// Evidence whose per-pixel maximum beats the runner-up by at least 0.5, so
/// a finite-difference step cannot flip the predicted class.
fn separated_evidence(r: &mut ChaCha8Rng, batch: usize, c: usize, px: usize) -> Vec<f64> {
    let mut e = vec![0.0; batch * c * px];
    for b in 0..batch {
        for j in 0..px {
            let win = r.gen_range(0..c);
            for k in 0..c {
                e[(b * c + k) * px + j] = if k == win { r.gen_range(3.0..8.0) } else { r.gen_range(0.1..2.5) };
            }
        }
    }
    e
}

/// One random small input for the named loss, as differentiable inputs and
/// a closure producing the scalar loss.
pub fn loss_case(kind: LossKind, r: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Tensor>) {
    use eviseg::evidential::{opinion_from_evidence, predict};
    use eviseg::losses::*;
    let batch = r.gen_range(1..3);
    let c = r.gen_range(2..5);
    let px = r.gen_range(1..5);
    let shape = [batch, c, 1, px];
    let n = batch * c * px;
    let (_, y) = random_target(r, batch, c, px);
    match kind {
        LossKind::Ice => {
            let alpha = param(&shape, uniform(r, n, 1.05, 10.0));
            (vec![alpha], Box::new(move |t| ice_loss(&t[0], &y).unwrap()))
        }
        LossKind::Kl => {
            let alpha = param(&shape, uniform(r, n, 1.05, 10.0));
            (vec![alpha], Box::new(move |t| kl_to_uniform(&t[0], &y).unwrap()))
        }
        LossKind::Dice => {
            let belief = param(&shape, uniform(r, n, 0.01, 0.99));
            let smooth = r.gen_range(1e-5..1.0);
            (vec![belief], Box::new(move |t| soft_dice_loss(&t[0], &y, smooth).unwrap()))
        }
        LossKind::Cup => {
            let e = param(&shape, separated_evidence(r, batch, c, px));
            let beta = r.gen_range(0.01..1.0);
            let pred = predict(&opinion_from_evidence(&e, c).unwrap());
            (
                vec![e],
                Box::new(move |t| {
                    let o = opinion_from_evidence(&t[0], c).unwrap();
                    cup_loss(&o.belief, &o.uncertainty, &y, &pred, beta).unwrap()
                }),
            )
        }
        LossKind::Total => {
            // Differentiated from raw logits through the softplus head.
            let e = separated_evidence(r, batch, c, px);
            let logits = param(&shape, e.iter().map(|v: &f64| v.exp_m1().ln()).collect());
            let cfg = LossConfig { total_epochs: 10, ..Default::default() };
            let epoch = r.gen_range(0..=10);
            (
                vec![logits],
                Box::new(move |t| {
                    let o = opinion_from_evidence(&eviseg::evidential::evidence_from_logits(&t[0]), c).unwrap();
                    total_loss(&o, &y, epoch, &cfg).unwrap().total
                }),
            )
        }
    }
}

/// Worst absolute gap between autodiff and the closed-form single-pixel
/// gradients, for both the plain and the label-adjusted regulariser.
pub fn oracle_gap(cases: usize, seed: u64) -> f64 {
    use eviseg::losses::*;
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let c = r.gen_range(2..6);
        let alpha = uniform(&mut r, c, 1.05, 20.0);
        let label = r.gen_range(0..c);
        let y: Vec<f64> = (0..c).map(|k| if k == label { 1.0 } else { 0.0 }).collect();
        let lambda = r.gen_range(0.0..1.0);
        let yt = Tensor::new(&[1, c, 1], y.clone()).unwrap();
        for adjusted in [false, true] {
            let a = param(&[1, c, 1], alpha.clone());
            let kl = if adjusted { kl_to_uniform(&a, &yt) } else { kl_dirichlet_uniform(&a) }.unwrap();
            ice_loss(&a, &yt).unwrap().add(&kl.mul_scalar(lambda)).unwrap().backward().unwrap();
            let oracle = if adjusted {
                grad_oracle_le_adjusted(&alpha, &y, lambda)
            } else {
                grad_oracle_le(&alpha, &y, lambda)
            };
            for (g, o) in a.grad().unwrap().iter().zip(&oracle) {
                worst = worst.max((g - o).abs());
            }
        }
    }
    worst
}

/// Runs every metric against its brute-force oracle on random inputs and
/// returns the first mismatch. Equality is exact.
pub fn metric_oracle_sweep(seed: u64, trials: usize) -> Result<(), String> {
    use eviseg::metrics::{assd, default_ueo_thresholds, dice, ece, ueo};
    let mut r = rng(seed);
    for t in 0..trials {
        let h = r.gen_range(1..=12);
        let w = r.gen_range(1..=12);
        let p = r.gen_range(0.05..0.95);
        let a = random_mask(&mut r, h * w, p);
        let b = random_mask(&mut r, h * w, p);
        let d = dice(&a, &b).unwrap();
        if d != dice_oracle(&a, &b) {
            return Err(format!("dice trial {t}: {d} vs {}", dice_oracle(&a, &b)));
        }
        let has = |m: &[bool]| m.iter().any(|&v| v);
        if has(&a) && has(&b) {
            let got = assd(&a, &b, h, w).unwrap();
            let want = assd_oracle(&a, &b, h, w);
            if got != want {
                return Err(format!("assd trial {t} ({h}x{w}): {got} vs {want}"));
            }
        }
        let u = uniform(&mut r, h * w, 0.0, 1.0);
        let k = r.gen_range(1..8);
        let taus = if r.gen_bool(0.5) { default_ueo_thresholds() } else { uniform(&mut r, k, 0.0, 1.0) };
        let got = ueo(&a, &u, &taus).unwrap();
        if got != ueo_oracle(&a, &u, &taus) {
            return Err(format!("ueo trial {t}: {got:?} vs {:?}", ueo_oracle(&a, &u, &taus)));
        }
        let n = r.gen_range(1..=10_000);
        let bins = r.gen_range(1..=20);
        // Mix in exact bin edges so the right-closed rule is exercised.
        let conf: Vec<f64> = (0..n)
            .map(|_| if r.gen_bool(0.1) { r.gen_range(0..=bins) as f64 / bins as f64 } else { r.gen_range(0.0..=1.0) })
            .collect();
        let ok = random_mask(&mut r, n, 0.7);
        let got = ece(&conf, &ok, bins).unwrap();
        if got != ece_oracle(&conf, &ok, bins) {
            return Err(format!("ece trial {t}: {got} vs {}", ece_oracle(&conf, &ok, bins)));
        }
    }
    Ok(())
}
