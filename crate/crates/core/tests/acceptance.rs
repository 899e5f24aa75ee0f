//! Acceptance criteria 1-9. Each prints one `criterion N: PASS|FAIL` line.
//! Run with `--nocapture` to see them.

mod common;

use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::*;
use eviseg::backbone::*;
use eviseg::datagen::*;
use eviseg::evidential::{opinion_from_evidence, predict};
use eviseg::losses::{anneal, LossConfig};
use eviseg::metrics::{dice, ece, DEFAULT_ECE_BINS};
use eviseg::tensor::no_grad;
use eviseg::uaf;
use eviseg::Tensor;
use rand::Rng;

/// Serialises the timed criteria against the long training run.
static CPU: Mutex<()> = Mutex::new(());

fn report(n: usize, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

#[test]
fn criterion_1_opinion_algebra() {
    let _cpu = CPU.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let c = r.gen_range(2..=4);
        let e: Vec<f64> = (0..c).map(|_| r.gen_range(0.0..1e3)).collect();
        let o = opinion_from_evidence(&Tensor::new(&[1, c, 1], e).unwrap(), c).unwrap();
        let mass = o.uncertainty.item() + o.belief.data().iter().sum::<f64>();
        worst = worst.max((mass - 1.0).abs());
    }
    let o = opinion_from_evidence(&Tensor::new(&[1, 3, 1], vec![40.0, 1.0, 1.0]).unwrap(), 3).unwrap();
    let u = o.uncertainty.item();
    let elapsed = start.elapsed();
    let pass = worst <= 1e-12 && (u - 0.0667).abs() <= 1e-4 && elapsed < Duration::from_secs(1);
    report(1, pass, format!("max |u + sum b - 1| = {worst:.1e}, u[40,1,1] = {u:.6}, {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn criterion_2_gradient_fidelity() {
    let _cpu = CPU.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut detail = String::new();
    let mut pass = true;
    for (i, kind) in LOSS_KINDS.into_iter().enumerate() {
        let worst = fd_trials(50, 9000 + i as u64, |r| loss_case(kind, r));
        pass &= worst <= FD_RTOL;
        detail += &format!("{kind:?} {worst:.1e}, ");
    }
    let gap = oracle_gap(100, 9100);
    let elapsed = start.elapsed();
    pass &= gap <= 1e-8 && elapsed < Duration::from_secs(30);
    report(2, pass, format!("fd worst: {detail}closed form gap {gap:.1e}, {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn criterion_3_annealing() {
    let (b0, bt, mid) = (anneal(0, 100, 0.01), anneal(100, 100, 0.01), anneal(50, 100, 0.01));
    let pass = b0 == 0.01 && bt == 1.0 && (mid - 0.1).abs() <= 1e-12;
    report(3, pass, format!("beta_0 = {b0}, beta_T = {bt}, beta_T/2 = {mid}"));
    assert!(pass);
}

#[test]
fn criterion_4_metric_oracles() {
    let _cpu = CPU.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let sweep = metric_oracle_sweep(4000, 300);
    let elapsed = start.elapsed();
    let pass = sweep.is_ok() && elapsed < Duration::from_secs(10);
    report(4, pass, format!("{}, {elapsed:.2?}", sweep.as_ref().err().map_or("300 random cases exact", |e| e.as_str())));
    assert!(pass);
}

const SEEDS: [u64; 3] = [0, 1, 2];
const SIGMAS: [f64; 3] = [0.0, 0.2, 0.4];
const NOISE_SEED: u64 = 7;

/// Test-set summary under one noise level.
struct Condition {
    dice: f64,
    ece: f64,
    /// Median over images of the whole-image mean uncertainty.
    median_u: f64,
    /// Same over the predicted foreground, for information.
    median_u_region: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn foreground_dice(pred: &[usize], gt: &[usize]) -> f64 {
    let p: Vec<bool> = pred.iter().map(|&k| k == 1).collect();
    let g: Vec<bool> = gt.iter().map(|&k| k == 1).collect();
    dice(&p, &g).unwrap()
}

fn evaluate(state: &ModelState, data: &Dataset) -> Condition {
    let preds = predict_images(state, data, 20).unwrap();
    let (mut dices, mut conf, mut ok, mut whole, mut region) = (vec![], vec![], vec![], vec![], vec![]);
    for (p, s) in preds.iter().zip(&data.samples) {
        dices.push(foreground_dice(&p.labels, &s.labels));
        conf.extend_from_slice(&p.confidence);
        ok.extend(p.labels.iter().zip(&s.labels).map(|(a, b)| a == b));
        whole.push(p.uncertainty.iter().sum::<f64>() / p.uncertainty.len() as f64);
        region.push(uaf::decide("", &p.uncertainty, &p.labels, 0.0).unwrap().mean_uncertainty);
    }
    Condition {
        dice: dices.iter().sum::<f64>() / dices.len() as f64,
        ece: ece(&conf, &ok, DEFAULT_ECE_BINS).unwrap(),
        median_u: median(whole),
        median_u_region: median(region),
    }
}

fn train(seed: u64, data: &Dataset, objective: Objective) -> ModelState {
    let state = init(&BackboneConfig { seed, ..Default::default() }, objective.head()).unwrap();
    let cfg = TrainConfig { epochs: 20, batch_size: 8, lr: 1e-3, seed };
    let mut trainer = Trainer::new(state, cfg, objective, data.len()).unwrap();
    trainer.fit(data, &mut |_| Ok(())).unwrap();
    trainer.state
}

struct UafOutcome {
    u_star: f64,
    dice_all: f64,
    dice_kept: f64,
    kept: usize,
    ood_recall: f64,
}

fn uaf_outcome(state: &ModelState, val: &Dataset, id: &Dataset, ood: &Dataset) -> UafOutcome {
    let vp = predict_images(state, val, 20).unwrap();
    let entries: Vec<_> = vp
        .iter()
        .zip(&val.samples)
        .enumerate()
        .map(|(i, (p, s))| uaf::validation_entry(format!("val{i}"), &p.uncertainty, &p.labels, &s.labels).unwrap())
        .collect();
    let (u_star, _) = uaf::fit_from_validation(&entries).unwrap();
    let mut mixed = id.clone();
    mixed.samples.extend(ood.samples.iter().cloned());
    let n_id = id.len();
    let preds = predict_images(state, &mixed, 20).unwrap();
    let (mut all, mut kept, mut rejected_ood) = (vec![], vec![], 0);
    for (i, (p, s)) in preds.iter().zip(&mixed.samples).enumerate() {
        let d = foreground_dice(&p.labels, &s.labels);
        all.push(d);
        match uaf::decide(i.to_string(), &p.uncertainty, &p.labels, u_star).unwrap().verdict {
            uaf::Verdict::Reliable => kept.push(d),
            uaf::Verdict::Unreliable if i >= n_id => rejected_ood += 1,
            uaf::Verdict::Unreliable => {}
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    UafOutcome {
        u_star,
        dice_all: mean(&all),
        dice_kept: mean(&kept),
        kept: kept.len(),
        ood_recall: rejected_ood as f64 / ood.len() as f64,
    }
}

struct SeedRun {
    evidential: Vec<Condition>,
    baseline: Vec<Condition>,
    no_cup: Vec<Condition>,
    uaf: UafOutcome,
    train_time: Duration,
    uaf_time: Duration,
}

fn run_seed(seed: u64) -> SeedRun {
    let blobs = |s: u64| SyntheticSpec { seed: s, ..Default::default() };
    let train_set = generate(&blobs(100 + seed), 200).unwrap();
    let test = generate(&blobs(200 + seed), 40).unwrap();
    let val = generate(&blobs(300 + seed), 30).unwrap();
    let ood = generate(&SyntheticSpec { family: ShapeFamily::Rings, ..blobs(400 + seed) }, 30)
        .unwrap()
        .degrade(&DegradationSpec::new(Degradation::GaussianBlur { sigma: 4.0, kernel: 13 }, seed))
        .unwrap();
    let noisy: Vec<Dataset> = SIGMAS
        .iter()
        .map(|&sigma| test.degrade(&DegradationSpec::new(Degradation::GaussianNoise { sigma }, NOISE_SEED)).unwrap())
        .collect();
    let sweep = |state: &ModelState| noisy.iter().map(|d| evaluate(state, d)).collect::<Vec<_>>();

    let start = Instant::now();
    let evid = train(seed, &train_set, Objective::Evidential(LossConfig::default()));
    let base = train(seed, &train_set, Objective::SoftmaxCe);
    let train_time = start.elapsed();
    let nocup = train(seed, &train_set, Objective::Evidential(LossConfig { cup_enabled: false, ..Default::default() }));

    let start = Instant::now();
    let id = Dataset { samples: test.samples[..30].to_vec(), ..test.clone() };
    let uaf = uaf_outcome(&evid, &val, &id, &ood);
    let uaf_time = start.elapsed();

    SeedRun { evidential: sweep(&evid), baseline: sweep(&base), no_cup: sweep(&nocup), uaf, train_time, uaf_time }
}

#[test]
fn criteria_5_to_8_desk_scale_experiment() {
    let _cpu = CPU.lock().unwrap_or_else(|e| e.into_inner());
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    let last = SIGMAS.len() - 1;

    for (s, run) in SEEDS.iter().zip(&runs) {
        for (name, conds) in [("evidential", &run.evidential), ("softmax", &run.baseline), ("no-cup", &run.no_cup)] {
            let cells: Vec<String> = SIGMAS
                .iter()
                .zip(conds.iter())
                .map(|(sg, c)| {
                    format!("s{sg}: dice {:.4} ece {:.4} med u {:.4}/{:.4}", c.dice, c.ece, c.median_u, c.median_u_region)
                })
                .collect();
            println!("  seed {s} {name:<10} {}", cells.join(" | "));
        }
        let u = &run.uaf;
        println!(
            "  seed {s} uaf u* {:.4}: dice all {:.4} kept {:.4} ({} kept), ood recall {:.2}",
            u.u_star, u.dice_all, u.dice_kept, u.kept, u.ood_recall
        );
    }

    let majority = |hits: usize| 2 * hits > SEEDS.len();

    let drop = |c: &[Condition]| c[0].dice - c[last].dice;
    let smaller_drop = runs.iter().filter(|r| drop(&r.evidential) < drop(&r.baseline)).count();
    let lower_ece = runs.iter().filter(|r| r.evidential[last].ece < r.baseline[last].ece).count();
    let train_time: Duration = runs.iter().map(|r| r.train_time).sum();
    let pass5 = majority(smaller_drop) && majority(lower_ece) && train_time < Duration::from_secs(15 * 60);
    report(
        5,
        pass5,
        format!("smaller dice drop in {smaller_drop}/3 seeds, lower ece at 0.4 in {lower_ece}/3, training {train_time:.0?}"),
    );

    let monotone = runs
        .iter()
        .filter(|r| r.evidential.windows(2).all(|w| w[1].median_u >= w[0].median_u))
        .count();
    let pass6 = monotone == SEEDS.len();
    let trace: Vec<String> = runs
        .iter()
        .map(|r| r.evidential.iter().map(|c| format!("{:.4}", c.median_u)).collect::<Vec<_>>().join("->"))
        .collect();
    report(6, pass6, format!("non-decreasing in {monotone}/3 seeds ({})", trace.join(", ")));

    let gains = runs.iter().filter(|r| r.uaf.dice_kept >= r.uaf.dice_all + 0.05).count();
    let recalls = runs.iter().filter(|r| r.uaf.ood_recall >= 0.6).count();
    let uaf_time: Duration = runs.iter().map(|r| r.uaf_time).sum();
    let pass7 = majority(gains) && majority(recalls) && uaf_time < Duration::from_secs(5 * 60);
    report(7, pass7, format!("dice gain >= 0.05 in {gains}/3 seeds, ood recall >= 0.6 in {recalls}/3, {uaf_time:.2?}"));

    let cup_wins = runs.iter().filter(|r| r.evidential[last].ece < r.no_cup[last].ece).count();
    let pass8 = cup_wins >= 2;
    let pairs: Vec<String> =
        runs.iter().map(|r| format!("{:.4} vs {:.4}", r.evidential[last].ece, r.no_cup[last].ece)).collect();
    report(8, pass8, format!("cup lowers ece at 0.4 in {cup_wins}/3 seeds ({})", pairs.join(", ")));

    assert!(pass5 && pass6 && pass7 && pass8);
}

#[test]
fn criterion_9_single_pass_overhead() {
    let _cpu = CPU.lock().unwrap_or_else(|e| e.into_inner());
    let state = init(&BackboneConfig::default(), Head::Evidential).unwrap();
    let data = generate(&SyntheticSpec { seed: 9, ..Default::default() }, 1).unwrap();
    let (x, _) = data.batch(&[0]).unwrap();
    let c = state.config.num_classes;
    let plain = || no_grad(|| forward(&x, &state).unwrap());
    let with_uncertainty = || {
        no_grad(|| {
            let logits = forward(&x, &state).unwrap();
            let o = opinion_from_evidence(&logits.softplus(), c).unwrap();
            (predict(&o), o.confidence(), o.uncertainty_values().to_vec())
        })
    };
    for _ in 0..10 {
        plain();
        with_uncertainty();
    }
    // Interleaved so drift in machine load hits both sides equally.
    let (mut t_plain, mut t_unc) = (Duration::ZERO, Duration::ZERO);
    for _ in 0..100 {
        let t = Instant::now();
        std::hint::black_box(plain());
        t_plain += t.elapsed();
        let t = Instant::now();
        std::hint::black_box(with_uncertainty());
        t_unc += t.elapsed();
    }
    let overhead = t_unc.as_secs_f64() / t_plain.as_secs_f64() - 1.0;
    let pass = overhead <= 0.10;
    report(
        9,
        pass,
        format!("overhead {:.2}% ({:.2?} vs {:.2?} per 100 inferences)", 100.0 * overhead, t_unc, t_plain),
    );
    assert!(pass);
}
