use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use eviseg::backbone::{infer, init, load_checkpoint, save_checkpoint, Checkpoint, ModelState, Trainer, StepLog};
use eviseg::datagen::{generate, load_dataset, save_dataset, Dataset, DegradationSpec, Degradation};
use eviseg::metrics::{ece, evaluate_image, EvalReport, ImageEval, ImageInputs};
use eviseg::uaf::{self, FilterDecision, Verdict};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, OOD_OFFSET, TEST_OFFSET, TRAIN_OFFSET, VAL_OFFSET};
use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Stamped on every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
}

/// Resolved config plus output root.
pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
    pub workers: usize,
}

impl Run {
    pub fn provenance(&self) -> Provenance {
        Provenance { schema_version: SCHEMA_VERSION, config_hash: self.config.hash(), seed: self.config.seed }
    }

    pub fn data_dir(&self, split: &str) -> PathBuf {
        self.out.join("data").join(split)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out.join("checkpoint")
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} {} does not exist", path.display())))
    }
}

fn load_split(dir: &Path) -> Result<Dataset, CliError> {
    require_dir(dir, "dataset")?;
    Ok(load_dataset(dir)?.0)
}

fn load_model(dir: &Path) -> Result<ModelState, CliError> {
    require_dir(dir, "checkpoint")?;
    Ok(load_checkpoint(dir)?.state)
}

#[derive(Serialize)]
struct GenSummary<'a> {
    #[serde(flatten)]
    provenance: Provenance,
    splits: BTreeMap<&'a str, usize>,
}

pub fn gen(run: &Run) -> Result<(), CliError> {
    let cfg = &run.config;
    let mut splits = vec![("train", TRAIN_OFFSET, cfg.data.train), ("val", VAL_OFFSET, cfg.data.val), ("test", TEST_OFFSET, cfg.data.test)];
    if cfg.ood.count > 0 {
        splits.push(("ood", OOD_OFFSET, cfg.ood.count));
    }
    let mut written = BTreeMap::new();
    for (name, offset, count) in splits {
        let (family, degradation) = if name == "ood" {
            (cfg.ood.family, Some(DegradationSpec::new(cfg.ood.degradation, cfg.seed)))
        } else {
            (cfg.data.family, None)
        };
        let spec = cfg.data.spec(family, cfg.seed + offset);
        let mut data = generate(&spec, count)?;
        if let Some(d) = &degradation {
            data = data.degrade(d)?;
        }
        save_dataset(&run.data_dir(name), &data, Some(&spec), degradation.as_ref(), cfg.data.previews)?;
        written.insert(name, count);
    }
    write_json(&run.out.join("data").join("summary.json"), &GenSummary { provenance: run.provenance(), splits: written })
}

#[derive(Serialize)]
struct LogLine<'a> {
    #[serde(flatten)]
    provenance: &'a Provenance,
    #[serde(flatten)]
    step: &'a StepLog,
}

pub fn train(run: &Run, data_dir: Option<&Path>) -> Result<(), CliError> {
    let cfg = &run.config;
    let data = load_split(&data_dir.map(Path::to_path_buf).unwrap_or_else(|| run.data_dir("train")))?;
    if data.num_classes != cfg.data.num_classes {
        return Err(CliError::Data(format!(
            "training data has {} classes, config expects {}",
            data.num_classes, cfg.data.num_classes
        )));
    }
    create_dir(&run.out)?;
    let state = init(&cfg.backbone(), cfg.model.head)?;
    let mut trainer = Trainer::new(state, cfg.train_config(), cfg.objective(), data.len())?;
    let log_path = run.out.join("train_log.jsonl");
    let file = File::create(&log_path).map_err(|e| CliError::Data(format!("cannot write {}: {e}", log_path.display())))?;
    let mut log = BufWriter::new(file);
    let provenance = run.provenance();
    let outcome = trainer.fit(&data, &mut |step| {
        let line = serde_json::to_string(&LogLine { provenance: &provenance, step })?;
        writeln!(log, "{line}").map_err(|e| eviseg::Error::InvalidInput(format!("log write failed: {e}")))?;
        Ok(())
    });
    log.flush()?;
    outcome?;
    let manifest = save_checkpoint(&run.checkpoint_dir(), &Checkpoint::from_trainer(&trainer))?;
    let stamp = run.checkpoint_dir().join("provenance.json");
    write_json(&stamp, &provenance)?;
    eprintln!("trained {} steps, {} tensors saved", trainer.state.step, manifest.tensors.len());
    Ok(())
}

/// Per-image evaluation result with what pooled ECE needs.
struct Scored {
    eval: ImageEval,
    labels: Vec<usize>,
    uncertainty: Vec<f64>,
    confidence: Vec<f64>,
    correct: Vec<bool>,
}

/// Runs inference and scoring over `data` on `workers` threads. Results come
/// back in image order regardless of the worker count.
fn score(run: &Run, state: &ModelState, data: &Dataset, prefix: &str) -> Result<Vec<Scored>, CliError> {
    let eval = &run.config.eval;
    let ids: Vec<usize> = (0..data.len()).collect();
    let per_worker = data.len().div_ceil(run.workers.max(1)).max(1);
    let work = |chunk: &[usize]| -> Result<Vec<Scored>, CliError> {
        let mut out = Vec::with_capacity(chunk.len());
        for batch in chunk.chunks(eval.batch_size) {
            let (x, _) = data.batch(batch)?;
            for (&i, p) in batch.iter().zip(infer(state, &x)?) {
                let gt = &data.samples[i].labels;
                let inputs = ImageInputs {
                    id: format!("{prefix}{i:04}"),
                    height: data.height,
                    width: data.width,
                    num_classes: data.num_classes,
                    pred: &p.labels,
                    gt,
                    confidence: &p.confidence,
                    uncertainty: &p.uncertainty,
                };
                let scored = evaluate_image(&inputs, eval.ece_bins, &eval.ueo_thresholds)?;
                let correct = p.labels.iter().zip(gt).map(|(a, b)| a == b).collect();
                out.push(Scored { eval: scored, labels: p.labels, uncertainty: p.uncertainty, confidence: p.confidence, correct });
            }
        }
        Ok(out)
    };
    let parts: Vec<Result<Vec<Scored>, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = ids.chunks(per_worker).map(|chunk| s.spawn(move || work(chunk))).collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut all = Vec::with_capacity(data.len());
    for part in parts {
        all.extend(part?);
    }
    Ok(all)
}

fn pooled_ece(scored: &[Scored], bins: usize) -> Result<f64, CliError> {
    let conf: Vec<f64> = scored.iter().flat_map(|s| s.confidence.iter().copied()).collect();
    let ok: Vec<bool> = scored.iter().flat_map(|s| s.correct.iter().copied()).collect();
    Ok(ece(&conf, &ok, bins)?)
}

/// One file of `eval/`: a report for a single degradation level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub degradation: Degradation,
    pub label: String,
    pub report: EvalReport,
}

/// File-name friendly label: `noise:0.2` becomes `noise_0.2`.
pub fn degradation_label(d: &Degradation) -> String {
    d.to_string().replace(':', "_")
}

pub fn eval(run: &Run, checkpoint: Option<&Path>, test_dir: Option<&Path>) -> Result<Vec<EvalOutput>, CliError> {
    let cfg = &run.config;
    let state = load_model(&checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.checkpoint_dir()))?;
    let test = load_split(&test_dir.map(Path::to_path_buf).unwrap_or_else(|| run.data_dir("test")))?;
    let dir = run.out.join("eval");
    create_dir(&dir)?;
    let mut outputs = Vec::new();
    for &d in &cfg.eval.degradations {
        let data = test.degrade(&DegradationSpec::new(d, cfg.seed))?;
        let scored = score(run, &state, &data, "")?;
        let ece_pooled = pooled_ece(&scored, cfg.eval.ece_bins)?;
        let report = EvalReport::new(scored.into_iter().map(|s| s.eval).collect(), ece_pooled);
        let out = EvalOutput { provenance: run.provenance(), degradation: d, label: degradation_label(&d), report };
        write_json(&dir.join(format!("{}.json", out.label)), &out)?;
        eprintln!(
            "{:<12} dice {:.4} ece {:.4} ueo {:.4} mean u {:.4}",
            d.to_string(),
            out.report.dice_mean,
            out.report.ece_pooled,
            out.report.ueo_mean,
            out.report.mean_uncertainty
        );
        outputs.push(out);
    }
    Ok(outputs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub name: String,
    pub images: usize,
    pub rejected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub threshold: f64,
    pub images: usize,
    pub kept: usize,
    pub rejected: usize,
    pub dice_before: f64,
    pub dice_after: Option<f64>,
    pub accuracy_before: f64,
    pub accuracy_after: Option<f64>,
    pub sets: Vec<SetSummary>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn filter(run: &Run, checkpoint: Option<&Path>, val_dir: Option<&Path>, test_dirs: &[PathBuf]) -> Result<FilterSummary, CliError> {
    let state = load_model(&checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.checkpoint_dir()))?;
    let val = load_split(&val_dir.map(Path::to_path_buf).unwrap_or_else(|| run.data_dir("val")))?;
    let test_dirs = if test_dirs.is_empty() { vec![run.data_dir("test")] } else { test_dirs.to_vec() };
    let sets = test_dirs
        .iter()
        .map(|d| {
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| d.display().to_string());
            Ok((name, load_split(d)?))
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let val_scored = score(run, &state, &val, "val/")?;
    let entries = val_scored
        .iter()
        .zip(&val.samples)
        .map(|(s, sample)| uaf::validation_entry(s.eval.id.clone(), &s.uncertainty, &s.labels, &sample.labels))
        .collect::<eviseg::Result<Vec<_>>>()?;
    let (u_star, val_decisions) = uaf::fit_from_validation(&entries)?;

    let mut decisions: Vec<FilterDecision> = Vec::new();
    let mut set_summaries = Vec::new();
    let (mut dice_all, mut dice_kept, mut acc_all, mut acc_kept) = (vec![], vec![], vec![], vec![]);
    for (name, data) in &sets {
        let scored = score(run, &state, data, &format!("{name}/"))?;
        let mut rejected = 0;
        for s in &scored {
            let d = uaf::decide(s.eval.id.clone(), &s.uncertainty, &s.labels, u_star)?;
            dice_all.push(s.eval.dice);
            acc_all.push(s.eval.accuracy);
            if d.verdict == Verdict::Reliable {
                dice_kept.push(s.eval.dice);
                acc_kept.push(s.eval.accuracy);
            } else {
                rejected += 1;
            }
            decisions.push(d);
        }
        set_summaries.push(SetSummary { name: name.clone(), images: data.len(), rejected });
    }

    let dir = run.out.join("filter");
    create_dir(&dir)?;
    uaf::write_manifest(&dir.join("decisions.jsonl"), &decisions)?;
    uaf::write_manifest(&dir.join("validation.jsonl"), &val_decisions)?;
    let summary = FilterSummary {
        provenance: run.provenance(),
        threshold: u_star,
        images: decisions.len(),
        kept: dice_kept.len(),
        rejected: decisions.len() - dice_kept.len(),
        dice_before: mean(&dice_all).unwrap_or(f64::NAN),
        dice_after: mean(&dice_kept),
        accuracy_before: mean(&acc_all).unwrap_or(f64::NAN),
        accuracy_after: mean(&acc_kept),
        sets: set_summaries,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    eprintln!(
        "u* = {:.4}: kept {}/{} images, dice {:.4} -> {}",
        u_star,
        summary.kept,
        summary.images,
        summary.dice_before,
        summary.dice_after.map_or("n/a".into(), |d| format!("{d:.4}"))
    );
    Ok(summary)
}

/// One aggregated row: all images evaluated under one degradation label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub degradation: String,
    pub runs: usize,
    pub images: usize,
    pub dice: f64,
    pub assd: Option<f64>,
    pub ece: f64,
    pub ece_pooled: f64,
    pub ueo: f64,
    pub mean_uncertainty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSource {
    pub path: String,
    #[serde(flatten)]
    pub provenance: Provenance,
    pub degradation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub rows: Vec<ReportRow>,
    pub sources: Vec<ReportSource>,
}

/// Eval files under each input (files directly, directories non-recursively).
fn eval_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            found.retain(|p| p.extension().is_some_and(|e| e == "json"));
            found.sort();
            files.extend(found);
        } else if input.is_file() {
            files.push(input.clone());
        } else {
            return Err(CliError::Data(format!("report input {} does not exist", input.display())));
        }
    }
    if files.is_empty() {
        return Err(CliError::Data("no eval reports found".into()));
    }
    Ok(files)
}

/// Aggregates per-image metrics across eval files, grouped by degradation in
/// order of first appearance. Means are recomputed from the images; pooled
/// ECE is averaged over runs.
pub fn report(run: &Run, inputs: &[PathBuf]) -> Result<Report, CliError> {
    let inputs = if inputs.is_empty() { vec![run.out.join("eval")] } else { inputs.to_vec() };
    let mut groups: Vec<(String, Vec<EvalOutput>)> = Vec::new();
    let mut sources = Vec::new();
    for path in eval_files(&inputs)? {
        let text = fs::read_to_string(&path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        let out: EvalOutput =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{} is not an eval report: {e}", path.display())))?;
        if out.provenance.schema_version != SCHEMA_VERSION {
            return Err(CliError::Data(format!("{}: unsupported schema_version {}", path.display(), out.provenance.schema_version)));
        }
        sources.push(ReportSource { path: path.display().to_string(), provenance: out.provenance.clone(), degradation: out.label.clone() });
        match groups.iter_mut().find(|(label, _)| *label == out.label) {
            Some((_, v)) => v.push(out),
            None => groups.push((out.label.clone(), vec![out])),
        }
    }
    let rows: Vec<ReportRow> = groups
        .into_iter()
        .map(|(label, outs)| {
            let images: Vec<&ImageEval> = outs.iter().flat_map(|o| o.report.images.iter()).collect();
            let col = |f: fn(&ImageEval) -> f64| mean(&images.iter().map(|i| f(i)).collect::<Vec<_>>()).unwrap_or(f64::NAN);
            let assds: Vec<f64> = images.iter().filter_map(|i| i.assd).collect();
            ReportRow {
                degradation: label,
                runs: outs.len(),
                images: images.len(),
                dice: col(|i| i.dice),
                assd: mean(&assds),
                ece: col(|i| i.ece),
                ece_pooled: mean(&outs.iter().map(|o| o.report.ece_pooled).collect::<Vec<_>>()).unwrap_or(f64::NAN),
                ueo: col(|i| i.ueo),
                mean_uncertainty: col(|i| i.mean_uncertainty),
            }
        })
        .collect();
    let report = Report { schema_version: SCHEMA_VERSION, rows, sources };

    let dir = run.out.join("report");
    create_dir(&dir)?;
    write_json(&dir.join("report.json"), &report)?;
    let csv_path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::Data(format!("cannot write {}: {e}", csv_path.display())))?;
    for row in &report.rows {
        w.serialize(row).map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush()?;
    for row in &report.rows {
        eprintln!("{:<12} n={:<4} dice {:.4} ece {:.4} ueo {:.4}", row.degradation, row.images, row.dice, row.ece_pooled, row.ueo);
    }
    Ok(report)
}
