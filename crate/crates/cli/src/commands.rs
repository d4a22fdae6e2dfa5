//! Subcommand bodies. Every score they report comes straight from
//! `segdiff_core::metrics`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use segdiff_core::diffusion::NoiseSchedule;
use segdiff_core::metrics::{evaluate, MetricReport};
use segdiff_core::netseg::checkpoint::{self, Checkpoint};
use segdiff_core::netseg::{infer, Ablation, SegModel, StepReport, TrainSample, Trainer};
use segdiff_core::seed::derive_named;
use segdiff_core::synthdata::io::{read_labels, write_labels};
use segdiff_core::synthdata::{load_samples, write_dataset, LoadedSample, Manifest, ScenarioConfig, Split, SplitMode};
use segdiff_core::{Error, LabelSequence, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "model.sdm";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const VAL_REPORT_FILE: &str = "val_metrics.json";
pub const ABLATION_FILE: &str = "ablation.json";

/// Environment variable capping the evaluation worker count.
pub const THREADS_ENV: &str = "SEGDIFF_THREADS";

/// Worker count from an optional flag, capped by `SEGDIFF_THREADS`.
pub fn worker_count(flag: Option<usize>) -> usize {
    let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok());
    let n = flag.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.map_or(n, |c| n.min(c)).max(1)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Contract(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn synth(out: &Path, scenario: &ScenarioConfig, samples: usize, split: SplitMode) -> Result<Manifest> {
    write_dataset(out, scenario, samples, split)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct LogLine {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub last_epoch_loss: Option<f64>,
    pub val: Option<MetricReport>,
}

fn load_split(manifest: &Path, split: Split) -> Result<Vec<LoadedSample>> {
    load_samples(manifest, Some(split))
}

fn check_data(cfg: &RunConfig, data: &[LoadedSample]) -> Result<()> {
    for s in data {
        if s.holistic.width() != cfg.model.input_dim || s.partial.width() != cfg.model.input_dim {
            return Err(Error::Config(format!(
                "model.input_dim is {} but sample {} has width {}",
                cfg.model.input_dim,
                s.entry.id,
                s.holistic.width()
            )));
        }
        if s.labels.classes() != cfg.model.classes {
            return Err(Error::Config(format!(
                "model.classes is {} but sample {} has {} classes",
                cfg.model.classes,
                s.entry.id,
                s.labels.classes()
            )));
        }
    }
    Ok(())
}

fn check_manifest(cfg: &RunConfig) -> Result<()> {
    let manifest = Manifest::read(&cfg.manifest)?;
    if let Some(mode) = cfg.split_mode {
        if manifest.split_mode != mode {
            return Err(Error::Config(format!(
                "config expects {mode:?} splits but the manifest has {:?}",
                manifest.split_mode
            )));
        }
    }
    Ok(())
}

fn trainer_for(cfg: &RunConfig, resume: Option<&Path>) -> Result<Trainer> {
    let Some(path) = resume else {
        let model = SegModel::new(cfg.model.clone(), cfg.seed)?;
        return Trainer::new(model, &cfg.diffusion, cfg.train.clone(), cfg.seed);
    };
    let ck = checkpoint::load(path)?;
    if ck.model.config != cfg.model {
        return Err(Error::Config(format!("{} was trained with a different model config", path.display())));
    }
    let adam = ck
        .adam
        .ok_or_else(|| Error::Contract(format!("{} holds no optimizer state", path.display())))?;
    Trainer::resume(ck.model, adam, ck.progress, &cfg.diffusion, cfg.train.clone(), cfg.seed)
}

fn save_checkpoint(path: &Path, trainer: &Trainer, cfg: &RunConfig) -> Result<()> {
    let ck = Checkpoint {
        model: trainer.model.clone(),
        adam: Some(trainer.adam.clone()),
        progress: trainer.progress,
        meta: serde_json::to_value(cfg).map_err(|e| Error::Contract(e.to_string()))?,
    };
    checkpoint::save(path, &ck)
}

/// Trains until `cfg.train.epochs` epochs are complete, checkpointing after
/// every epoch, then scores the validation split when it is non-empty.
/// `on_epoch` sees `(epoch, mean loss)`.
pub fn train(
    cfg: &RunConfig,
    resume: Option<&Path>,
    workers: usize,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_manifest(cfg)?;
    let loaded = load_split(&cfg.manifest, Split::Train)?;
    if loaded.is_empty() {
        return Err(Error::Contract(format!("{} has no training samples", cfg.manifest.display())));
    }
    check_data(cfg, &loaded)?;
    let data: Vec<TrainSample> = loaded
        .into_iter()
        .map(|s| TrainSample {
            holistic: s.holistic,
            partial: s.partial,
            labels: s.labels,
        })
        .collect();

    let mut trainer = trainer_for(cfg, resume)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let ck_path = cfg.output_dir.join(CHECKPOINT_FILE);
    let log_path = cfg.output_dir.join(LOG_FILE);
    let file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);

    let start = Instant::now();
    let mut last = None;
    while trainer.progress.epoch < cfg.train.epochs {
        let mut write_err = None;
        let loss = trainer.run_epoch(&data, |r: &StepReport| {
            let line = LogLine {
                step: r.step,
                epoch: r.epoch,
                loss: r.loss,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            let text = serde_json::to_string(&line).expect("log line serializes");
            if let Err(e) = writeln!(log, "{text}") {
                write_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = write_err {
            return Err(Error::io(&log_path, e));
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        save_checkpoint(&ck_path, &trainer, cfg)?;
        on_epoch(trainer.progress.epoch, loss);
        last = Some(loss);
    }
    if last.is_none() {
        save_checkpoint(&ck_path, &trainer, cfg)?;
    }

    let val_samples = load_split(&cfg.manifest, Split::Val)?;
    let val = if val_samples.is_empty() {
        None
    } else {
        let sched = cfg.diffusion.build()?;
        let report = score(&trainer.model, &sched, cfg.diffusion.sampling_steps, &val_samples, cfg.seed, workers)?;
        write_json(&cfg.output_dir.join(VAL_REPORT_FILE), &report)?;
        Some(report)
    };
    Ok(TrainOutcome {
        checkpoint: ck_path,
        log: log_path,
        last_epoch_loss: last,
        val,
    })
}

/// Seed of the reverse diffusion for one sample; depends only on the run
/// seed and the sample id, so results do not depend on worker count.
pub fn inference_seed(seed: u64, id: &str) -> u64 {
    derive_named(seed, &format!("infer/{id}"))
}

/// Binary predictions for `samples`, in order.
pub fn predict(
    model: &SegModel,
    sched: &NoiseSchedule,
    steps: usize,
    samples: &[LoadedSample],
    seed: u64,
    workers: usize,
) -> Result<Vec<LabelSequence>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        samples
            .par_iter()
            .map(|s| {
                infer(model, &s.holistic, &s.partial, sched, steps, inference_seed(seed, &s.entry.id))
                    .map(|r| r.labels)
            })
            .collect()
    })
}

fn report_with_ids(preds: &[LabelSequence], samples: &[LoadedSample]) -> Result<MetricReport> {
    let gts: Vec<LabelSequence> = samples.iter().map(|s| s.labels.clone()).collect();
    let mut report = evaluate(preds, &gts)?;
    for (m, s) in report.per_sample.iter_mut().zip(samples) {
        m.id = Some(s.entry.id.clone());
    }
    Ok(report)
}

fn score(
    model: &SegModel,
    sched: &NoiseSchedule,
    steps: usize,
    samples: &[LoadedSample],
    seed: u64,
    workers: usize,
) -> Result<MetricReport> {
    let preds = predict(model, sched, steps, samples, seed, workers)?;
    report_with_ids(&preds, samples)
}

/// Where predictions come from.
#[derive(Clone, Debug)]
pub enum Predictor {
    /// Run the model stored in a checkpoint.
    Checkpoint { path: PathBuf, seed: Option<u64> },
    /// Read `<dir>/<id>.sdl` for every sample.
    Files(PathBuf),
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub predictor: Predictor,
    pub manifest: PathBuf,
    pub split: Split,
    pub workers: usize,
    /// Writes each prediction as `<dir>/<id>.sdl`.
    pub pred_out: Option<PathBuf>,
}

pub fn eval(args: &EvalArgs) -> Result<MetricReport> {
    let samples = load_split(&args.manifest, args.split)?;
    if samples.is_empty() {
        return Err(Error::Contract(format!("split {:?} of {} is empty", args.split, args.manifest.display())));
    }
    let preds = match &args.predictor {
        Predictor::Files(dir) => samples
            .iter()
            .map(|s| read_labels(&dir.join(format!("{}.sdl", s.entry.id))))
            .collect::<Result<Vec<_>>>()?,
        Predictor::Checkpoint { path, seed } => {
            let ck = checkpoint::load(path)?;
            let run: RunConfig = serde_json::from_value(ck.meta.clone()).unwrap_or_default();
            let sched = run.diffusion.build()?;
            let seed = seed.unwrap_or(run.seed);
            predict(&ck.model, &sched, run.diffusion.sampling_steps, &samples, seed, args.workers)?
        }
    };
    if let Some(dir) = &args.pred_out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (p, s) in preds.iter().zip(&samples) {
            write_labels(&dir.join(format!("{}.sdl", s.entry.id)), p)?;
        }
    }
    report_with_ids(&preds, &samples)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: MetricReport,
}

/// Trains and scores each variant with the same data and seed; each run
/// lives in `<output_dir>/<variant>`.
pub fn ablate(
    cfg: &RunConfig,
    variants: &[String],
    split: Split,
    workers: usize,
    mut on_variant: impl FnMut(&str),
) -> Result<Vec<AblationRow>> {
    let flags = variants
        .iter()
        .map(|v| Ablation::from_variant(v))
        .collect::<Result<Vec<_>>>()?;
    if variants.is_empty() {
        return Err(Error::Config("no variants given".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (name, ablation) in variants.iter().zip(flags) {
        on_variant(name);
        let mut run = cfg.clone();
        run.model.ablation = ablation;
        run.output_dir = cfg.output_dir.join(name);
        let outcome = train(&run, None, workers, |_, _| {})?;
        let report = eval(&EvalArgs {
            predictor: Predictor::Checkpoint {
                path: outcome.checkpoint,
                seed: None,
            },
            manifest: run.manifest.clone(),
            split,
            workers,
            pred_out: None,
        })?;
        rows.push(AblationRow {
            variant: name.clone(),
            report,
        });
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write_json(&cfg.output_dir.join(ABLATION_FILE), &rows)?;
    Ok(rows)
}

/// Markdown table of ablation rows.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("| variant | ACC | EDIT | F1@10 | F1@25 | F1@50 |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let m = &r.report;
        out.push_str(&format!(
            "| {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
            r.variant, m.acc, m.edit, m.f1_10, m.f1_25, m.f1_50
        ));
    }
    out
}

pub fn write_report(path: &Path, report: &MetricReport) -> Result<()> {
    write_json(path, report)
}
