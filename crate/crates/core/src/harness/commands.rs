use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{AblationMode, DataSource, ExperimentConfig};
use super::report::{
    read_json, write_json, Comparison, DatasetInfo, Environment, EvalReport, ForecastRunReport, MirageMetrics,
    PhaseReport, PretrainReport, ReportSummary, RunReport, SplitReport, SweepReport, SweepRow, FIRST_LOSSES,
};
use crate::container;
use crate::data::{
    fit_and_apply_zscore, load_dataset, read_manifest, save_binary, save_csv, synth_generate, write_manifest,
    DataFormat, DataLayout, MirageManifest, NanPolicy, SeriesDataset, SplitKind, SynthSpec,
};
use crate::error::{Error, Result};
use crate::forecast::{
    evaluate_predictions, predict_anchors, representations_for, split_anchors, train_forecaster, Forecaster,
    ForecasterCheckpoint, ForecasterConfig, RepresentationCache, SplitPredictions,
};
use crate::mae::{pretrain, train_window_starts, val_window_starts, MaeCheckpoint, MaskAxis, TrainingMeta};
use crate::scalar::{Precision, Scalar};

pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_REPORT_FILE: &str = "run_report.json";
pub const PRETRAIN_REPORT_FILE: &str = "pretrain/report.json";
pub const PREDICTIONS_KIND: &str = "predictions";
pub const SWEEP_RATIOS: [f64; 3] = [0.25, 0.5, 0.75];
/// Mirage overlays written by `report`.
pub const MAX_MIRAGE_OVERLAYS: usize = 8;

const NO_PRETRAIN_NOTICE: &str = "ablation mode \"none\": no autoencoder is pre-trained and no checkpoint is written";

macro_rules! with_precision {
    ($p:expr, $f:ident ( $($arg:expr),* $(,)? )) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

pub fn checkpoint_path(axis: MaskAxis) -> String {
    format!("pretrain/{}.ckpt", axis.tag())
}

pub fn pretrain_loss_path(axis: MaskAxis) -> String {
    format!("pretrain/loss_{}.csv", axis.tag())
}

pub fn forecaster_path(run: &str) -> String {
    format!("forecast/{run}.ckpt")
}

pub fn forecast_loss_path(run: &str) -> String {
    format!("forecast/loss_{run}.csv")
}

pub fn predictions_path(run: &str, split: SplitKind) -> String {
    format!("forecast/pred_{run}_{}.bin", split_tag(split))
}

fn split_tag(split: SplitKind) -> &'static str {
    match split {
        SplitKind::Train => "train",
        SplitKind::Val => "val",
        SplitKind::Test => "test",
    }
}

/// Forecasting runs a config asks for, in training order.
pub fn run_names(cfg: &ExperimentConfig) -> Vec<&'static str> {
    let mut names = Vec::new();
    if cfg.ablation != AblationMode::None {
        names.push("augmented");
    }
    if cfg.ablation == AblationMode::None || cfg.compare_baseline {
        names.push("baseline");
    }
    names
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn first_losses(losses: &[f64]) -> Vec<f64> {
    losses.iter().take(FIRST_LOSSES).copied().collect()
}

/// A normalized series together with its mirage manifest (empty when the
/// source has none).
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: SeriesDataset,
    pub manifest: MirageManifest,
}

impl Prepared {
    pub fn info(&self) -> DatasetInfo {
        let ds = &self.dataset;
        DatasetInfo {
            hash: ds.content_hash(),
            t_total: ds.t_total(),
            n_nodes: ds.n_nodes(),
            channels: ds.channels(),
            splits: ds.splits(),
            norm: ds.norm.clone(),
            mirage_pairs: self.manifest.pairs.len(),
        }
    }
}

/// Loads or generates the series and Z-scores it with training statistics.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (raw, manifest) = match &cfg.data {
        DataSource::Synth(s) => {
            let out = synth_generate(&s.to_spec())?;
            (out.dataset, out.manifest)
        }
        DataSource::File { path, manifest, layout } => {
            let ds = load_dataset(path, layout)?;
            let m = match manifest {
                Some(p) => {
                    read_manifest(p).map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", p.display())))?
                }
                None => MirageManifest::default(),
            };
            (ds, m)
        }
    };
    Ok(Prepared {
        dataset: fit_and_apply_zscore(&raw)?,
        manifest,
    })
}

fn write_config_snapshot(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(run_dir)
        .map_err(|e| Error::Data(format!("cannot create output directory {}: {e}", run_dir.display())))?;
    let mut snap = cfg.clone();
    if let DataSource::File { path, manifest, .. } = &mut snap.data {
        for p in std::iter::once(path).chain(manifest.as_mut()) {
            *p = std::path::absolute(&*p)?;
        }
    }
    std::fs::write(run_dir.join(CONFIG_FILE), snap.to_toml()?)?;
    Ok(())
}

// ---------------------------------------------------------------- synth

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthArtifacts {
    pub dataset: PathBuf,
    pub manifest: PathBuf,
    pub spec: PathBuf,
    /// Experiment config pointing at the written files.
    pub config: PathBuf,
    pub t_total: usize,
    pub n_nodes: usize,
    pub mirage_pairs: usize,
}

/// Reads a generator spec: a full [`SynthSpec`] (JSON or TOML) or the
/// compact preset form used in experiment configs.
pub fn load_synth_spec(path: &Path) -> Result<SynthSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
    if path.extension().is_some_and(|e| e == "json") {
        return serde_json::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]));
    }
    if let Ok(spec) = toml::from_str::<SynthSpec>(&text) {
        return Ok(spec);
    }
    toml::from_str::<super::config::SynthSource>(&text)
        .map(|s| s.to_spec())
        .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))
}

/// Generates a synthetic series and writes it, its mirage manifest, the
/// expanded spec and a ready-to-use experiment config into `out_dir`.
pub fn cmd_synth(spec: &SynthSpec, out_dir: &Path, format: DataFormat) -> Result<SynthArtifacts> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Data(format!("cannot create {}: {e}", out_dir.display())))?;
    let out = synth_generate(spec)?;
    let ds = &out.dataset;
    let file = match format {
        DataFormat::Binary => "dataset.bin",
        DataFormat::Csv => "dataset.csv",
    };
    let dataset = out_dir.join(file);
    match format {
        DataFormat::Binary => save_binary(ds, &dataset),
        DataFormat::Csv => save_csv(ds, &dataset),
    }
    .map_err(|e| Error::Data(format!("cannot write {}: {e}", dataset.display())))?;
    let manifest = out_dir.join("manifest.csv");
    write_manifest(&out.manifest, &manifest)?;
    let spec_path = out_dir.join("spec.json");
    write_json(&spec_path, spec)?;

    let config = ExperimentConfig {
        data: DataSource::File {
            path: PathBuf::from(file),
            manifest: Some(PathBuf::from("manifest.csv")),
            layout: DataLayout {
                format,
                t_total: Some(ds.t_total()),
                n_nodes: ds.n_nodes(),
                channels: ds.channels(),
                nan_policy: NanPolicy::Reject,
                interval_minutes: ds.interval_minutes,
                split_ratios: ds.split_ratios,
            },
        },
        ..ExperimentConfig::default()
    };
    let config_path = out_dir.join("experiment.toml");
    std::fs::write(&config_path, config.to_toml()?)?;
    Ok(SynthArtifacts {
        dataset,
        manifest,
        spec: spec_path,
        config: config_path,
        t_total: ds.t_total(),
        n_nodes: ds.n_nodes(),
        mirage_pairs: out.manifest.pairs.len(),
    })
}

// ------------------------------------------------------------- pretrain

fn axis_seed(seed: u64, axis: MaskAxis) -> u64 {
    seed.wrapping_add(match axis {
        MaskAxis::Spatial => 0,
        MaskAxis::Temporal => 1,
        MaskAxis::Mixed => 2,
    })
}

fn pretrain_axes<S: Scalar>(
    cfg: &ExperimentConfig,
    ds: &SeriesDataset,
    run_dir: &Path,
    axes: &[MaskAxis],
) -> Result<Vec<(PhaseReport, f64)>> {
    let job = |axis: MaskAxis| -> Result<(PhaseReport, f64)> {
        let t = Instant::now();
        let mae = cfg.mae_config(axis);
        let pcfg = crate::mae::PretrainConfig {
            seed: axis_seed(cfg.pretrain.seed, axis),
            ..cfg.pretrain.clone()
        };
        let (model, history) = pretrain::<S>(ds, &mae, &pcfg)?;
        let (ckpt_rel, csv_rel) = (checkpoint_path(axis), pretrain_loss_path(axis));
        let ckpt = MaeCheckpoint {
            model,
            norm: ds.norm.clone(),
            dataset_hash: ds.content_hash(),
            training: TrainingMeta {
                epochs: history.epochs.len(),
                seed: pcfg.seed,
                final_loss: history.final_loss(),
                best_epoch: history.best_epoch,
                best_val_loss: history.best_val_loss,
            },
        };
        ckpt.save(&run_dir.join(&ckpt_rel))?;
        history.write_csv(&run_dir.join(&csv_rel))?;
        let phase = PhaseReport {
            name: format!("pretrain-{}", axis.tag()),
            steps: history.step_losses.len(),
            epochs: history.epochs.len(),
            first_losses: first_losses(&history.step_losses),
            final_loss: history.final_loss(),
            best_epoch: history.best_epoch,
            best_val: history.best_val_loss,
            stopped_early: false,
            loss_csv: csv_rel,
            checkpoint: ckpt_rel,
        };
        Ok((phase, secs(t)))
    };
    if cfg.parallel_pretrain && axes.len() > 1 {
        let job = &job;
        std::thread::scope(|scope| {
            let handles: Vec<_> = axes.iter().map(|&a| scope.spawn(move || job(a))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("pre-training worker panicked"))
                .collect()
        })
    } else {
        axes.iter().map(|&a| job(a)).collect()
    }
}

/// Pre-trains the autoencoders the ablation mode asks for and writes their
/// checkpoints, loss curves and `pretrain/report.json`.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PretrainReport> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    let t0 = Instant::now();
    let data = prepare_data(cfg)?;
    let mut timings = BTreeMap::from([("data".to_string(), secs(t0))]);
    write_config_snapshot(cfg, &run_dir)?;

    let axes = cfg.ablation.axes();
    for stale in [MaskAxis::Spatial, MaskAxis::Temporal, MaskAxis::Mixed] {
        let p = run_dir.join(checkpoint_path(stale));
        if !axes.contains(&stale) && p.exists() {
            log::info!("removing {} left by an earlier run", p.display());
            std::fs::remove_file(&p)?;
        }
    }
    let mut phases = Vec::new();
    let mut notice = None;
    if axes.is_empty() {
        log::warn!("{NO_PRETRAIN_NOTICE}");
        notice = Some(NO_PRETRAIN_NOTICE.to_string());
    } else {
        for (phase, t) in with_precision!(cfg.precision, pretrain_axes(cfg, &data.dataset, &run_dir, &axes))? {
            timings.insert(phase.name.clone(), t);
            phases.push(phase);
        }
    }
    let report = PretrainReport {
        config: cfg.clone(),
        dataset: data.info(),
        phases,
        notice,
        timings,
        environment: Environment::capture(cfg.precision),
    };
    write_json(&run_dir.join(PRETRAIN_REPORT_FILE), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- train

fn load_encoders<S: Scalar>(axes: &[MaskAxis], pretrain_root: &Path) -> Result<Vec<MaeCheckpoint<S>>> {
    let missing: Vec<String> = axes
        .iter()
        .map(|&a| pretrain_root.join(checkpoint_path(a)))
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "missing autoencoder checkpoints (run `pretrain` first): {}",
            missing.join(", ")
        )));
    }
    axes.iter()
        .map(|&a| MaeCheckpoint::<S>::load(&pretrain_root.join(checkpoint_path(a))))
        .collect()
}

fn cache_for(cfg: &ExperimentConfig, run_dir: &Path) -> Option<RepresentationCache> {
    cfg.cache_representations
        .then(|| RepresentationCache::new(run_dir.join("cache")))
}

fn predict_split<S: Scalar>(
    ds: &SeriesDataset,
    model: &Forecaster<S>,
    encoders: &[&MaeCheckpoint<S>],
    t_long: usize,
    split: SplitKind,
    cache: Option<&RepresentationCache>,
) -> Result<Option<SplitPredictions>> {
    let anchors = split_anchors(ds, &model.config, t_long, split, 1);
    if anchors.is_empty() {
        return Ok(None);
    }
    let reps = representations_for(ds, encoders, &anchors, model.config.truncate, cache)?;
    Ok(Some(predict_anchors(model, ds, &anchors, &reps)?))
}

/// Metrics over the samples whose anchors lie in a planted mirage.
pub fn mirage_metrics(
    p: &SplitPredictions,
    manifest: &MirageManifest,
    fcfg: &ForecasterConfig,
    ds: &SeriesDataset,
    zero_threshold: f64,
) -> Result<Option<MirageMetrics>> {
    let wanted: HashSet<usize> = manifest.mirage_anchors(fcfg.t_in, fcfg.t_out).into_iter().collect();
    let idx: Vec<usize> = p
        .anchors
        .iter()
        .enumerate()
        .filter(|(_, a)| wanted.contains(a))
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Ok(None);
    }
    let sub = SplitPredictions {
        anchors: idx.iter().map(|&i| p.anchors[i]).collect(),
        pred: p.pred.index_select(0, &idx)?,
        truth: p.truth.index_select(0, &idx)?,
    };
    let m = evaluate_predictions(&sub, ds.norm.as_ref(), zero_threshold)?;
    Ok(Some(MirageMetrics {
        samples: idx.len(),
        mae: m.normalized.overall.mae,
        raw_mae: m.raw.overall.mae,
    }))
}

#[derive(Serialize, Deserialize)]
struct PredictionMeta {
    run: String,
    split: SplitKind,
    anchors: Vec<usize>,
}

fn save_predictions(path: &Path, run: &str, split: SplitKind, p: &SplitPredictions) -> Result<()> {
    let meta = PredictionMeta {
        run: run.into(),
        split,
        anchors: p.anchors.clone(),
    };
    container::write(
        path,
        PREDICTIONS_KIND,
        serde_json::to_value(meta)?,
        &[("pred".to_string(), &p.pred), ("truth".to_string(), &p.truth)],
    )
}

/// Reads predictions written by `train`: `(anchors, pred, truth)`, the
/// arrays being normalized `[samples, T̂, N, C]`.
pub fn load_predictions(path: &Path) -> Result<SplitPredictions> {
    let (header, tensors) = container::read::<f64>(path)?;
    if header.kind != PREDICTIONS_KIND {
        return Err(Error::Format(format!("{} does not hold predictions", path.display())));
    }
    let meta: PredictionMeta = serde_json::from_value(header.meta)?;
    let mut map: HashMap<String, _> = tensors.into_iter().collect();
    let (Some(pred), Some(truth)) = (map.remove("pred"), map.remove("truth")) else {
        return Err(Error::Format(format!("{} lacks pred/truth arrays", path.display())));
    };
    Ok(SplitPredictions {
        anchors: meta.anchors,
        pred,
        truth,
    })
}

fn train_runs<S: Scalar>(
    cfg: &ExperimentConfig,
    data: &Prepared,
    run_dir: &Path,
) -> Result<(Vec<ForecastRunReport>, Vec<(String, f64)>)> {
    let ds = &data.dataset;
    let encoders = load_encoders::<S>(&cfg.ablation.axes(), run_dir)?;
    let cache = cache_for(cfg, run_dir);
    let tcfg = cfg.forecast_train_config();
    let mut reports = Vec::new();
    let mut timings = Vec::new();
    for name in run_names(cfg) {
        let t = Instant::now();
        let encs: Vec<&MaeCheckpoint<S>> = if name == "augmented" {
            encoders.iter().collect()
        } else {
            Vec::new()
        };
        let (model, history) = train_forecaster(ds, &encs, &cfg.forecaster, &tcfg, cache.as_ref())?;
        let ckpt_rel = forecaster_path(name);
        let loss_rel = forecast_loss_path(name);
        ForecasterCheckpoint {
            model,
            t_long: tcfg.t_long,
            norm: ds.norm.clone(),
            dataset_hash: ds.content_hash(),
            encoder_hashes: encs.iter().map(|c| c.model.fingerprint()).collect(),
            seed: tcfg.seed,
        }
        .save(&run_dir.join(&ckpt_rel))?;
        history.write_csv(&run_dir.join(&loss_rel))?;
        // evaluate what was stored, so every number can be reproduced from disk
        let saved = ForecasterCheckpoint::<S>::load(&run_dir.join(&ckpt_rel))?;
        let mut splits = Vec::new();
        for split in [SplitKind::Val, SplitKind::Test] {
            let Some(p) = predict_split(ds, &saved.model, &encs, tcfg.t_long, split, cache.as_ref())? else {
                continue;
            };
            let pred_rel = predictions_path(name, split);
            save_predictions(&run_dir.join(&pred_rel), name, split, &p)?;
            splits.push(SplitReport {
                split,
                samples: p.anchors.len(),
                metrics: evaluate_predictions(&p, ds.norm.as_ref(), cfg.zero_threshold)?,
                mirage: mirage_metrics(&p, &data.manifest, &cfg.forecaster, ds, cfg.zero_threshold)?,
                predictions: pred_rel,
            });
        }
        reports.push(ForecastRunReport {
            name: name.to_string(),
            branches: encs.iter().map(|c| c.axis()).collect(),
            phase: PhaseReport {
                name: format!("forecast-{name}"),
                steps: history.step_losses.len(),
                epochs: history.epochs.len(),
                first_losses: first_losses(&history.step_losses),
                final_loss: history.epochs.last().map_or(f64::NAN, |e| e.train_loss),
                best_epoch: history.best_epoch,
                best_val: history.best_val_mae,
                stopped_early: history.stopped_early,
                loss_csv: loss_rel,
                checkpoint: ckpt_rel,
            },
            splits,
        });
        timings.push((format!("forecast-{name}"), secs(t)));
    }
    Ok((reports, timings))
}

fn compare(runs: &[ForecastRunReport]) -> Option<Comparison> {
    let get = |name: &str| runs.iter().find(|r| r.name == name)?.split(SplitKind::Val);
    let (aug, base) = (get("augmented")?, get("baseline")?);
    let (a, b) = (aug.metrics.normalized.overall.mae, base.metrics.normalized.overall.mae);
    let am = aug.mirage.as_ref().map(|m| m.mae);
    let bm = base.mirage.as_ref().map(|m| m.mae);
    Some(Comparison {
        augmented_mae: a,
        baseline_mae: b,
        mae_improvement: 1.0 - a / b,
        augmented_mirage_mae: am,
        baseline_mirage_mae: bm,
        mirage_improvement: am.zip(bm).map(|(a, b)| 1.0 - a / b),
    })
}

/// Trains the forecaster (and the baseline when comparing) on top of the
/// checkpoints in the run directory, evaluates both on the validation and
/// test splits and writes `run_report.json`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    let t0 = Instant::now();
    let data = prepare_data(cfg)?;
    let mut timings = BTreeMap::from([("data".to_string(), secs(t0))]);
    write_config_snapshot(cfg, &run_dir)?;

    let mut notices = Vec::new();
    let mut pretrain_phases = Vec::new();
    if cfg.ablation == AblationMode::None {
        notices.push(NO_PRETRAIN_NOTICE.to_string());
    } else {
        let path = run_dir.join(PRETRAIN_REPORT_FILE);
        match read_json::<PretrainReport>(&path) {
            Ok(p) => {
                timings.extend(p.timings.into_iter().filter(|(k, _)| k != "data"));
                pretrain_phases = p.phases;
            }
            Err(_) => notices.push(format!(
                "no readable {PRETRAIN_REPORT_FILE}; pre-training phases not reported"
            )),
        }
    }
    let (runs, run_timings) = with_precision!(cfg.precision, train_runs(cfg, &data, &run_dir))?;
    timings.extend(run_timings);
    let report = RunReport {
        config: cfg.clone(),
        dataset: data.info(),
        pretrain: pretrain_phases,
        comparison: compare(&runs),
        runs,
        notices,
        timings,
        environment: Environment::capture(cfg.precision),
    };
    write_json(&run_dir.join(RUN_REPORT_FILE), &report)?;
    Ok(report)
}

/// `pretrain` followed by `train`.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunReport> {
    cmd_pretrain(cfg)?;
    cmd_train(cfg)
}

// ----------------------------------------------------------------- eval

/// The checkpoint `eval` uses when none is named.
pub fn default_forecaster(run_dir: &Path) -> PathBuf {
    let aug = run_dir.join(forecaster_path("augmented"));
    if aug.exists() {
        aug
    } else {
        run_dir.join(forecaster_path("baseline"))
    }
}

fn per_sample_csv(p: &SplitPredictions, ds: &SeriesDataset, mirage: &HashSet<usize>) -> String {
    let c = ds.channels();
    let std = ds.norm.as_ref().map(|n| n.std.clone()).unwrap_or_else(|| vec![1.0; c]);
    let per = p.pred.numel() / p.anchors.len().max(1);
    let mut out = String::from("anchor,mae,rmse,raw_mae,mirage\n");
    for (i, &a) in p.anchors.iter().enumerate() {
        let span = i * per..(i + 1) * per;
        let (mut abs, mut sq, mut raw) = (0.0, 0.0, 0.0);
        for (k, (x, y)) in p.pred.data()[span.clone()]
            .iter()
            .zip(&p.truth.data()[span])
            .enumerate()
        {
            let e = x - y;
            abs += e.abs();
            sq += e * e;
            raw += e.abs() * std[k % c];
        }
        let n = per as f64;
        let _ = writeln!(
            out,
            "{a},{},{},{},{}",
            abs / n,
            (sq / n).sqrt(),
            raw / n,
            mirage.contains(&a)
        );
    }
    out
}

fn eval_impl<S: Scalar>(
    cfg: &ExperimentConfig,
    data: &Prepared,
    ckpt_path: &Path,
    split: SplitKind,
    out_dir: &Path,
) -> Result<EvalReport> {
    let ds = &data.dataset;
    let ckpt = ForecasterCheckpoint::<S>::load(ckpt_path)?;
    let mut problems = Vec::new();
    if ckpt.dataset_hash != ds.content_hash() {
        problems.push(format!(
            "forecaster was trained on dataset {} (this one is {})",
            ckpt.dataset_hash,
            ds.content_hash()
        ));
    }
    if ckpt.norm != ds.norm {
        problems.push("forecaster normalization differs from the dataset's".to_string());
    }
    if !problems.is_empty() {
        return Err(Error::Data(format!(
            "checkpoint/dataset mismatch: {}",
            problems.join("; ")
        )));
    }
    let run_root = ckpt_path.parent().and_then(Path::parent).unwrap_or(Path::new("."));
    let axes: Vec<MaskAxis> = ckpt.model.branches.iter().map(|b| b.axis).collect();
    let encoders = load_encoders::<S>(&axes, run_root)?;
    for (enc, want) in encoders.iter().zip(&ckpt.encoder_hashes) {
        if &enc.model.fingerprint() != want {
            return Err(Error::Data(format!(
                "{} checkpoint is not the encoder this forecaster was trained with",
                enc.axis().tag()
            )));
        }
    }
    let encs: Vec<&MaeCheckpoint<S>> = encoders.iter().collect();
    let cache = cache_for(cfg, run_root);
    let p = predict_split(ds, &ckpt.model, &encs, ckpt.t_long, split, cache.as_ref())?
        .ok_or_else(|| Error::Data(format!("the {} split holds no forecasting sample", split_tag(split))))?;
    let metrics = evaluate_predictions(&p, ds.norm.as_ref(), cfg.zero_threshold)?;
    let mirage = mirage_metrics(&p, &data.manifest, &ckpt.model.config, ds, cfg.zero_threshold)?;
    let mirage_set: HashSet<usize> = data
        .manifest
        .mirage_anchors(ckpt.model.config.t_in, ckpt.model.config.t_out)
        .into_iter()
        .collect();

    let tag = split_tag(split);
    let csv_name = format!("eval_{tag}_samples.csv");
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(&csv_name), per_sample_csv(&p, ds, &mirage_set))?;
    let train_split = split == SplitKind::Train;
    let warning = train_split.then(|| "evaluated on the training split; these numbers are not held-out".to_string());
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let report = EvalReport {
        checkpoint: ckpt_path.display().to_string(),
        dataset_hash: ds.content_hash(),
        split,
        train_split,
        warning,
        samples: p.anchors.len(),
        metrics,
        mirage,
        per_sample_csv: csv_name,
    };
    write_json(&out_dir.join(format!("eval_{tag}.json")), &report)?;
    Ok(report)
}

/// Evaluates a stored forecaster on one split of the configured dataset.
/// Writes `eval_<split>.json` and `eval_<split>_samples.csv` into
/// `out_dir` (the run directory by default).
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    split: SplitKind,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    let ckpt = checkpoint.map_or_else(|| default_forecaster(&run_dir), Path::to_path_buf);
    if !ckpt.exists() {
        return Err(Error::Data(format!(
            "forecaster checkpoint {} not found",
            ckpt.display()
        )));
    }
    let out = out_dir.map_or(run_dir, Path::to_path_buf);
    let data = prepare_data(cfg)?;
    with_precision!(cfg.precision, eval_impl(cfg, &data, &ckpt, split, &out))
}

// --------------------------------------------------------------- report

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v}"))
}

fn recon_overlay<S: Scalar>(cfg: &ExperimentConfig, ds: &SeriesDataset, ckpt_path: &Path) -> Result<String> {
    let ckpt = MaeCheckpoint::<S>::load(ckpt_path)?;
    let model = &ckpt.model;
    let (t_long, l) = (model.config.patch.t_long, model.config.patch.patch_len);
    let (n, c) = (ds.n_nodes(), ds.channels());
    let start = val_window_starts(ds, t_long, 1)
        .first()
        .or(train_window_starts(ds, t_long, 1).first())
        .copied()
        .ok_or_else(|| Error::Data("no complete long window for a reconstruction overlay".into()))?;
    let x = ds.window(start, start + t_long).cast::<S>();
    let spec = model.sample_mask(n, cfg.pretrain.seed)?;
    let (q_hat, _, _) = model.reconstruct(&x, &spec)?;
    let q = q_hat.cast::<f64>();
    let lc = l * c;
    let mut recon: Vec<Option<f64>> = vec![None; t_long * n * c];
    let mut put = |patch: usize, node: usize, row: &[f64]| {
        for (k, v) in row.iter().enumerate() {
            let (step, ch) = (patch * l + k / c, k % c);
            recon[(step * n + node) * c + ch] = Some(*v);
        }
    };
    let t_p = model.config.patch.num_patches();
    let m = spec.masked.len();
    let qd = q.data();
    match spec.axis {
        MaskAxis::Spatial => {
            for p in 0..t_p {
                for (j, &node) in spec.masked.iter().enumerate() {
                    let o = (p * m + j) * lc;
                    put(p, node, &qd[o..o + lc]);
                }
            }
        }
        MaskAxis::Temporal => {
            for (j, &p) in spec.masked.iter().enumerate() {
                for node in 0..n {
                    let o = (j * n + node) * lc;
                    put(p, node, &qd[o..o + lc]);
                }
            }
        }
        MaskAxis::Mixed => {
            for (j, &slot) in spec.masked.iter().enumerate() {
                put(slot / n, slot % n, &qd[j * lc..(j + 1) * lc]);
            }
        }
    }
    let denorm = |v: f64, ch: usize| ds.norm.as_ref().map_or(v, |s| s.denormalize(v, ch));
    let mut out = String::from("step");
    for node in 0..n {
        for ch in 0..c {
            let _ = write!(out, ",n{node}_c{ch}_truth,n{node}_c{ch}_recon,n{node}_c{ch}_masked");
        }
    }
    out.push('\n');
    for t in 0..t_long {
        let _ = write!(out, "{}", start + t);
        for node in 0..n {
            for ch in 0..c {
                let r = recon[(t * n + node) * c + ch];
                let truth = denorm(ds.value(start + t, node, ch), ch);
                let _ = write!(out, ",{truth},{},{}", cell(r.map(|v| denorm(v, ch))), r.is_some());
            }
        }
        out.push('\n');
    }
    Ok(out)
}

type RunPredictions = (String, HashMap<usize, Vec<f64>>);

fn mirage_overlays(cfg: &ExperimentConfig, data: &Prepared, runs: &[RunPredictions]) -> Vec<String> {
    let ds = &data.dataset;
    let (t_in, t_out) = (cfg.forecaster.t_in, cfg.forecaster.t_out);
    let (n, c) = (ds.n_nodes(), ds.channels());
    let denorm = |v: f64, ch: usize| ds.norm.as_ref().map_or(v, |s| s.denormalize(v, ch));
    let mut overlays = Vec::new();
    for pair in &data.manifest.pairs {
        if overlays.len() == MAX_MIRAGE_OVERLAYS {
            break;
        }
        let anchor_a = pair.divergence_step - 1;
        let Some(anchor_b) = (anchor_a + pair.window_start_b).checked_sub(pair.window_start_a) else {
            continue;
        };
        // the twin usually lies in another split; its prediction cells stay empty
        let available = runs.iter().all(|(_, m)| m.contains_key(&anchor_a));
        if runs.is_empty() || !available || anchor_a + 1 < t_in || anchor_b + 1 < t_in {
            continue;
        }
        let mut out = String::from("offset,step_a,step_b,horizon");
        for node in 0..n {
            for ch in 0..c {
                let _ = write!(out, ",n{node}_c{ch}_truth_a,n{node}_c{ch}_truth_b");
                for (name, _) in runs {
                    let _ = write!(out, ",n{node}_c{ch}_{name}_a,n{node}_c{ch}_{name}_b");
                }
            }
        }
        out.push('\n');
        let (sa, sb) = (anchor_a + 1 - t_in, anchor_b + 1 - t_in);
        for off in 0..t_in + t_out {
            let horizon = (off + 1).saturating_sub(t_in);
            let (ta, tb) = (sa + off, sb + off);
            let _ = write!(out, "{off},{ta},{tb},{horizon}");
            for node in 0..n {
                for ch in 0..c {
                    let truth = |t: usize| (t < ds.t_total()).then(|| denorm(ds.value(t, node, ch), ch));
                    let _ = write!(out, ",{},{}", cell(truth(ta)), cell(truth(tb)));
                    for (_, preds) in runs {
                        let at = |anchor: usize| {
                            let row = preds.get(&anchor).filter(|_| horizon > 0)?;
                            Some(denorm(row[((horizon - 1) * n + node) * c + ch], ch))
                        };
                        let _ = write!(out, ",{},{}", cell(at(anchor_a)), cell(at(anchor_b)));
                    }
                }
            }
            out.push('\n');
        }
        overlays.push(out);
    }
    overlays
}

/// Builds plot-ready CSVs under `<run_dir>/report`: reconstruction overlays
/// for each autoencoder, mirage-pair prediction overlays and copies of all
/// loss curves. Absent inputs are listed in the error (and in
/// `report/summary.json`); everything that can be built is still written.
pub fn cmd_report(run_dir: &Path) -> Result<ReportSummary> {
    let cfg_path = run_dir.join(CONFIG_FILE);
    if !cfg_path.exists() {
        return Err(Error::Data(format!("missing artifacts: {}", cfg_path.display())));
    }
    let cfg = ExperimentConfig::load(&cfg_path)?;
    let data = prepare_data(&cfg)?;
    let out = run_dir.join("report");
    std::fs::create_dir_all(&out)?;
    let mut summary = ReportSummary::default();
    let emit = |summary: &mut ReportSummary, name: String, text: &str| -> Result<()> {
        std::fs::write(out.join(&name), text)?;
        summary.written.push(format!("report/{name}"));
        Ok(())
    };

    let mut curves: Vec<String> = cfg.ablation.axes().into_iter().map(pretrain_loss_path).collect();
    curves.extend(run_names(&cfg).into_iter().map(forecast_loss_path));
    for rel in curves {
        match std::fs::read_to_string(run_dir.join(&rel)) {
            Ok(text) => emit(&mut summary, rel.replace('/', "_"), &text)?,
            Err(_) => summary.missing.push(rel),
        }
    }

    for axis in cfg.ablation.axes() {
        let rel = checkpoint_path(axis);
        let path = run_dir.join(&rel);
        if !path.exists() {
            summary.missing.push(rel);
            continue;
        }
        let text = with_precision!(cfg.precision, recon_overlay(&cfg, &data.dataset, &path))?;
        emit(&mut summary, format!("recon_{}.csv", axis.tag()), &text)?;
    }

    let mut runs: Vec<RunPredictions> = Vec::new();
    for name in run_names(&cfg) {
        let mut by_anchor = HashMap::new();
        for split in [SplitKind::Val, SplitKind::Test] {
            let rel = predictions_path(name, split);
            let path = run_dir.join(&rel);
            if !path.exists() {
                summary.missing.push(rel);
                continue;
            }
            let p = load_predictions(&path)?;
            let per = p.pred.numel() / p.anchors.len().max(1);
            for (i, a) in p.anchors.iter().enumerate() {
                by_anchor.insert(*a, p.pred.data()[i * per..(i + 1) * per].to_vec());
            }
        }
        runs.push((name.to_string(), by_anchor));
    }
    for (k, text) in mirage_overlays(&cfg, &data, &runs).iter().enumerate() {
        emit(&mut summary, format!("mirage_{k}.csv"), text)?;
    }

    write_json(&out.join("summary.json"), &summary)?;
    if summary.missing.is_empty() {
        Ok(summary)
    } else {
        Err(Error::Data(format!(
            "missing artifacts: {}",
            summary.missing.join(", ")
        )))
    }
}

// ---------------------------------------------------------------- sweep

/// Pre-trains and trains once per masking ratio, each in
/// `<run_dir>/sweep/r<ratio>`, and writes `sweep.csv` and `sweep.json`.
/// The baseline, which does not depend on the ratio, is trained once.
pub fn cmd_sweep(cfg: &ExperimentConfig, ratios: &[f64]) -> Result<SweepReport> {
    cfg.validate()?;
    if cfg.ablation == AblationMode::None {
        return Err(Error::Config(vec![
            "a masking-ratio sweep needs an ablation mode with pre-training".into(),
        ]));
    }
    if ratios.is_empty() {
        return Err(Error::Config(vec!["no masking ratio to sweep".into()]));
    }
    let mut rows = Vec::new();
    let mut baseline_val_mae = None;
    for (i, &r) in ratios.iter().enumerate() {
        let rel = format!("sweep/r{r}");
        let mut sub = cfg.clone();
        sub.mae.mask_ratio = r;
        sub.output_dir = cfg.output_dir.join(&rel);
        sub.compare_baseline = cfg.compare_baseline && i == 0;
        sub.validate()?;
        log::info!("sweep: mask ratio {r}");
        let report = cmd_run(&sub)?;
        if let Some(b) = report.run("baseline").and_then(|b| b.split(SplitKind::Val)) {
            baseline_val_mae = Some(b.metrics.normalized.overall.mae);
        }
        let aug = report
            .run("augmented")
            .ok_or_else(|| Error::Data("sweep run produced no augmented forecaster".into()))?;
        let val = aug
            .split(SplitKind::Val)
            .ok_or_else(|| Error::Data("validation split holds no forecasting sample".into()))?;
        let test = aug.split(SplitKind::Test).map(|t| &t.metrics.normalized.overall);
        rows.push(SweepRow {
            mask_ratio: r,
            val_mae: val.metrics.normalized.overall.mae,
            test_mae: test.map(|m| m.mae),
            test_rmse: test.map(|m| m.rmse),
            test_mape: test.and_then(|m| m.mape),
            val_mirage_mae: val.mirage.as_ref().map(|m| m.mae),
            run_dir: rel,
        });
    }
    let mut table = String::from("mask_ratio,val_mae,test_mae,test_rmse,test_mape,val_mirage_mae\n");
    for r in &rows {
        let _ = writeln!(
            table,
            "{},{},{},{},{},{}",
            r.mask_ratio,
            r.val_mae,
            cell(r.test_mae),
            cell(r.test_rmse),
            cell(r.test_mape),
            cell(r.val_mirage_mae)
        );
    }
    let report = SweepReport {
        rows,
        baseline_val_mae,
        table,
    };
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(run_dir.join("sweep.csv"), &report.table)?;
    write_json(&run_dir.join("sweep.json"), &report)?;
    Ok(report)
}
