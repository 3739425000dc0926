use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, Metrics, DEFAULT_ZERO_THRESHOLD, REPORT_HORIZONS};
use super::model::{Forecaster, ForecasterConfig};
use super::repr::{extract_representations, RepresentationCache};
use crate::data::{iterate_samples, NormStats, SeriesDataset, SplitKind};
use crate::error::{Error, Result};
use crate::mae::MaeCheckpoint;
use crate::scalar::Scalar;
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastTrainConfig {
    /// Long-window length used to align samples (and to feed encoders).
    pub t_long: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Keep every `train_stride`-th training anchor.
    pub train_stride: usize,
    pub val_stride: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for ForecastTrainConfig {
    fn default() -> Self {
        Self {
            t_long: 864,
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            patience: 5,
            train_stride: 1,
            val_stride: 1,
            grad_clip: Some(5.0),
            seed: 0,
        }
    }
}

impl ForecastTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.t_long == 0 {
            errs.push("forecast.t_long must be positive".to_string());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            errs.push("forecast.epochs and forecast.batch_size must be positive".into());
        }
        if self.train_stride == 0 || self.val_stride == 0 {
            errs.push("forecast strides must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            errs.push(format!(
                "forecast.learning_rate = {} must be positive",
                self.learning_rate
            ));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            errs.push("forecast.grad_clip must be positive when set".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastEpoch {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    /// Normalized-space validation MAE.
    pub val_mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastHistory {
    pub step_losses: Vec<f64>,
    pub epochs: Vec<ForecastEpoch>,
    pub best_epoch: usize,
    pub best_val_mae: Option<f64>,
    pub stopped_early: bool,
}

impl ForecastHistory {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::from("step,train_loss,val_loss\n");
        for e in &self.epochs {
            let v = e.val_mae.map_or(String::new(), |v| format!("{v}"));
            out.push_str(&format!("{},{},{}\n", e.step, e.train_loss, v));
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Anchors of `split`, thinned to every `stride`-th.
pub fn split_anchors(
    ds: &SeriesDataset,
    cfg: &ForecasterConfig,
    t_long: usize,
    split: SplitKind,
    stride: usize,
) -> Vec<usize> {
    iterate_samples(ds, cfg.t_in, cfg.t_out, t_long, split)
        .anchors()
        .step_by(stride.max(1))
        .collect()
}

/// Rejects checkpoints that were not trained on `ds` or do not fit the
/// forecasting setup.
pub fn check_compatibility<S: Scalar>(ds: &SeriesDataset, encoders: &[&MaeCheckpoint<S>], t_long: usize) -> Result<()> {
    let hash = ds.content_hash();
    let mut problems = Vec::new();
    for c in encoders {
        let tag = c.axis().tag();
        if c.dataset_hash != hash {
            problems.push(format!(
                "{tag} checkpoint was trained on dataset {} (this one is {hash})",
                c.dataset_hash
            ));
        }
        if c.norm != ds.norm {
            problems.push(format!("{tag} checkpoint normalization differs from the dataset's"));
        }
        if c.model.config.patch.t_long != t_long {
            problems.push(format!(
                "{tag} checkpoint uses T_long = {} but forecasting uses {t_long}",
                c.model.config.patch.t_long
            ));
        }
        if c.model.config.channels != ds.channels() {
            problems.push(format!("{tag} checkpoint expects {} channels", c.model.config.channels));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "checkpoint/dataset mismatch: {}",
            problems.join("; ")
        )))
    }
}

/// `[branch][sample]` representations for `anchors`.
pub fn representations_for<S: Scalar>(
    ds: &SeriesDataset,
    encoders: &[&MaeCheckpoint<S>],
    anchors: &[usize],
    keep: usize,
    cache: Option<&RepresentationCache>,
) -> Result<Vec<Vec<Tensor<S>>>> {
    encoders
        .iter()
        .map(|c| extract_representations(ds, &c.model, anchors, keep, cache))
        .collect()
}

fn sample_reps<S: Scalar>(reps: &[Vec<Tensor<S>>], i: usize) -> Vec<Tensor<S>> {
    reps.iter().map(|r| r[i].clone()).collect()
}

/// Normalized-space predictions and targets for a set of anchors.
#[derive(Clone, Debug)]
pub struct SplitPredictions {
    pub anchors: Vec<usize>,
    /// `[samples, T̂, N, C]`.
    pub pred: Tensor<f64>,
    pub truth: Tensor<f64>,
}

pub fn predict_anchors<S: Scalar>(
    model: &Forecaster<S>,
    ds: &SeriesDataset,
    anchors: &[usize],
    reps: &[Vec<Tensor<S>>],
) -> Result<SplitPredictions> {
    let c = &model.config;
    let (n, ch) = (ds.n_nodes(), ds.channels());
    let mut pred = Vec::with_capacity(anchors.len() * c.t_out * n * ch);
    let mut truth = Vec::with_capacity(pred.capacity());
    for (i, &a) in anchors.iter().enumerate() {
        let short = ds.window(a + 1 - c.t_in, a + 1).cast::<S>();
        let y = model.predict(&short, &sample_reps(reps, i))?;
        pred.extend(y.data().iter().map(|v| v.as_f64()));
        truth.extend_from_slice(ds.window(a + 1, a + 1 + c.t_out).data());
    }
    let shape = vec![anchors.len(), c.t_out, n, ch];
    Ok(SplitPredictions {
        anchors: anchors.to_vec(),
        pred: Tensor::new(shape.clone(), pred)?,
        truth: Tensor::new(shape, truth)?,
    })
}

/// Metrics in normalized and in original units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub normalized: Metrics,
    pub raw: Metrics,
}

/// Evaluates normalized predictions. For raw units both arrays are
/// de-normalized and the MAPE threshold is scaled by the mean training std.
pub fn evaluate_predictions(
    p: &SplitPredictions,
    norm: Option<&NormStats>,
    zero_threshold: f64,
) -> Result<EvalMetrics> {
    let normalized = evaluate(&p.pred, &p.truth, zero_threshold, &REPORT_HORIZONS)?;
    let raw = match norm {
        None => normalized.clone(),
        Some(stats) => {
            let mut pred = p.pred.clone();
            let mut truth = p.truth.clone();
            stats.denormalize_slice(pred.data_mut());
            stats.denormalize_slice(truth.data_mut());
            let scale = stats.std.iter().sum::<f64>() / stats.std.len() as f64;
            evaluate(&pred, &truth, zero_threshold * scale, &REPORT_HORIZONS)?
        }
    };
    Ok(EvalMetrics { normalized, raw })
}

/// Trains the predictor (plus one projection per encoder) with an L1 loss
/// on the normalized target. Encoders are only read. Returns the
/// parameters of the epoch with the lowest validation MAE.
pub fn train_forecaster<S: Scalar>(
    ds: &SeriesDataset,
    encoders: &[&MaeCheckpoint<S>],
    fcfg: &ForecasterConfig,
    tcfg: &ForecastTrainConfig,
    cache: Option<&RepresentationCache>,
) -> Result<(Forecaster<S>, ForecastHistory)> {
    fcfg.validate()?;
    tcfg.validate()?;
    if !ds.is_normalized() {
        log::warn!("training the forecaster on a series that is not Z-scored");
    }
    if ds.channels() != fcfg.channels {
        return Err(Error::Data(format!(
            "dataset has {} channels, forecaster expects {}",
            ds.channels(),
            fcfg.channels
        )));
    }
    check_compatibility(ds, encoders, tcfg.t_long)?;
    let branches: Vec<_> = encoders
        .iter()
        .map(|c| (c.axis(), c.model.config.patch.embed_dim))
        .collect();
    let mut model = Forecaster::<S>::new(fcfg.clone(), &branches, tcfg.seed)?;

    let train = split_anchors(ds, fcfg, tcfg.t_long, SplitKind::Train, tcfg.train_stride);
    if train.is_empty() {
        return Err(Error::Data("training split holds no forecasting sample".into()));
    }
    let val = split_anchors(ds, fcfg, tcfg.t_long, SplitKind::Val, tcfg.val_stride);
    let train_reps = representations_for(ds, encoders, &train, fcfg.truncate, cache)?;
    let val_reps = representations_for(ds, encoders, &val, fcfg.truncate, cache)?;

    let adam = AdamConfig {
        learning_rate: tcfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&model.store, adam);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(7));
    let mut history = ForecastHistory {
        step_losses: Vec::new(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_mae: None,
        stopped_early: false,
    };
    let mut best = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut steps) = (0.0, 0usize);
        for batch in order.chunks(tcfg.batch_size) {
            model.store.zero_grad();
            let mut batch_loss = 0.0;
            for &i in batch {
                let a = train[i];
                let short = ds.window(a + 1 - fcfg.t_in, a + 1).cast::<S>();
                let target = ds.window(a + 1, a + 1 + fcfg.t_out).cast::<S>();
                let mut tape = Tape::new();
                let y = model.forward(&mut tape, &short, &sample_reps(&train_reps, i))?;
                let t = tape.constant(target);
                let loss = tape.l1_loss(y, t)?;
                let lv = tape.value(loss).item().as_f64();
                if !lv.is_finite() {
                    return Err(Error::Divergence {
                        step: history.step_losses.len(),
                        loss: lv,
                    });
                }
                batch_loss += lv;
                tape.backward(loss)?.accumulate_into(&tape, &mut model.store);
            }
            let b = batch.len() as f64;
            model.store.scale_grads(S::lit(1.0 / b));
            if let Some(clip) = tcfg.grad_clip {
                model.store.clip_grad_norm(clip);
            }
            adam_step(&mut model.store, &mut state)?;
            history.step_losses.push(batch_loss / b);
            total += batch_loss / b;
            steps += 1;
        }
        model.store.zero_grad();
        let val_mae = if val.is_empty() {
            None
        } else {
            let p = predict_anchors(&model, ds, &val, &val_reps)?;
            Some(evaluate(&p.pred, &p.truth, DEFAULT_ZERO_THRESHOLD, &[])?.overall.mae)
        };
        let train_loss = total / steps.max(1) as f64;
        log::info!(
            "forecast epoch {epoch}: train {train_loss:.5} val {}",
            val_mae.map_or("-".into(), |v| format!("{v:.5}"))
        );
        history.epochs.push(ForecastEpoch {
            epoch,
            step: history.step_losses.len(),
            train_loss,
            val_mae,
        });
        let improved = match (val_mae, history.best_val_mae) {
            (Some(v), Some(b)) => v < b,
            _ => true,
        };
        if improved {
            history.best_epoch = epoch;
            history.best_val_mae = val_mae;
            best = Some(model.store.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tcfg.patience.max(1) {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some(store) = best {
        model.store = store;
    }
    Ok((model, history))
}
