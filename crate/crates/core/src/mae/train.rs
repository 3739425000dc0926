use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{MaeConfig, MaskedAutoencoder};
use crate::data::SeriesDataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{adam_step, AdamConfig, AdamState, ParamStore, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Spacing between consecutive training window starts.
    pub stride: usize,
    /// Cap on windows visited per epoch (a random subset); `None` visits all.
    pub windows_per_epoch: Option<usize>,
    pub learning_rate: f64,
    /// Joint gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Number of validation windows, each with a fixed mask.
    pub val_windows: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            stride: 12,
            windows_per_epoch: None,
            learning_rate: 1e-3,
            grad_clip: Some(5.0),
            val_windows: 16,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("pretrain.epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            errs.push("pretrain.batch_size must be positive".into());
        }
        if self.stride == 0 {
            errs.push("pretrain.stride must be positive".into());
        }
        if self.windows_per_epoch == Some(0) {
            errs.push("pretrain.windows_per_epoch must be positive when set".into());
        }
        if !(self.learning_rate > 0.0) {
            errs.push(format!(
                "pretrain.learning_rate = {} must be positive",
                self.learning_rate
            ));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            errs.push("pretrain.grad_clip must be positive when set".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Global optimizer step count at the end of the epoch.
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainHistory {
    /// Batch-mean training loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
}

impl PretrainHistory {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_loss)
    }

    /// `step,train_loss,val_loss`, one row per epoch.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,train_loss,val_loss")?;
        for e in &self.epochs {
            let val = e.val_loss.map_or(String::new(), |v| format!("{v}"));
            writeln!(f, "{},{},{}", e.step, e.train_loss, val)?;
        }
        Ok(())
    }
}

/// Start steps of long windows lying entirely inside the training split.
pub fn train_window_starts(ds: &SeriesDataset, t_long: usize, stride: usize) -> Vec<usize> {
    let train = ds.splits().train;
    if train.len() < t_long {
        return Vec::new();
    }
    (train.start..=train.end - t_long).step_by(stride.max(1)).collect()
}

/// Up to `count` evenly spaced long windows ending inside the validation
/// split. Windows may reach back into the training split.
pub fn val_window_starts(ds: &SeriesDataset, t_long: usize, count: usize) -> Vec<usize> {
    let val = ds.splits().val;
    let lo = (val.start + 1).max(t_long);
    if count == 0 || val.end < lo {
        return Vec::new();
    }
    let ends = val.end - lo + 1;
    let take = count.min(ends);
    let mut out: Vec<usize> = (0..take)
        .map(|i| {
            let off = if take == 1 {
                ends - 1
            } else {
                i * (ends - 1) / (take - 1)
            };
            lo + off - t_long
        })
        .collect();
    out.dedup();
    out
}

/// Mask seeds for the fixed validation masks.
fn val_mask_seed(seed: u64, i: usize) -> u64 {
    seed ^ 0x5eed_0000_0000_0000 ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Mean masked loss over fixed validation windows.
pub fn validation_loss<S: Scalar>(
    model: &MaskedAutoencoder<S>,
    ds: &SeriesDataset,
    starts: &[usize],
    seed: u64,
) -> Result<Option<f64>> {
    if starts.is_empty() {
        return Ok(None);
    }
    let t_long = model.config.patch.t_long;
    let mut total = 0.0;
    for (i, &s) in starts.iter().enumerate() {
        let x = ds.window(s, s + t_long).cast::<S>();
        let spec = model.sample_mask(ds.n_nodes(), val_mask_seed(seed, i))?;
        total += model.reconstruct(&x, &spec)?.2;
    }
    Ok(Some(total / starts.len() as f64))
}

/// Trains one autoencoder. Every window gets a fresh mask; gradients of a
/// batch are averaged before a single Adam step. The returned model holds
/// the parameters of the epoch with the lowest validation loss (the last
/// epoch when there is no validation window).
pub fn pretrain<S: Scalar>(
    ds: &SeriesDataset,
    mae: &MaeConfig,
    cfg: &PretrainConfig,
) -> Result<(MaskedAutoencoder<S>, PretrainHistory)> {
    mae.validate()?;
    cfg.validate()?;
    if !ds.is_normalized() {
        log::warn!("pre-training on a series that is not Z-scored");
    }
    if ds.channels() != mae.channels {
        return Err(Error::Data(format!(
            "dataset has {} channels, model expects {}",
            ds.channels(),
            mae.channels
        )));
    }
    let t_long = mae.patch.t_long;
    let starts = train_window_starts(ds, t_long, cfg.stride);
    if starts.is_empty() {
        return Err(Error::Data(format!(
            "training split of length {} cannot host a window of {} steps",
            ds.splits().train.len(),
            t_long
        )));
    }
    let val_starts = val_window_starts(ds, t_long, cfg.val_windows);

    let mut model = MaskedAutoencoder::<S>::new(mae.clone(), cfg.seed)?;
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&model.store, adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));

    let mut history = PretrainHistory {
        step_losses: Vec::new(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: None,
    };
    let mut best: Option<ParamStore<S>> = None;

    for epoch in 0..cfg.epochs {
        let mut order = starts.clone();
        order.shuffle(&mut rng);
        if let Some(cap) = cfg.windows_per_epoch {
            order.truncate(cap);
        }
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            model.store.zero_grad();
            let mut batch_loss = 0.0;
            for &s in batch {
                let x = ds.window(s, s + t_long).cast::<S>();
                let spec = model.sample_mask(ds.n_nodes(), rng.gen())?;
                let mut tape = Tape::new();
                let (loss, _) = model.forward_loss(&mut tape, &x, &spec)?;
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
            if let Some(clip) = cfg.grad_clip {
                let norm = model.store.clip_grad_norm(clip);
                if !norm.is_finite() {
                    return Err(Error::Divergence {
                        step: history.step_losses.len(),
                        loss: norm,
                    });
                }
            }
            adam_step(&mut model.store, &mut state)?;
            batch_loss /= b;
            history.step_losses.push(batch_loss);
            epoch_total += batch_loss;
            epoch_steps += 1;
        }
        model.store.zero_grad();
        let val = validation_loss(&model, ds, &val_starts, cfg.seed)?;
        let train_loss = epoch_total / epoch_steps.max(1) as f64;
        log::info!(
            "{} epoch {}: train {:.5} val {}",
            mae.axis.tag(),
            epoch,
            train_loss,
            val.map_or("-".into(), |v| format!("{v:.5}"))
        );
        history.epochs.push(EpochRecord {
            epoch,
            step: history.step_losses.len(),
            train_loss,
            val_loss: val,
        });
        let improved = match (val, history.best_val_loss) {
            (Some(v), Some(b)) => v < b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            history.best_epoch = epoch;
            history.best_val_loss = val;
            best = Some(model.store.clone());
        }
    }
    if let Some(store) = best {
        model.store = store;
    }
    Ok((model, history))
}
