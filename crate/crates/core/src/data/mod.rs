//! Spatiotemporal series: storage, normalization, temporal splits, sample
//! windows, file formats and the synthetic generator.

mod io;
mod samples;
mod synth;

pub use io::{load_dataset, save_binary, save_csv, DataFormat, DataLayout, NanPolicy};
pub use samples::{iterate_samples, ForecastSample, SampleIter};
pub use synth::{read_manifest, synth_generate, write_manifest, MirageManifest, MiragePair, SynthOutput, SynthSpec};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel Z-score statistics, fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn normalize(&self, value: f64, channel: usize) -> f64 {
        (value - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, value: f64, channel: usize) -> f64 {
        value * self.std[channel] + self.mean[channel]
    }

    /// Inverts the transform over a `[..., C]` buffer.
    pub fn denormalize_slice(&self, values: &mut [f64]) {
        let c = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            *v = self.denormalize(*v, i % c);
        }
    }
}

/// Contiguous, ordered train/validation/test ranges covering `[0, T_total)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl Splits {
    pub fn range(&self, kind: SplitKind) -> Range<usize> {
        match kind {
            SplitKind::Train => self.train.clone(),
            SplitKind::Val => self.val.clone(),
            SplitKind::Test => self.test.clone(),
        }
    }
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" | "validation" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// Boundaries are `floor(T_total · cumulative ratio)`; the last one is
/// pinned to `T_total`.
pub fn split(t_total: usize, ratios: [f64; 3]) -> Result<Splits> {
    if let Some(r) = ratios.iter().find(|r| !(**r >= 0.0)) {
        return Err(Error::InvalidArgument(format!("split ratio {r} is negative")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios {:?} sum to {}, not 1",
            ratios, total
        )));
    }
    // The small slack absorbs representation error in sums like 0.7 + 0.1.
    let cut = |cum: f64| ((t_total as f64) * cum + 1e-9).floor() as usize;
    let a = cut(ratios[0]).min(t_total);
    let b = cut(ratios[0] + ratios[1]).clamp(a, t_total);
    Ok(Splits {
        train: 0..a,
        val: a..b,
        test: b..t_total,
    })
}

/// Raw or normalized series `X ∈ R^{T_total×N×C}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    data: Tensor<f64>,
    pub interval_minutes: u32,
    pub split_ratios: [f64; 3],
    /// Present once [`fit_and_apply_zscore`] has run; `data` is then normalized.
    pub norm: Option<NormStats>,
}

impl SeriesDataset {
    pub fn new(data: Tensor<f64>, interval_minutes: u32, split_ratios: [f64; 3]) -> Result<Self> {
        if data.rank() != 3 || data.shape().iter().take(2).any(|&d| d == 0) || data.shape()[2] == 0 {
            return Err(Error::Data(format!(
                "series must be T_total×N×C with positive extents, got {:?}",
                data.shape()
            )));
        }
        if !data.all_finite() {
            return Err(Error::Data("series contains NaN or infinite values".into()));
        }
        if interval_minutes == 0 {
            return Err(Error::Data("interval_minutes must be positive".into()));
        }
        split(data.shape()[0], split_ratios)?;
        Ok(Self {
            data,
            interval_minutes,
            split_ratios,
            norm: None,
        })
    }

    pub fn data(&self) -> &Tensor<f64> {
        &self.data
    }

    pub fn t_total(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_nodes(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn splits(&self) -> Splits {
        split(self.t_total(), self.split_ratios).expect("validated at construction")
    }

    pub fn is_normalized(&self) -> bool {
        self.norm.is_some()
    }

    /// Time steps `[start, end)` as an `(end-start)×N×C` tensor.
    pub fn window(&self, start: usize, end: usize) -> Tensor<f64> {
        let row = self.n_nodes() * self.channels();
        let data = self.data.data()[start * row..end * row].to_vec();
        Tensor::new(vec![end - start, self.n_nodes(), self.channels()], data).expect("window shape")
    }

    pub fn value(&self, t: usize, node: usize, channel: usize) -> f64 {
        let (n, c) = (self.n_nodes(), self.channels());
        self.data.data()[(t * n + node) * c + channel]
    }

    /// The raw-unit series, inverting normalization if it was applied.
    pub fn denormalized(&self) -> Tensor<f64> {
        match &self.norm {
            None => self.data.clone(),
            Some(stats) => {
                let mut d = self.data.clone();
                stats.denormalize_slice(d.data_mut());
                d
            }
        }
    }

    /// Stable content hash (shape, split ratios, values) used to key caches.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for d in self.data.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for r in self.split_ratios {
            h.update(r.to_le_bytes());
        }
        for v in self.data.data() {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }
}

/// Fits per-channel mean and population standard deviation on the
/// training split and standardizes the whole series with them.
pub fn fit_and_apply_zscore(ds: &SeriesDataset) -> Result<SeriesDataset> {
    if ds.is_normalized() {
        return Err(Error::Data("dataset is already normalized".into()));
    }
    let train = ds.splits().train;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let (n, c) = (ds.n_nodes(), ds.channels());
    let count = (train.len() * n) as f64;
    let mut mean = vec![0.0; c];
    for t in train.clone() {
        for node in 0..n {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += ds.value(t, node, ch);
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for t in train {
        for node in 0..n {
            for ch in 0..c {
                let d = ds.value(t, node, ch) - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / count).sqrt()).collect();
    if let Some(ch) = std.iter().position(|&s| !(s > 1e-12)) {
        return Err(Error::Data(format!(
            "training split of channel {ch} has zero standard deviation; cannot normalize"
        )));
    }
    let stats = NormStats { mean, std };
    let mut data = ds.data.clone();
    for (i, v) in data.data_mut().iter_mut().enumerate() {
        *v = stats.normalize(*v, i % c);
    }
    Ok(SeriesDataset {
        data,
        interval_minutes: ds.interval_minutes,
        split_ratios: ds.split_ratios,
        norm: Some(stats),
    })
}
