use std::ops::Range;

use super::{SeriesDataset, SplitKind};
use crate::tensor::Tensor;

/// One forecasting example anchored at time `t`.
///
/// `short_input` covers `[t−T+1, t]`, `long_input` covers `[t−T_long+1, t]`
/// and `target` covers `[t+1, t+T̂]`.
#[derive(Clone, Debug)]
pub struct ForecastSample {
    pub anchor: usize,
    pub short_input: Tensor<f64>,
    pub long_input: Tensor<f64>,
    pub target: Tensor<f64>,
}

/// Lazily materialized, time-ordered samples of one split.
///
/// Targets always lie inside the split; inputs may reach back into earlier
/// splits but never before step 0 (such anchors are dropped).
#[derive(Clone, Debug)]
pub struct SampleIter<'a> {
    ds: &'a SeriesDataset,
    t_in: usize,
    t_out: usize,
    t_long: usize,
    anchors: Range<usize>,
    /// Set when the split is too short to host a single sample.
    pub too_short: bool,
}

impl<'a> SampleIter<'a> {
    pub fn anchors(&self) -> Range<usize> {
        self.anchors.clone()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn sample(&self, anchor: usize) -> ForecastSample {
        let t = anchor;
        ForecastSample {
            anchor,
            short_input: self.ds.window(t + 1 - self.t_in, t + 1),
            long_input: self.ds.window(t + 1 - self.t_long, t + 1),
            target: self.ds.window(t + 1, t + 1 + self.t_out),
        }
    }
}

impl Iterator for SampleIter<'_> {
    type Item = ForecastSample;

    fn next(&mut self) -> Option<ForecastSample> {
        let t = self.anchors.next()?;
        Some(self.sample(t))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.anchors.len(), Some(self.anchors.len()))
    }
}

/// Samples for `split`. The usable span is `[max(0, start − T_long), end)`
/// and the number of samples is `span − T_long − T̂ + 1` (or zero).
pub fn iterate_samples(
    ds: &SeriesDataset,
    t_in: usize,
    t_out: usize,
    t_long: usize,
    split: SplitKind,
) -> SampleIter<'_> {
    assert!(
        t_long >= t_in && t_in >= 1 && t_out >= 1,
        "require T_long >= T >= 1 and T̂ >= 1"
    );
    let range = ds.splits().range(split);
    let usable_start = range.start.saturating_sub(t_long);
    let span = range.end.saturating_sub(usable_start);
    let count = (span + 1).saturating_sub(t_long + t_out);
    let first = usable_start + t_long - 1;
    let too_short = count == 0;
    if too_short {
        log::warn!(
            "{:?} split [{}, {}) cannot host a sample with T_long={} and horizon {}",
            split,
            range.start,
            range.end,
            t_long,
            t_out
        );
    }
    SampleIter {
        ds,
        t_in,
        t_out,
        t_long,
        anchors: first..first + count,
        too_short,
    }
}
