use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Steps reported individually besides the all-step average.
pub const REPORT_HORIZONS: [usize; 3] = [3, 6, 12];

/// Default MAPE cut-off in normalized units.
pub const DEFAULT_ZERO_THRESHOLD: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; `None` when every target fell below the zero threshold.
    pub mape: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    #[serde(flatten)]
    pub metrics: MetricSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall: MetricSet,
    pub horizons: Vec<HorizonMetrics>,
}

#[derive(Default)]
struct Acc {
    abs: f64,
    sq: f64,
    n: usize,
    pct: f64,
    n_pct: usize,
}

impl Acc {
    fn push(&mut self, p: f64, y: f64, zero_threshold: f64) {
        let e = p - y;
        self.abs += e.abs();
        self.sq += e * e;
        self.n += 1;
        if y.abs() >= zero_threshold {
            self.pct += (e / y).abs();
            self.n_pct += 1;
        }
    }

    fn finish(&self) -> MetricSet {
        let n = self.n.max(1) as f64;
        MetricSet {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: (self.n_pct > 0).then(|| 100.0 * self.pct / self.n_pct as f64),
        }
    }
}

/// Metrics of `pred` against `truth`, both `[samples, T̂, ...]`. The overall
/// set pools every element of every step; horizon `k` uses step `k` alone
/// (1-based). Targets with `|y| < zero_threshold` are left out of MAPE.
pub fn evaluate(pred: &Tensor<f64>, truth: &Tensor<f64>, zero_threshold: f64, horizons: &[usize]) -> Result<Metrics> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(
            "evaluate",
            format!("predictions {:?} vs targets {:?}", pred.shape(), truth.shape()),
        ));
    }
    if pred.rank() < 2 || pred.numel() == 0 {
        return Err(Error::shape(
            "evaluate",
            format!(
                "expected a non-empty [samples, horizon, ...] array, got {:?}",
                pred.shape()
            ),
        ));
    }
    let steps = pred.shape()[1];
    if let Some(&h) = horizons.iter().find(|&&h| h == 0 || h > steps) {
        return Err(Error::InvalidArgument(format!("horizon {h} outside 1..={steps}")));
    }
    let inner: usize = pred.shape()[2..].iter().product();
    let mut overall = Acc::default();
    let mut per_step: Vec<Acc> = (0..steps).map(|_| Acc::default()).collect();
    for (i, (&p, &y)) in pred.data().iter().zip(truth.data()).enumerate() {
        let step = (i / inner) % steps;
        overall.push(p, y, zero_threshold);
        per_step[step].push(p, y, zero_threshold);
    }
    Ok(Metrics {
        overall: overall.finish(),
        horizons: horizons
            .iter()
            .map(|&h| HorizonMetrics {
                horizon: h,
                metrics: per_step[h - 1].finish(),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_element() {
        let p = Tensor::from_f64(&[1, 1], &[2.0]).unwrap();
        let y = Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
        let m = evaluate(&p, &y, 1e-2, &[1]).unwrap().overall;
        assert_eq!((m.mae, m.rmse, m.mape), (1.0, 1.0, Some(100.0)));
        let z = Tensor::from_f64(&[1, 1], &[0.0]).unwrap();
        assert_eq!(evaluate(&p, &z, 1e-2, &[]).unwrap().overall.mape, None);
        assert!(evaluate(&p, &y, 1e-2, &[2]).is_err());
    }
}
