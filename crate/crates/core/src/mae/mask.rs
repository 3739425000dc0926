use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which axis of the `[T_p, N, D]` embedding a mask hides.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskAxis {
    /// Whole sensors (node axis).
    Spatial,
    /// Whole patches (patch axis).
    Temporal,
    /// Individual (patch, node) slots of the flattened `T_p·N` grid.
    Mixed,
}

impl MaskAxis {
    pub fn tag(self) -> &'static str {
        match self {
            MaskAxis::Spatial => "spatial",
            MaskAxis::Temporal => "temporal",
            MaskAxis::Mixed => "mixed",
        }
    }

    /// Extent of the masked axis for a `T_p × N` grid.
    pub fn extent(self, t_p: usize, n: usize) -> usize {
        match self {
            MaskAxis::Spatial => n,
            MaskAxis::Temporal => t_p,
            MaskAxis::Mixed => t_p * n,
        }
    }
}

/// How the number of hidden indices is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskingMode {
    /// Exactly `⌊extent·r⌋` indices, uniformly without replacement.
    #[default]
    Fixed,
    /// Each index hidden independently with probability `r`, redrawn until
    /// at least one index is hidden and one stays visible.
    Bernoulli,
}

/// Hidden and visible indices along one axis, both sorted ascending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub axis: MaskAxis,
    pub ratio: f64,
    pub extent: usize,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
    pub seed: u64,
}

impl MaskSpec {
    /// Builds a mask from an explicit index list in any order.
    pub fn from_indices(axis: MaskAxis, extent: usize, masked: &[usize]) -> Result<Self> {
        let mut m = masked.to_vec();
        m.sort_unstable();
        m.dedup();
        if m.len() != masked.len() {
            return Err(Error::InvalidArgument("masked indices must be unique".into()));
        }
        if let Some(&bad) = m.iter().find(|&&i| i >= extent) {
            return Err(Error::InvalidArgument(format!(
                "masked index {bad} out of range for extent {extent}"
            )));
        }
        let visible = (0..extent).filter(|i| m.binary_search(i).is_err()).collect();
        Ok(Self {
            axis,
            ratio: m.len() as f64 / extent.max(1) as f64,
            extent,
            masked: m,
            visible,
            seed: 0,
        })
    }

    /// Nothing hidden; decoding yields an empty reconstruction.
    pub fn empty(axis: MaskAxis, extent: usize) -> Self {
        Self::from_indices(axis, extent, &[]).expect("empty mask is valid")
    }

    pub fn num_masked(&self) -> usize {
        self.masked.len()
    }

    pub fn num_visible(&self) -> usize {
        self.visible.len()
    }

    /// Per-index flag, true where hidden.
    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.extent];
        for &i in &self.masked {
            f[i] = true;
        }
        f
    }
}

pub fn sample_mask(axis: MaskAxis, extent: usize, ratio: f64, seed: u64) -> Result<MaskSpec> {
    sample_mask_with(axis, extent, ratio, seed, MaskingMode::Fixed)
}

pub fn sample_mask_with(axis: MaskAxis, extent: usize, ratio: f64, seed: u64, mode: MaskingMode) -> Result<MaskSpec> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "masking ratio {ratio} must lie in (0, 1)"
        )));
    }
    if extent < 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot mask an axis of extent {extent}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masked: Vec<usize> = match mode {
        MaskingMode::Fixed => {
            let count = masked_count(extent, ratio);
            if count == 0 {
                return Err(Error::InvalidArgument(format!(
                    "⌊{extent}·{ratio}⌋ = 0: extent too small to mask anything"
                )));
            }
            rand::seq::index::sample(&mut rng, extent, count).into_vec()
        }
        MaskingMode::Bernoulli => {
            let mut attempt = 0;
            loop {
                let m: Vec<usize> = (0..extent).filter(|_| rng.gen_bool(ratio)).collect();
                if !m.is_empty() && m.len() < extent {
                    break m;
                }
                attempt += 1;
                if attempt > 1000 {
                    return Err(Error::InvalidArgument(format!(
                        "Bernoulli masking with r={ratio} on extent {extent} keeps producing degenerate masks"
                    )));
                }
            }
        }
    };
    let mut spec = MaskSpec::from_indices(axis, extent, &masked)?;
    spec.ratio = ratio;
    spec.seed = seed;
    Ok(spec)
}

/// `⌊extent·r⌋`, guarded against representation error (e.g. 0.29·100).
pub fn masked_count(extent: usize, ratio: f64) -> usize {
    ((extent as f64) * ratio + 1e-9).floor() as usize
}

/// Visible part of a `[T_p, N, D]` embedding: spatial masks drop nodes,
/// temporal masks drop patches, mixed masks flatten to `[1, T_p·N, D]`
/// and drop slots. Relative order is preserved.
pub fn apply_mask<S: Scalar>(e: &Tensor<S>, spec: &MaskSpec) -> Result<Tensor<S>> {
    let (t_p, n, d) = check_grid(e, spec)?;
    match spec.axis {
        MaskAxis::Spatial => e.index_select(1, &spec.visible),
        MaskAxis::Temporal => e.index_select(0, &spec.visible),
        MaskAxis::Mixed => e.clone().reshape(&[1, t_p * n, d])?.index_select(1, &spec.visible),
    }
}

pub(crate) fn check_grid<S: Scalar>(e: &Tensor<S>, spec: &MaskSpec) -> Result<(usize, usize, usize)> {
    if e.rank() != 3 {
        return Err(Error::shape(
            "apply_mask",
            format!("expected [T_p, N, D], got {:?}", e.shape()),
        ));
    }
    let (t_p, n, d) = (e.shape()[0], e.shape()[1], e.shape()[2]);
    let want = spec.axis.extent(t_p, n);
    if want != spec.extent {
        return Err(Error::shape(
            "apply_mask",
            format!(
                "{} mask over extent {} does not fit embedding {:?} (axis extent {})",
                spec.axis.tag(),
                spec.extent,
                e.shape(),
                want
            ),
        ));
    }
    Ok((t_p, n, d))
}
