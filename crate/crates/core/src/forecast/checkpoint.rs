use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Forecaster, ForecasterConfig};
use crate::container;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::mae::MaskAxis;
use crate::scalar::Scalar;

pub const FORECASTER_KIND: &str = "forecaster_checkpoint";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    config: ForecasterConfig,
    branches: Vec<(MaskAxis, usize)>,
    t_long: usize,
    norm: Option<NormStats>,
    dataset_hash: String,
    encoder_hashes: Vec<String>,
    seed: u64,
}

/// Trained forecaster plus the context needed to evaluate it later.
#[derive(Clone, Debug)]
pub struct ForecasterCheckpoint<S> {
    pub model: Forecaster<S>,
    pub t_long: usize,
    pub norm: Option<NormStats>,
    pub dataset_hash: String,
    /// Fingerprints of the encoders feeding each branch, in branch order.
    pub encoder_hashes: Vec<String>,
    pub seed: u64,
}

impl<S: Scalar> ForecasterCheckpoint<S> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            config: self.model.config.clone(),
            branches: self.model.branches.iter().map(|b| (b.axis, b.embed_dim)).collect(),
            t_long: self.t_long,
            norm: self.norm.clone(),
            dataset_hash: self.dataset_hash.clone(),
            encoder_hashes: self.encoder_hashes.clone(),
            seed: self.seed,
        };
        let tensors: Vec<_> = self.model.store.iter().map(|p| (p.name.clone(), &p.value)).collect();
        container::write(path, FORECASTER_KIND, serde_json::to_value(meta)?, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = container::read::<S>(path)?;
        if header.kind != FORECASTER_KIND {
            return Err(Error::Format(format!(
                "{} holds a {:?} container, not a forecaster checkpoint",
                path.display(),
                header.kind
            )));
        }
        let meta: Meta = serde_json::from_value(header.meta)?;
        let mut model = Forecaster::<S>::new(meta.config, &meta.branches, meta.seed)?;
        model.store.load_values(tensors)?;
        Ok(Self {
            model,
            t_long: meta.t_long,
            norm: meta.norm,
            dataset_hash: meta.dataset_hash,
            encoder_hashes: meta.encoder_hashes,
            seed: meta.seed,
        })
    }
}
