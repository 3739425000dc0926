use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mask::MaskAxis;
use super::model::{MaeConfig, MaskedAutoencoder};
use crate::container;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_KIND: &str = "mae_checkpoint";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub seed: u64,
    pub final_loss: f64,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    axis: MaskAxis,
    config: MaeConfig,
    norm: Option<NormStats>,
    dataset_hash: String,
    training: TrainingMeta,
}

/// A trained autoencoder plus what is needed to reuse it downstream.
#[derive(Clone, Debug)]
pub struct MaeCheckpoint<S> {
    pub model: MaskedAutoencoder<S>,
    pub norm: Option<NormStats>,
    pub dataset_hash: String,
    pub training: TrainingMeta,
}

impl<S: Scalar> MaeCheckpoint<S> {
    pub fn axis(&self) -> MaskAxis {
        self.model.config.axis
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            axis: self.axis(),
            config: self.model.config.clone(),
            norm: self.norm.clone(),
            dataset_hash: self.dataset_hash.clone(),
            training: self.training.clone(),
        };
        let tensors: Vec<_> = self.model.store.iter().map(|p| (p.name.clone(), &p.value)).collect();
        container::write(path, CHECKPOINT_KIND, serde_json::to_value(meta)?, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = container::read::<S>(path)?;
        if header.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!(
                "{} holds a {:?} container, not an autoencoder checkpoint",
                path.display(),
                header.kind
            )));
        }
        let meta: CheckpointMeta = serde_json::from_value(header.meta)?;
        if meta.axis != meta.config.axis {
            return Err(Error::Format("checkpoint axis tag disagrees with its config".into()));
        }
        let mut model = MaskedAutoencoder::<S>::new(meta.config, 0)?;
        model.store.load_values(tensors)?;
        Ok(Self {
            model,
            norm: meta.norm,
            dataset_hash: meta.dataset_hash,
            training: meta.training,
        })
    }
}
