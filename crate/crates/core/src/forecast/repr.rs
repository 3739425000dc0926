use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::container;
use crate::data::SeriesDataset;
use crate::error::{Error, Result};
use crate::mae::MaskedAutoencoder;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CACHE_KIND: &str = "representation_cache";

/// On-disk store of truncated representations, one container per
/// (dataset, encoder, truncation) with one blob per window start.
#[derive(Clone, Debug)]
pub struct RepresentationCache {
    pub dir: PathBuf,
}

impl RepresentationCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path(&self, dataset_hash: &str, encoder_hash: &str, keep: usize) -> PathBuf {
        self.dir.join(format!("{dataset_hash}-{encoder_hash}-last{keep}.reps"))
    }

    fn load<S: Scalar>(path: &Path) -> Result<HashMap<usize, Tensor<S>>> {
        if !path.exists() {
            return Ok(HashMap::new());
        }
        let (header, tensors) = container::read::<S>(path)?;
        if header.kind != CACHE_KIND {
            return Err(Error::Format(format!(
                "{} is not a representation cache",
                path.display()
            )));
        }
        tensors
            .into_iter()
            .map(|(name, t)| {
                name.parse::<usize>()
                    .map(|s| (s, t))
                    .map_err(|_| Error::Format(format!("bad cache entry name {name:?}")))
            })
            .collect()
    }
}

/// Encodes the long window ending at each anchor and keeps the last
/// `keep` patches, `[keep, N, D]`. Windows are spread over the available
/// cores; results do not depend on the split.
pub fn extract_representations<S: Scalar>(
    ds: &SeriesDataset,
    encoder: &MaskedAutoencoder<S>,
    anchors: &[usize],
    keep: usize,
    cache: Option<&RepresentationCache>,
) -> Result<Vec<Tensor<S>>> {
    let t_long = encoder.config.patch.t_long;
    let t_p = encoder.config.patch.num_patches();
    if keep == 0 || keep > t_p {
        return Err(Error::InvalidArgument(format!(
            "cannot keep the last {keep} of {t_p} patches"
        )));
    }
    if let Some(&a) = anchors.iter().find(|&&a| a + 1 < t_long || a >= ds.t_total()) {
        return Err(Error::InvalidArgument(format!(
            "anchor {a} has no complete {t_long}-step window"
        )));
    }
    let start_of = |a: usize| a + 1 - t_long;

    let cache_path = cache.map(|c| c.path(&ds.content_hash(), &encoder.fingerprint(), keep));
    let mut known: HashMap<usize, Tensor<S>> = match &cache_path {
        Some(p) => RepresentationCache::load(p)?,
        None => HashMap::new(),
    };
    let mut missing: Vec<usize> = anchors
        .iter()
        .map(|&a| start_of(a))
        .filter(|s| !known.contains_key(s))
        .collect();
    missing.sort_unstable();
    missing.dedup();

    if !missing.is_empty() {
        let encode = |s: usize| -> Result<Tensor<S>> {
            let x = ds.window(s, s + t_long).cast::<S>();
            let h = encoder.encode_representation(&x)?;
            let h = h.slice_axis(0, t_p - keep, t_p)?;
            // cached blobs are f32; round now so cold and warm runs agree
            Ok(if cache.is_some() {
                h.cast::<f32>().cast::<S>()
            } else {
                h
            })
        };
        let workers = std::thread::available_parallelism()
            .map_or(1, |n| n.get())
            .min(missing.len());
        let computed: Vec<Result<Tensor<S>>> = if workers <= 1 {
            missing.iter().map(|&s| encode(s)).collect()
        } else {
            let chunk = missing.len().div_ceil(workers);
            std::thread::scope(|scope| {
                let handles: Vec<_> = missing
                    .chunks(chunk)
                    .map(|part| scope.spawn(move || part.iter().map(|&s| encode(s)).collect::<Vec<_>>()))
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("representation worker panicked"))
                    .collect()
            })
        };
        for (s, r) in missing.iter().zip(computed) {
            known.insert(*s, r?);
        }
        if let Some(p) = &cache_path {
            let mut starts: Vec<&usize> = known.keys().collect();
            starts.sort_unstable();
            let tensors: Vec<(String, &Tensor<S>)> = starts.iter().map(|s| (s.to_string(), &known[*s])).collect();
            let meta = serde_json::json!({
                "dataset_hash": ds.content_hash(),
                "encoder_hash": encoder.fingerprint(),
                "axis": encoder.config.axis,
                "keep": keep,
            });
            container::write(p, CACHE_KIND, meta, &tensors)?;
        }
    }
    Ok(anchors.iter().map(|&a| known[&start_of(a)].clone()).collect())
}
