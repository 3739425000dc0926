//! Patch embedding with two-dimensional sinusoidal positional encoding:
//! the shared front end of both autoencoders.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    /// Steps per patch (L).
    pub patch_len: usize,
    /// Embedding width (D).
    pub embed_dim: usize,
    /// Long-window length; must be a multiple of `patch_len`.
    pub t_long: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_len: 12,
            embed_dim: 96,
            t_long: 864,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.patch_len == 0 || self.t_long == 0 || self.embed_dim == 0 {
            errs.push("patch_len, embed_dim and t_long must be positive".to_string());
        } else if self.t_long % self.patch_len != 0 {
            errs.push(format!(
                "t_long = {} is not divisible by patch_len = {}",
                self.t_long, self.patch_len
            ));
        }
        if self.embed_dim % 4 != 0 {
            errs.push(format!("embed_dim = {} must be divisible by 4", self.embed_dim));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn num_patches(&self) -> usize {
        self.t_long / self.patch_len
    }
}

/// `[T_long, N, C] → [T_p, N, L·C]` with `out[p, n, l·C + c] = x[p·L + l, n, c]`.
pub fn patchify<S: Scalar>(x: &Tensor<S>, patch_len: usize) -> Result<Tensor<S>> {
    if x.rank() != 3 {
        return Err(Error::shape(
            "patchify",
            format!("expected [T, N, C], got {:?}", x.shape()),
        ));
    }
    let (t, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if patch_len == 0 || t % patch_len != 0 {
        return Err(Error::shape(
            "patchify",
            format!("window length {} is not divisible by patch length {}", t, patch_len),
        ));
    }
    let tp = t / patch_len;
    x.clone()
        .reshape(&[tp, patch_len, n, c])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[tp, n, patch_len * c])
}

/// Inverse of [`patchify`] for `C` channels.
pub fn unpatchify<S: Scalar>(xp: &Tensor<S>, channels: usize) -> Result<Tensor<S>> {
    if xp.rank() != 3 || channels == 0 || xp.shape()[2] % channels != 0 {
        return Err(Error::shape(
            "unpatchify",
            format!("cannot split {:?} into {} channels", xp.shape(), channels),
        ));
    }
    let (tp, n, lc) = (xp.shape()[0], xp.shape()[1], xp.shape()[2]);
    let l = lc / channels;
    xp.clone()
        .reshape(&[tp, n, l, channels])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[tp * l, n, channels])
}

type PeKey = (usize, usize, usize);

fn pe_cache() -> &'static Mutex<HashMap<PeKey, Arc<Vec<f64>>>> {
    static CACHE: OnceLock<Mutex<HashMap<PeKey, Arc<Vec<f64>>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn pe_values(t_p: usize, n: usize, d: usize) -> Arc<Vec<f64>> {
    let key = (t_p, n, d);
    if let Some(v) = pe_cache().lock().unwrap().get(&key) {
        return v.clone();
    }
    let quarter = d / 4;
    let half = d / 2;
    // frequency of pair i: 10000^(-4i/D)
    let freq: Vec<f64> = (0..quarter)
        .map(|i| 10000f64.powf(-(4.0 * i as f64) / d as f64))
        .collect();
    let mut out = vec![0.0; t_p * n * d];
    for t in 0..t_p {
        for node in 0..n {
            let row = &mut out[(t * n + node) * d..(t * n + node + 1) * d];
            for (i, &f) in freq.iter().enumerate() {
                row[2 * i] = (t as f64 * f).sin();
                row[2 * i + 1] = (t as f64 * f).cos();
                row[half + 2 * i] = (node as f64 * f).sin();
                row[half + 2 * i + 1] = (node as f64 * f).cos();
            }
        }
    }
    let arc = Arc::new(out);
    pe_cache().lock().unwrap().insert(key, arc.clone());
    arc
}

/// `E_pos ∈ R^{T_p×N×D}`. The first `D/2` channels are interleaved sin/cos
/// of the patch index `t` at frequencies `10000^(−4i/D)`, `i ∈ [0, D/4)`;
/// the last `D/2` channels do the same for the node index `n`.
pub fn positional_encoding<S: Scalar>(t_p: usize, n: usize, d: usize) -> Result<Tensor<S>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "positional encoding width {} must be a positive multiple of 4",
            d
        )));
    }
    let values = pe_values(t_p, n, d);
    Tensor::new(vec![t_p, n, d], values.iter().map(|&v| S::lit(v)).collect())
}

/// Fully connected projection of each `L·C` patch to `D` channels.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbedding {
    pub proj: Linear,
}

impl PatchEmbedding {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, patch_width: usize, d: usize) -> Self {
        Self {
            proj: Linear::new(store, rng, "patch_embed", patch_width, d),
        }
    }

    pub fn weight(&self) -> ParamId {
        self.proj.weight
    }

    pub fn bias(&self) -> ParamId {
        self.proj.bias
    }

    /// Records `E = patch_embed(patchify(x)) [+ E_pos]` on the tape.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: &Tensor<S>,
        patch_len: usize,
        with_position: bool,
    ) -> Result<Var> {
        let xp = tape.constant(patchify(x, patch_len)?);
        let ep = self.proj.forward(tape, store, xp)?;
        if !with_position {
            return Ok(ep);
        }
        let s = tape.shape(ep).to_vec();
        let pos = tape.constant(positional_encoding(s[0], s[1], s[2])?);
        tape.add(ep, pos)
    }
}

/// Affine patch projection `E_p = X_p · W + b` without a parameter store.
pub fn patch_embed<S: Scalar>(x_p: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let last = *x_p.shape().last().unwrap_or(&0);
    if weight.rank() != 2 || weight.shape()[0] != last || bias.shape() != [weight.shape()[1]] {
        return Err(Error::shape(
            "patch_embed",
            format!(
                "patches of width {} with weight {:?} and bias {:?}",
                last,
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    let mut tape = Tape::no_grad();
    let x = tape.constant(x_p.clone());
    let w = tape.constant(weight.clone());
    let b = tape.constant(bias.clone());
    let y = tape.matmul(x, w)?;
    let y = tape.add(y, b)?;
    Ok(tape.value(y).clone())
}

/// Summed patch and positional embedding of one long window.
#[derive(Clone, Debug, PartialEq)]
pub struct InputEmbedding<S> {
    pub values: Tensor<S>,
}

/// `E = E_p + E_pos` for a `[T_long, N, C]` window. With `with_position`
/// off, the positional term is skipped (diagnostics only).
pub fn input_embedding<S: Scalar>(
    x: &Tensor<S>,
    cfg: &PatchConfig,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    with_position: bool,
) -> Result<InputEmbedding<S>> {
    cfg.validate()?;
    if x.rank() != 3 || x.shape()[0] != cfg.t_long {
        return Err(Error::shape(
            "input_embedding",
            format!("expected a window of {} steps, got {:?}", cfg.t_long, x.shape()),
        ));
    }
    let ep = patch_embed(&patchify(x, cfg.patch_len)?, weight, bias)?;
    if ep.shape()[2] != cfg.embed_dim {
        return Err(Error::shape(
            "input_embedding",
            format!("projection width {} but embed_dim {}", ep.shape()[2], cfg.embed_dim),
        ));
    }
    if !with_position {
        return Ok(InputEmbedding { values: ep });
    }
    let pos = positional_encoding::<S>(ep.shape()[0], ep.shape()[1], ep.shape()[2])?;
    let data = ep.data().iter().zip(pos.data()).map(|(&a, &b)| a + b).collect();
    Ok(InputEmbedding {
        values: Tensor::new(ep.shape().to_vec(), data)?,
    })
}
