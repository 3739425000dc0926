use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::{check_grid, sample_mask_with, MaskAxis, MaskSpec, MaskingMode};
use crate::embedding::{patchify, positional_encoding, PatchConfig, PatchEmbedding};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, TransformerLayer};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaeConfig {
    pub axis: MaskAxis,
    pub patch: PatchConfig,
    pub channels: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of the embedding width.
    pub ff_mult: usize,
    pub mask_ratio: f64,
    pub masking_mode: MaskingMode,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            axis: MaskAxis::Temporal,
            patch: PatchConfig::default(),
            channels: 1,
            encoder_layers: 4,
            decoder_layers: 1,
            heads: 4,
            ff_mult: 4,
            mask_ratio: 0.25,
            masking_mode: MaskingMode::Fixed,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = match self.patch.validate() {
            Err(Error::Config(e)) => e,
            Err(e) => vec![e.to_string()],
            Ok(()) => Vec::new(),
        };
        if self.channels == 0 {
            errs.push("channels must be positive".into());
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            errs.push("encoder and decoder need at least one layer each".into());
        }
        if self.heads == 0 || self.patch.embed_dim % self.heads != 0 {
            errs.push(format!(
                "embed_dim = {} is not divisible by heads = {}",
                self.patch.embed_dim, self.heads
            ));
        }
        if self.ff_mult == 0 {
            errs.push("ff_mult must be positive".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            errs.push(format!("mask_ratio = {} must lie in (0, 1)", self.mask_ratio));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn patch_width(&self) -> usize {
        self.patch.patch_len * self.channels
    }
}

/// Handles into the parameter store of one autoencoder.
#[derive(Clone, Debug)]
pub struct MaeParams {
    pub embed: PatchEmbedding,
    pub encoder: Vec<TransformerLayer>,
    pub encoder_norm: LayerNorm,
    /// Shared learned vector placed in every masked slot before decoding.
    pub mask_token: ParamId,
    pub decoder: Vec<TransformerLayer>,
    pub decoder_norm: LayerNorm,
    /// `D → L·C` regression layer.
    pub regression: Linear,
}

impl MaeParams {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, cfg: &MaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.patch.embed_dim;
        let embed = PatchEmbedding::new(store, &mut rng, cfg.patch_width(), d);
        let encoder = (0..cfg.encoder_layers)
            .map(|i| TransformerLayer::new(store, &mut rng, &format!("encoder.{i}"), d, cfg.heads, cfg.ff_mult))
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm = LayerNorm::new(store, "encoder_norm", d);
        let mask_token = store.add("mask_token", Tensor::zeros(&[d]));
        let decoder = (0..cfg.decoder_layers)
            .map(|i| TransformerLayer::new(store, &mut rng, &format!("decoder.{i}"), d, cfg.heads, cfg.ff_mult))
            .collect::<Result<Vec<_>>>()?;
        let decoder_norm = LayerNorm::new(store, "decoder_norm", d);
        // zero-initialized so an untrained model predicts the series mean
        let regression = Linear::with_gain(store, &mut rng, "regression", d, cfg.patch_width(), 0.0);
        Ok(Self {
            embed,
            encoder,
            encoder_norm,
            mask_token,
            decoder,
            decoder_norm,
            regression,
        })
    }
}

/// One axis-wise masked autoencoder (S-MAE for [`MaskAxis::Spatial`],
/// T-MAE for [`MaskAxis::Temporal`]).
#[derive(Clone, Debug)]
pub struct MaskedAutoencoder<S> {
    pub config: MaeConfig,
    pub params: MaeParams,
    pub store: ParamStore<S>,
}

impl<S: Scalar> MaskedAutoencoder<S> {
    pub fn new(config: MaeConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let params = MaeParams::new(&mut store, &config, seed)?;
        Ok(Self { config, params, store })
    }

    pub fn axis(&self) -> MaskAxis {
        self.config.axis
    }

    fn check_window(&self, x: &Tensor<S>) -> Result<()> {
        let p = &self.config.patch;
        if x.rank() != 3 || x.shape()[0] != p.t_long || x.shape()[2] != self.config.channels {
            return Err(Error::shape(
                "mae_window",
                format!(
                    "expected [{}, N, {}], got {:?}",
                    p.t_long,
                    self.config.channels,
                    x.shape()
                ),
            ));
        }
        Ok(())
    }

    /// `E = patch_embed(patchify(x)) + E_pos`, shape `[T_p, N, D]`.
    pub fn embed(&self, tape: &mut Tape<S>, x: &Tensor<S>) -> Result<Var> {
        self.check_window(x)?;
        self.params
            .embed
            .forward(tape, &self.store, x, self.config.patch.patch_len, true)
    }

    /// Selects the visible tokens of `e` in axis layout: `[T_p, N_v, D]`,
    /// `[T_v, N, D]` or `[1, V, D]`.
    pub fn visible(&self, tape: &mut Tape<S>, e: Var, spec: &MaskSpec) -> Result<Var> {
        let (t_p, n, d) = self.grid_of(tape, e, spec)?;
        match spec.axis {
            MaskAxis::Spatial => tape.index_select(e, 1, &spec.visible),
            MaskAxis::Temporal => tape.index_select(e, 0, &spec.visible),
            MaskAxis::Mixed => {
                let flat = tape.reshape(e, &[1, t_p * n, d])?;
                tape.index_select(flat, 1, &spec.visible)
            }
        }
    }

    fn grid_of(&self, tape: &Tape<S>, e: Var, spec: &MaskSpec) -> Result<(usize, usize, usize)> {
        if spec.axis != self.config.axis {
            return Err(Error::InvalidArgument(format!(
                "{} mask given to a {} autoencoder",
                spec.axis.tag(),
                self.config.axis.tag()
            )));
        }
        let s = tape.shape(e);
        if s.len() == 3 && spec.axis.extent(s[0], s[1]) == spec.extent {
            Ok((s[0], s[1], s[2]))
        } else {
            Err(Error::shape(
                "apply_mask",
                format!(
                    "embedding {:?} does not fit a {} mask of extent {}",
                    s,
                    spec.axis.tag(),
                    spec.extent
                ),
            ))
        }
    }

    /// Runs attention along the configured axis: spatial attends over nodes
    /// per patch, temporal over patches per node, mixed over all slots.
    fn run_stack(&self, tape: &mut Tape<S>, h: Var, layers: &[TransformerLayer], norm: &LayerNorm) -> Result<Var> {
        let temporal = self.config.axis == MaskAxis::Temporal;
        let mut x = if temporal { tape.permute(h, &[1, 0, 2])? } else { h };
        for layer in layers {
            x = layer.forward(tape, &self.store, x)?;
        }
        x = norm.forward(tape, &self.store, x)?;
        if temporal {
            x = tape.permute(x, &[1, 0, 2])?;
        }
        Ok(x)
    }

    /// Encoder over visible tokens; output has the input's shape.
    pub fn encode(&self, tape: &mut Tape<S>, visible: Var) -> Result<Var> {
        let s = tape.shape(visible).to_vec();
        if s.len() != 3 || s[2] != self.config.patch.embed_dim {
            return Err(Error::shape(
                "encode",
                format!("expected width {}, got {:?}", self.config.patch.embed_dim, s),
            ));
        }
        let p = &self.params;
        self.run_stack(tape, visible, &p.encoder, &p.encoder_norm)
    }

    /// Pads `h` with mask tokens (mask token plus the encoder's positional
    /// encoding at each hidden slot), decodes the full grid and regresses the
    /// hidden patches. `grid` is `(T_p, N)`. Output: `[T_p, N_M, L·C]`,
    /// `[T_M, N, L·C]` or `[1, M, L·C]`.
    pub fn pad_and_decode(&self, tape: &mut Tape<S>, h: Var, spec: &MaskSpec, grid: (usize, usize)) -> Result<Var> {
        let (t_p, n) = grid;
        let d = self.config.patch.embed_dim;
        let lc = self.config.patch_width();
        if spec.axis != self.config.axis || spec.extent != spec.axis.extent(t_p, n) {
            return Err(Error::shape(
                "pad_and_decode",
                format!(
                    "{} mask of extent {} on a {}×{} grid",
                    spec.axis.tag(),
                    spec.extent,
                    t_p,
                    n
                ),
            ));
        }
        let expect = match spec.axis {
            MaskAxis::Spatial => vec![t_p, spec.num_visible(), d],
            MaskAxis::Temporal => vec![spec.num_visible(), n, d],
            MaskAxis::Mixed => vec![1, spec.num_visible(), d],
        };
        if tape.shape(h) != expect.as_slice() {
            return Err(Error::shape(
                "pad_and_decode",
                format!(
                    "encoded tokens {:?} do not match mask (expected {:?})",
                    tape.shape(h),
                    expect
                ),
            ));
        }
        let m = spec.num_masked();
        if m == 0 {
            let shape = match spec.axis {
                MaskAxis::Spatial => [t_p, 0, lc],
                MaskAxis::Temporal => [0, n, lc],
                MaskAxis::Mixed => [1, 0, lc],
            };
            return Ok(tape.constant(Tensor::zeros(&shape)));
        }
        let pe = positional_encoding::<S>(t_p, n, d)?;
        let pe_masked = match spec.axis {
            MaskAxis::Spatial => pe.index_select(1, &spec.masked)?,
            MaskAxis::Temporal => pe.index_select(0, &spec.masked)?,
            MaskAxis::Mixed => pe.reshape(&[1, t_p * n, d])?.index_select(1, &spec.masked)?,
        };
        let pe_masked = tape.constant(pe_masked);
        let token = tape.param(&self.store, self.params.mask_token);
        let tokens = tape.add(pe_masked, token)?;
        // [visible; masked] along the masked axis. Attention is
        // order-equivariant and every token already carries its position.
        let cat_axis = if spec.axis == MaskAxis::Temporal { 0 } else { 1 };
        let full = tape.concat(&[h, tokens], cat_axis)?;
        let p = &self.params;
        let dec = self.run_stack(tape, full, &p.decoder, &p.decoder_norm)?;
        let out = p.regression.forward(tape, &self.store, dec)?;
        let v = spec.num_visible();
        tape.slice_axis(out, cat_axis, v, v + m)
    }

    /// Patchified ground truth at the hidden slots, aligned with
    /// [`pad_and_decode`](Self::pad_and_decode)'s output.
    pub fn masked_target(&self, x: &Tensor<S>, spec: &MaskSpec) -> Result<Tensor<S>> {
        self.check_window(x)?;
        let xp = patchify(x, self.config.patch.patch_len)?;
        check_grid(&xp, spec)?;
        let (t_p, n, lc) = (xp.shape()[0], xp.shape()[1], xp.shape()[2]);
        match spec.axis {
            MaskAxis::Spatial => xp.index_select(1, &spec.masked),
            MaskAxis::Temporal => xp.index_select(0, &spec.masked),
            MaskAxis::Mixed => xp.reshape(&[1, t_p * n, lc])?.index_select(1, &spec.masked),
        }
    }

    /// Full masked pass. Returns `(loss, Q̂)`.
    pub fn forward_loss(&self, tape: &mut Tape<S>, x: &Tensor<S>, spec: &MaskSpec) -> Result<(Var, Var)> {
        let e = self.embed(tape, x)?;
        let grid = (tape.shape(e)[0], tape.shape(e)[1]);
        let vis = self.visible(tape, e, spec)?;
        let h = self.encode(tape, vis)?;
        let q_hat = self.pad_and_decode(tape, h, spec, grid)?;
        let truth = tape.constant(self.masked_target(x, spec)?);
        let loss = masked_loss(tape, q_hat, truth)?;
        Ok((loss, q_hat))
    }

    /// Draws a mask for a `T_p × N` grid using the configured ratio and mode.
    pub fn sample_mask(&self, n_nodes: usize, seed: u64) -> Result<MaskSpec> {
        let extent = self.config.axis.extent(self.config.patch.num_patches(), n_nodes);
        sample_mask_with(
            self.config.axis,
            extent,
            self.config.mask_ratio,
            seed,
            self.config.masking_mode,
        )
    }

    /// Inference-only reconstruction: `(Q̂, Q, loss)`.
    pub fn reconstruct(&self, x: &Tensor<S>, spec: &MaskSpec) -> Result<(Tensor<S>, Tensor<S>, f64)> {
        let mut tape = Tape::no_grad();
        let (loss, q_hat) = self.forward_loss(&mut tape, x, spec)?;
        let truth = self.masked_target(x, spec)?;
        Ok((tape.value(q_hat).clone(), truth, tape.value(loss).item().as_f64()))
    }

    /// Unmasked encoder pass recorded on `tape`; `[T_p, N, D]`.
    pub fn encode_full(&self, tape: &mut Tape<S>, x: &Tensor<S>) -> Result<Var> {
        let e = self.embed(tape, x)?;
        if self.config.axis == MaskAxis::Mixed {
            let s = tape.shape(e).to_vec();
            let flat = tape.reshape(e, &[1, s[0] * s[1], s[2]])?;
            let h = self.encode(tape, flat)?;
            return tape.reshape(h, &s);
        }
        self.encode(tape, e)
    }

    /// Representation of a whole long window (no masking), `[T_p, N, D]`.
    pub fn encode_representation(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::no_grad();
        let h = self.encode_full(&mut tape, x)?;
        Ok(tape.value(h).clone())
    }
}

/// Mean absolute error over the hidden patches only.
pub fn masked_loss<S: Scalar>(tape: &mut Tape<S>, q_hat: Var, truth: Var) -> Result<Var> {
    tape.l1_loss(q_hat, truth)
}

/// [`masked_loss`] on plain tensors.
pub fn masked_loss_value<S: Scalar>(q_hat: &Tensor<S>, truth: &Tensor<S>) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let a = tape.constant(q_hat.clone());
    let b = tape.constant(truth.clone());
    let l = masked_loss(&mut tape, a, b)?;
    Ok(tape.value(l).item().as_f64())
}

impl<S: Scalar> MaskedAutoencoder<S> {
    /// Hash of the configuration and every parameter value; keys caches of
    /// derived representations.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).unwrap_or_default());
        for p in self.store.iter() {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..16])
    }
}
