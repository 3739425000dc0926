//! Parameterized building blocks shared by the autoencoders and the
//! forecaster: affine maps, layer normalization, multi-head self-attention,
//! pre-norm transformer layers and two-layer perceptrons.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Tag attached to every attention-probability buffer on a tape.
pub const ATTENTION_SCORES: &str = "attention_scores";

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn xavier<S: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor<S> {
    let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    if a <= 0.0 {
        return Tensor::zeros(&[fan_in, fan_out]);
    }
    Tensor::from_fn(&[fan_in, fan_out], |_| S::lit(rng.gen_range(-a..a)))
}

/// `y = x · W + b` applied over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        Self::with_gain(store, rng, name, fan_in, fan_out, 1.0)
    }

    /// Xavier-uniform weights scaled by `gain`; zero bias.
    pub fn with_gain<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out, gain));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let last = *tape.shape(x).last().unwrap_or(&0);
        if last != self.fan_in {
            return Err(Error::shape(
                "linear",
                format!("input width {} but layer expects {}", last, self.fan_in),
            ));
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], S::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Multi-head self-attention over the middle axis of a `[batch, seq, width]`
/// input. Score buffers are `[batch, heads, seq, seq]`.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl SelfAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {} is not divisible by {} heads",
                width, heads
            )));
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.query"), width, width),
            key: Linear::new(store, rng, &format!("{name}.key"), width, width),
            value: Linear::new(store, rng, &format!("{name}.value"), width, width),
            output: Linear::new(store, rng, &format!("{name}.output"), width, width),
            heads,
            width,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.width {
            return Err(Error::shape(
                "self_attention",
                format!("expected [batch, seq, {}], got {:?}", self.width, shape),
            ));
        }
        let (b, s, d) = (shape[0], shape[1], shape[2]);
        let h = self.heads;
        let dk = d / h;

        let q = self.query.forward(tape, store, x)?;
        let q = tape.reshape(q, &[b, s, h, dk])?;
        let q = tape.permute(q, &[0, 2, 1, 3])?;
        let k = self.key.forward(tape, store, x)?;
        let k = tape.reshape(k, &[b, s, h, dk])?;
        let k = tape.permute(k, &[0, 2, 3, 1])?;
        let v = self.value.forward(tape, store, x)?;
        let v = tape.reshape(v, &[b, s, h, dk])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;

        let scores = tape.matmul(q, k)?;
        let scores = tape.scale(scores, S::one() / S::from_usize(dk).unwrap().sqrt());
        let probs = tape.softmax_last(scores)?;
        tape.tag(probs, ATTENTION_SCORES);

        let ctx = tape.matmul(probs, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, s, d])?;
        self.output.forward(tape, store, ctx)
    }
}

/// Pre-normalization transformer layer:
/// `x + attn(ln1(x))`, then `+ ff(ln2(·))` with a GELU feed-forward of
/// width `ff_mult · width`.
#[derive(Clone, Copy, Debug)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attention: SelfAttention,
    pub norm2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TransformerLayer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        heads: usize,
        ff_mult: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            attention: SelfAttention::new(store, rng, &format!("{name}.attn"), width, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
            ff_in: Linear::new(store, rng, &format!("{name}.ff_in"), width, width * ff_mult),
            ff_out: Linear::new(store, rng, &format!("{name}.ff_out"), width * ff_mult, width),
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, store, x)?;
        let h = self.attention.forward(tape, store, h)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, store, x)?;
        let h = self.ff_in.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.ff_out.forward(tape, store, h)?;
        tape.add(x, h)
    }
}

/// `Linear → GELU → Linear`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    /// `out_gain` scales the second layer's initialization; small values
    /// make the block start close to the zero map.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        out_gain: f64,
    ) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), fan_in, hidden),
            output: Linear::with_gain(store, rng, &format!("{name}.output"), hidden, fan_out, out_gain),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.output.forward(tape, store, h)
    }
}
