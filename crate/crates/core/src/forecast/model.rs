use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::MaskAxis;
use crate::nn::{Linear, Mlp};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecasterConfig {
    /// Short input length.
    pub t_in: usize,
    /// Forecast horizon.
    pub t_out: usize,
    pub channels: usize,
    /// Width of the predictor's hidden state (D').
    pub hidden: usize,
    pub conv_channels: usize,
    /// Dilation of each kernel-2 temporal convolution layer.
    pub dilations: Vec<usize>,
    /// Number of trailing representation patches kept per branch (T').
    pub truncate: usize,
    /// Initialization gain of each branch's output layer.
    pub branch_init_gain: f64,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            t_in: 12,
            t_out: 12,
            channels: 1,
            hidden: 64,
            conv_channels: 32,
            dilations: vec![1, 2, 4, 4],
            truncate: 1,
            branch_init_gain: 0.1,
        }
    }
}

impl ForecasterConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.t_in == 0 || self.t_out == 0 || self.channels == 0 {
            errs.push("t_in, t_out and channels must be positive".to_string());
        }
        if self.hidden == 0 || self.conv_channels == 0 {
            errs.push("hidden and conv_channels must be positive".into());
        }
        if self.dilations.iter().any(|&d| d == 0) {
            errs.push("dilations must be positive".into());
        }
        let reach: usize = self.dilations.iter().sum();
        if reach >= self.t_in {
            errs.push(format!(
                "dilations {:?} reach {} steps back but the input has only {}",
                self.dilations, reach, self.t_in
            ));
        }
        if self.truncate == 0 {
            errs.push("truncate (T') must be at least 1".into());
        }
        if !(self.branch_init_gain >= 0.0) {
            errs.push("branch_init_gain must be nonnegative".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub dilation: usize,
    /// Kernel-2 convolution as one affine map over `[x(t−d), x(t)]`.
    pub conv: Linear,
    pub skip: Linear,
}

/// Node-wise dilated temporal convolution stack with residual connections
/// and skip aggregation. Nodes never interact.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub input: Linear,
    pub layers: Vec<ConvLayer>,
}

impl Predictor {
    fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, cfg: &ForecasterConfig) -> Self {
        let ch = cfg.conv_channels;
        let input = Linear::new(store, rng, "predictor.input", cfg.channels, ch);
        let layers = cfg
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &dilation)| ConvLayer {
                dilation,
                conv: Linear::new(store, rng, &format!("predictor.conv{i}"), 2 * ch, ch),
                skip: Linear::new(store, rng, &format!("predictor.skip{i}"), ch, cfg.hidden),
            })
            .collect();
        Self { input, layers }
    }

    /// `[T, N, C]` short window → hidden state `[N, D']`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let x = tape.permute(x, &[1, 0, 2])?;
        let mut h = self.input.forward(tape, store, x)?;
        let mut skip_sum: Option<Var> = None;
        for layer in &self.layers {
            let len = tape.shape(h)[1];
            let d = layer.dilation;
            let past = tape.slice_axis(h, 1, 0, len - d)?;
            let now = tape.slice_axis(h, 1, d, len)?;
            let pair = tape.concat(&[past, now], 2)?;
            let y = layer.conv.forward(tape, store, pair)?;
            let y = tape.gelu(y);
            h = tape.add(now, y)?;
            let last = tape.slice_axis(h, 1, len - d - 1, len - d)?;
            let s = layer.skip.forward(tape, store, last)?;
            skip_sum = Some(match skip_sum {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
        }
        let s = skip_sum.ok_or_else(|| Error::InvalidArgument("predictor has no layers".into()))?;
        let n = tape.shape(s)[0];
        let w = tape.shape(s)[2];
        let s = tape.reshape(s, &[n, w])?;
        Ok(tape.gelu(s))
    }
}

/// `Linear → GELU → Linear` from `[N, D']` to a `[T̂, N, C]` forecast.
#[derive(Clone, Copy, Debug)]
pub struct ForecastHead {
    pub hidden: Linear,
    pub output: Linear,
}

impl ForecastHead {
    fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, cfg: &ForecasterConfig) -> Self {
        Self {
            hidden: Linear::new(store, rng, "head.hidden", cfg.hidden, cfg.hidden),
            output: Linear::new(store, rng, "head.output", cfg.hidden, cfg.t_out * cfg.channels),
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        h: Var,
        t_out: usize,
        channels: usize,
    ) -> Result<Var> {
        let s = tape.shape(h).to_vec();
        if s.len() != 2 || s[1] != self.hidden.fan_in {
            return Err(Error::shape(
                "forecast_head",
                format!("expected [N, {}], got {:?}", self.hidden.fan_in, s),
            ));
        }
        let y = self.hidden.forward(tape, store, h)?;
        let y = tape.gelu(y);
        let y = self.output.forward(tape, store, y)?;
        let y = tape.reshape(y, &[s[0], t_out, channels])?;
        tape.permute(y, &[1, 0, 2])
    }
}

/// Projection of one pre-trained representation into the hidden space.
#[derive(Clone, Copy, Debug)]
pub struct AugmentBranch {
    pub axis: MaskAxis,
    pub embed_dim: usize,
    pub mlp: Mlp,
}

/// Keeps the last `keep` patches of `h: [T_p, N, D]`, flattens them per
/// node to `[N, keep·D]` and applies `mlp`.
pub fn truncate_and_project<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    h: Var,
    keep: usize,
    mlp: &Mlp,
) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(
            "truncate_and_project",
            format!("expected [T_p, N, D], got {:?}", s),
        ));
    }
    let (t_p, n, d) = (s[0], s[1], s[2]);
    if keep == 0 || keep > t_p {
        return Err(Error::InvalidArgument(format!(
            "cannot keep the last {} of {} patches",
            keep, t_p
        )));
    }
    let tail = tape.slice_axis(h, 0, t_p - keep, t_p)?;
    let tail = tape.permute(tail, &[1, 0, 2])?;
    let flat = tape.reshape(tail, &[n, keep * d])?;
    mlp.forward(tape, store, flat)
}

/// `H^F + Σ projections`.
pub fn augment<S: Scalar>(tape: &mut Tape<S>, hidden: Var, projections: &[Var]) -> Result<Var> {
    let mut out = hidden;
    for &p in projections {
        if tape.shape(p) != tape.shape(hidden) {
            return Err(Error::shape(
                "augment",
                format!("projection {:?} vs hidden {:?}", tape.shape(p), tape.shape(hidden)),
            ));
        }
        out = tape.add(out, p)?;
    }
    Ok(out)
}

/// Short-window predictor, optionally augmented by frozen representations.
#[derive(Clone, Debug)]
pub struct Forecaster<S> {
    pub config: ForecasterConfig,
    pub predictor: Predictor,
    pub head: ForecastHead,
    pub branches: Vec<AugmentBranch>,
    pub store: ParamStore<S>,
}

impl<S: Scalar> Forecaster<S> {
    /// Plain predictor without augmentation.
    pub fn baseline(config: ForecasterConfig, seed: u64) -> Result<Self> {
        Self::new(config, &[], seed)
    }

    /// `branches` lists `(axis, D)` of each representation. Predictor and
    /// head are initialized from `seed` independently of the branches.
    pub fn new(config: ForecasterConfig, branches: &[(MaskAxis, usize)], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let predictor = Predictor::new(&mut store, &mut rng, &config);
        let head = ForecastHead::new(&mut store, &mut rng, &config);
        let mut branch_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb4a7_c0de);
        let mut out = Vec::new();
        for &(axis, d) in branches {
            if out.iter().any(|b: &AugmentBranch| b.axis == axis) {
                return Err(Error::InvalidArgument(format!("duplicate {} branch", axis.tag())));
            }
            let mlp = Mlp::new(
                &mut store,
                &mut branch_rng,
                &format!("augment.{}", axis.tag()),
                config.truncate * d,
                config.hidden,
                config.hidden,
                config.branch_init_gain,
            );
            out.push(AugmentBranch {
                axis,
                embed_dim: d,
                mlp,
            });
        }
        Ok(Self {
            config,
            predictor,
            head,
            branches: out,
            store,
        })
    }

    pub fn hidden_state(&self, tape: &mut Tape<S>, short: &Tensor<S>) -> Result<Var> {
        let c = &self.config;
        if short.rank() != 3 || short.shape()[0] != c.t_in || short.shape()[2] != c.channels {
            return Err(Error::shape(
                "predictor",
                format!("expected [{}, N, {}], got {:?}", c.t_in, c.channels, short.shape()),
            ));
        }
        let x = tape.constant(short.clone());
        self.predictor.forward(tape, &self.store, x)
    }

    /// Records the forecast `[T̂, N, C]`. `reps[i]` is the `[T_p, N, D]`
    /// (or already truncated) representation for branch `i`.
    pub fn forward(&self, tape: &mut Tape<S>, short: &Tensor<S>, reps: &[Tensor<S>]) -> Result<Var> {
        if reps.len() != self.branches.len() {
            return Err(Error::InvalidArgument(format!(
                "{} representations for {} branches",
                reps.len(),
                self.branches.len()
            )));
        }
        let mut h = self.hidden_state(tape, short)?;
        if !self.branches.is_empty() {
            let mut projections = Vec::with_capacity(reps.len());
            for (b, r) in self.branches.iter().zip(reps) {
                let rv = tape.constant(r.clone());
                projections.push(truncate_and_project(
                    tape,
                    &self.store,
                    rv,
                    self.config.truncate,
                    &b.mlp,
                )?);
            }
            h = augment(tape, h, &projections)?;
        }
        self.head
            .forward(tape, &self.store, h, self.config.t_out, self.config.channels)
    }

    pub fn predict(&self, short: &Tensor<S>, reps: &[Tensor<S>]) -> Result<Tensor<S>> {
        let mut tape = Tape::no_grad();
        let y = self.forward(&mut tape, short, reps)?;
        Ok(tape.value(y).clone())
    }
}
