//! Synthetic spatiotemporal series with planted heterogeneity and mirages.
//!
//! Each node carries a daily sinusoid, a linear mixture of smooth latent
//! signals and Gaussian noise. Optionally, mirage episodes are planted on
//! a grid of [`EPISODE_LEN`]-step slots: a cue showing a regime sign, an
//! ambiguous gap in which the regime is invisible, and a payoff in which
//! the sign reappears. Two episodes at the same time of day with opposite
//! signs have identical gap windows but diverging futures.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SeriesDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CUE_LEN: usize = 12;
pub const GAP_LEN: usize = 24;
pub const PAYOFF_LEN: usize = 12;
pub const EPISODE_LEN: usize = CUE_LEN + GAP_LEN + PAYOFF_LEN;

/// Full description of a synthetic dataset; generation is a pure function of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_nodes: usize,
    pub n_steps: usize,
    /// Steps per day.
    pub daily_period: usize,
    pub node_amplitudes: Vec<f64>,
    pub node_phases: Vec<f64>,
    /// `n_nodes` rows of `k` weights over `k` latent signals (may be empty).
    #[serde(default)]
    pub latent_mix: Vec<Vec<f64>>,
    /// Periods of the sinusoidal components summed into each latent signal.
    #[serde(default = "default_latent_periods")]
    pub latent_periods: Vec<f64>,
    pub noise_std: f64,
    #[serde(default)]
    pub mirage_fraction: f64,
    /// Regime level shown during cue and payoff segments.
    #[serde(default = "default_mirage_amplitude")]
    pub mirage_amplitude: f64,
    pub seed: u64,
    #[serde(default = "default_interval")]
    pub interval_minutes: u32,
    #[serde(default = "default_ratios")]
    pub split_ratios: [f64; 3],
}

fn default_latent_periods() -> Vec<f64> {
    vec![97.0, 211.0, 503.0]
}

fn default_mirage_amplitude() -> f64 {
    1.0
}

fn default_interval() -> u32 {
    5
}

fn default_ratios() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

impl SynthSpec {
    /// Daily sinusoids with amplitudes in `[0.5, 2]` and phases in `[0, 2π)`
    /// drawn from `seed`; no latents, no mirages.
    pub fn sinusoid(n_nodes: usize, n_steps: usize, daily_period: usize, noise_std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157_4e55);
        let node_amplitudes = (0..n_nodes).map(|_| rng.gen_range(0.5..2.0)).collect();
        let node_phases = (0..n_nodes)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        Self {
            n_nodes,
            n_steps,
            daily_period,
            node_amplitudes,
            node_phases,
            latent_mix: Vec::new(),
            latent_periods: default_latent_periods(),
            noise_std,
            mirage_fraction: 0.0,
            mirage_amplitude: default_mirage_amplitude(),
            seed,
            interval_minutes: 5,
            split_ratios: default_ratios(),
        }
    }

    /// Nodes that are fixed standard-normal mixtures of `k` latent signals,
    /// with no seasonal component.
    pub fn latent_mixture(n_nodes: usize, n_steps: usize, k: usize, noise_std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4c41_5445);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let latent_mix = (0..n_nodes)
            .map(|_| (0..k).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        Self {
            node_amplitudes: vec![0.0; n_nodes],
            node_phases: vec![0.0; n_nodes],
            latent_mix,
            ..Self::sinusoid(n_nodes, n_steps, 288, noise_std, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_nodes == 0 || self.n_steps == 0 || self.daily_period == 0 {
            errs.push("n_nodes, n_steps and daily_period must be positive".to_string());
        }
        if self.node_amplitudes.len() != self.n_nodes || self.node_phases.len() != self.n_nodes {
            errs.push(format!(
                "node_amplitudes/node_phases must have {} entries",
                self.n_nodes
            ));
        }
        if !self.latent_mix.is_empty() {
            let k = self.latent_mix[0].len();
            if self.latent_mix.len() != self.n_nodes || self.latent_mix.iter().any(|r| r.len() != k) {
                errs.push("latent_mix must be an n_nodes × k matrix".to_string());
            }
            if self.latent_periods.is_empty() || self.latent_periods.iter().any(|p| !(*p > 0.0)) {
                errs.push("latent_periods must be non-empty and positive".to_string());
            }
        }
        if !(self.noise_std >= 0.0) {
            errs.push("noise_std must be non-negative".to_string());
        }
        if !(0.0..=1.0).contains(&self.mirage_fraction) {
            errs.push("mirage_fraction must lie in [0, 1]".to_string());
        }
        if self.mirage_fraction > 0.0 {
            if self.daily_period % EPISODE_LEN != 0 {
                errs.push(format!(
                    "daily_period must be a multiple of {EPISODE_LEN} when mirages are planted"
                ));
            } else if self.n_steps < 2 * self.daily_period {
                errs.push("mirages need at least two days of data".to_string());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn n_latents(&self) -> usize {
        self.latent_mix.first().map_or(0, |r| r.len())
    }

    /// Number of episode slots, the unit in which `mirage_fraction` is measured.
    pub fn n_slots(&self) -> usize {
        self.n_steps / EPISODE_LEN
    }
}

/// Two windows whose short inputs match but whose futures diverge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiragePair {
    /// First step of the ambiguous 12-step window in episode `a`.
    pub window_start_a: usize,
    /// Same for the twin episode `b`.
    pub window_start_b: usize,
    /// Absolute step in `a` at which the futures start to differ.
    pub divergence_step: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MirageManifest {
    pub pairs: Vec<MiragePair>,
}

impl MirageManifest {
    /// Forecast anchors `t` in episode `a` of each record whose `t_in`-step
    /// input lies inside the ambiguous gap and whose target reaches past
    /// the divergence step.
    pub fn mirage_anchors(&self, t_in: usize, t_out: usize) -> Vec<usize> {
        let mut anchors: Vec<usize> = self
            .pairs
            .iter()
            .flat_map(|p| {
                let gap_start = p.divergence_step - GAP_LEN;
                let lo = (gap_start + t_in - 1).max(p.divergence_step.saturating_sub(t_out));
                lo..p.divergence_step
            })
            .collect();
        anchors.sort_unstable();
        anchors.dedup();
        anchors
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub dataset: SeriesDataset,
    pub manifest: MirageManifest,
    /// Regime sign of every planted episode, keyed by episode start.
    pub episodes: Vec<(usize, f64)>,
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let (n, t_total) = (spec.n_nodes, spec.n_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // latent signals: sums of sinusoids with seeded phases
    let k = spec.n_latents();
    let latent_phases: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            spec.latent_periods
                .iter()
                .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
                .collect()
        })
        .collect();
    let norm = 1.0 / (spec.latent_periods.len().max(1) as f64).sqrt();

    let (regime, manifest, episodes) = plant_mirages(spec, &mut rng);

    let mut values = vec![0.0; t_total * n];
    for t in 0..t_total {
        let tod = (t % spec.daily_period) as f64 / spec.daily_period as f64;
        let latents: Vec<f64> = latent_phases
            .iter()
            .map(|phases| {
                spec.latent_periods
                    .iter()
                    .zip(phases)
                    .map(|(p, ph)| (std::f64::consts::TAU * t as f64 / p + ph).sin())
                    .sum::<f64>()
                    * norm
            })
            .collect();
        for node in 0..n {
            let mut v = spec.node_amplitudes[node] * (std::f64::consts::TAU * tod + spec.node_phases[node]).sin();
            if k > 0 {
                v += spec.latent_mix[node]
                    .iter()
                    .zip(&latents)
                    .map(|(w, z)| w * z)
                    .sum::<f64>();
            }
            v += regime[t];
            values[t * n + node] = v;
        }
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).unwrap();
        for v in values.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    // f32-representable, so the binary file holds the series exactly
    let values = values.into_iter().map(|v| v as f32 as f64).collect();
    let tensor = Tensor::new(vec![t_total, n, 1], values)?;
    let dataset = SeriesDataset::new(tensor, spec.interval_minutes, spec.split_ratios)?;
    Ok(SynthOutput {
        dataset,
        manifest,
        episodes,
    })
}

type Planted = (Vec<f64>, MirageManifest, Vec<(usize, f64)>);

fn plant_mirages(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Planted {
    let mut regime = vec![0.0; spec.n_steps];
    if spec.mirage_fraction <= 0.0 {
        return (regime, MirageManifest::default(), Vec::new());
    }
    let slots = spec.n_slots();
    let per_day = spec.daily_period / EPISODE_LEN;
    let wanted = (spec.mirage_fraction * slots as f64).ceil() as usize;

    // slots grouped by time of day, each group shuffled
    let mut groups: Vec<Vec<usize>> = (0..per_day)
        .map(|g| {
            let mut v: Vec<usize> = (g..slots).step_by(per_day).collect();
            v.shuffle(rng);
            v
        })
        .collect();
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    let mut placed = 0;
    while placed < wanted {
        let open: Vec<usize> = (0..per_day).filter(|&g| groups[g].len() >= 2).collect();
        let Some(&g) = open.choose(rng) else { break };
        let a = groups[g].pop().unwrap();
        let b = groups[g].pop().unwrap();
        chosen.push((a, b));
        placed += 2;
    }

    let mut pairs = Vec::new();
    let mut episodes = Vec::new();
    for (a, b) in chosen {
        let sign_a = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        for (slot, sign) in [(a, sign_a), (b, -sign_a)] {
            let start = slot * EPISODE_LEN;
            let level = sign * spec.mirage_amplitude;
            regime[start..start + CUE_LEN].fill(level);
            regime[start + CUE_LEN + GAP_LEN..start + EPISODE_LEN].fill(level);
            episodes.push((start, sign));
        }
        let (sa, sb) = (a * EPISODE_LEN, b * EPISODE_LEN);
        let window = CUE_LEN + GAP_LEN - 12;
        pairs.push(MiragePair {
            window_start_a: sa + window,
            window_start_b: sb + window,
            divergence_step: sa + CUE_LEN + GAP_LEN,
        });
        pairs.push(MiragePair {
            window_start_a: sb + window,
            window_start_b: sa + window,
            divergence_step: sb + CUE_LEN + GAP_LEN,
        });
    }
    pairs.sort_by_key(|p| p.window_start_a);
    episodes.sort_by_key(|e| e.0);
    (regime, MirageManifest { pairs }, episodes)
}

/// CSV with header `window_start_a,window_start_b,divergence_step`.
pub fn write_manifest(manifest: &MirageManifest, path: &Path) -> Result<()> {
    let mut out = String::from("window_start_a,window_start_b,divergence_step\n");
    for p in &manifest.pairs {
        out.push_str(&format!(
            "{},{},{}\n",
            p.window_start_a, p.window_start_b, p.divergence_step
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<MirageManifest> {
    let text = fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<usize> = line
            .split(',')
            .map(|v| v.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1)))?;
        if f.len() != 3 {
            return Err(Error::Format(format!("manifest line {} needs 3 fields", i + 1)));
        }
        pairs.push(MiragePair {
            window_start_a: f[0],
            window_start_b: f[1],
            divergence_step: f[2],
        });
    }
    Ok(MirageManifest { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silent_spec_gives_zero_series() {
        let mut spec = SynthSpec::sinusoid(3, 100, 24, 0.0, 1);
        spec.node_amplitudes = vec![0.0; 3];
        let out = synth_generate(&spec).unwrap();
        assert!(out.dataset.data().data().iter().all(|&v| v == 0.0));
        assert!(out.manifest.pairs.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let mut spec = SynthSpec::latent_mixture(4, 600, 2, 0.1, 9);
        spec.node_amplitudes = vec![1.0; 4];
        spec.mirage_fraction = 0.25;
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.manifest, b.manifest);
        spec.seed = 10;
        assert_ne!(synth_generate(&spec).unwrap().dataset, a.dataset);
    }

    #[test]
    fn planted_pairs_are_ambiguous_then_diverge() {
        let mut spec = SynthSpec::sinusoid(3, 2880, 288, 0.0, 4);
        spec.mirage_fraction = 0.2;
        let out = synth_generate(&spec).unwrap();
        let windows = spec.n_slots();
        assert!(out.manifest.pairs.len() >= (0.2 * windows as f64).floor() as usize);
        let ds = &out.dataset;
        for p in &out.manifest.pairs {
            assert_eq!(
                ds.window(p.window_start_a, p.window_start_a + 12),
                ds.window(p.window_start_b, p.window_start_b + 12)
            );
            let offset = p.divergence_step - p.window_start_a;
            let fa = ds.window(p.divergence_step, p.divergence_step + 1);
            let fb = ds.window(p.window_start_b + offset, p.window_start_b + offset + 1);
            assert_ne!(fa, fb);
        }
    }

    #[test]
    fn mirage_anchor_windows_sit_in_the_gap() {
        let m = MirageManifest {
            pairs: vec![MiragePair {
                window_start_a: 124,
                window_start_b: 412,
                divergence_step: 136,
            }],
        };
        let anchors = m.mirage_anchors(12, 12);
        assert_eq!(anchors, (124..136).collect::<Vec<_>>());
    }
}
