mod common;

use common::{gradcheck_params, random_tensor, rng};
use decoupled_mae::data::{synth_generate, SeriesDataset, SynthSpec};
use decoupled_mae::embedding::PatchConfig;
use decoupled_mae::mae::{
    masked_loss, masked_loss_value, pretrain, MaeCheckpoint, MaeConfig, MaskAxis, MaskSpec, MaskedAutoencoder,
    PretrainConfig, TrainingMeta,
};
use decoupled_mae::nn::ATTENTION_SCORES;
use decoupled_mae::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn tiny(axis: MaskAxis, d: usize, l: usize, t_p: usize, layers: usize) -> MaeConfig {
    MaeConfig {
        axis,
        patch: PatchConfig {
            patch_len: l,
            embed_dim: d,
            t_long: l * t_p,
        },
        encoder_layers: layers,
        decoder_layers: 1,
        heads: 2,
        ff_mult: 2,
        ..MaeConfig::default()
    }
}

/// Gives the zero-initialized regression layer random weights so every
/// parameter takes part in the loss.
fn randomize_regression(m: &mut MaskedAutoencoder<f64>, seed: u64) {
    let mut r = rng(seed);
    let id = m.params.regression.weight;
    let shape = m.store.value(id).shape().to_vec();
    m.store.get_mut(id).value = random_tensor(&mut r, &shape, 0.5);
    let tok = m.params.mask_token;
    let shape = m.store.value(tok).shape().to_vec();
    m.store.get_mut(tok).value = random_tensor(&mut r, &shape, 0.5);
}

#[test]
fn masked_loss_examples() {
    let q = Tensor::<f64>::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let truth = Tensor::<f64>::from_f64(&[1, 2, 2], &[0.0, 2.0, 5.0, 4.0]).unwrap();
    assert_eq!(masked_loss_value(&q, &truth).unwrap(), 0.75);
    assert_eq!(masked_loss_value(&q, &q).unwrap(), 0.0);
    assert_eq!(masked_loss_value(&q.map(|v| v + 1.0), &q).unwrap(), 1.0);
    assert!(masked_loss_value(&q, &Tensor::zeros(&[2, 2])).is_err());
}

#[test]
fn reconstruction_shapes() {
    // N=4, one hidden sensor, T_p=2, L=12
    let m = MaskedAutoencoder::<f64>::new(tiny(MaskAxis::Spatial, 8, 12, 2, 1), 0).unwrap();
    let x = Tensor::from_fn(&[24, 4, 1], |i| (i as f64 * 0.1).sin());
    let spec = MaskSpec::from_indices(MaskAxis::Spatial, 4, &[2]).unwrap();
    let (q, truth, _) = m.reconstruct(&x, &spec).unwrap();
    assert_eq!(q.shape(), &[2, 1, 12]);
    assert_eq!(truth.shape(), &[2, 1, 12]);

    let m = MaskedAutoencoder::<f64>::new(tiny(MaskAxis::Temporal, 8, 4, 6, 1), 0).unwrap();
    let x = Tensor::from_fn(&[24, 3, 1], |i| i as f64 * 0.01);
    let spec = m.sample_mask(3, 7).unwrap();
    assert_eq!(spec.num_masked(), 1);
    let (q, _, _) = m.reconstruct(&x, &spec).unwrap();
    assert_eq!(q.shape(), &[1, 3, 4]);

    let mut tape = Tape::no_grad();
    let h = m.encode_full(&mut tape, &x).unwrap();
    assert_eq!(tape.shape(h), &[6, 3, 8]);

    let m = MaskedAutoencoder::<f64>::new(tiny(MaskAxis::Mixed, 8, 4, 2, 1), 0).unwrap();
    let x = Tensor::from_fn(&[8, 4, 1], |i| i as f64 * 0.01);
    let spec = m.sample_mask(4, 1).unwrap();
    assert_eq!(spec.extent, 8);
    let (q, _, _) = m.reconstruct(&x, &spec).unwrap();
    assert_eq!(q.shape(), &[1, 2, 4]);
}

#[test]
fn empty_mask_decodes_to_nothing() {
    let m = MaskedAutoencoder::<f64>::new(tiny(MaskAxis::Spatial, 8, 4, 2, 1), 0).unwrap();
    let x = Tensor::from_fn(&[8, 3, 1], |i| i as f64);
    let spec = MaskSpec::empty(MaskAxis::Spatial, 3);
    let mut tape = Tape::no_grad();
    let e = m.embed(&mut tape, &x).unwrap();
    let v = m.visible(&mut tape, e, &spec).unwrap();
    let h = m.encode(&mut tape, v).unwrap();
    let q = m.pad_and_decode(&mut tape, h, &spec, (2, 3)).unwrap();
    assert_eq!(tape.shape(q), &[2, 0, 4]);
}

#[test]
fn wrong_window_length_is_rejected() {
    let m = MaskedAutoencoder::<f64>::new(tiny(MaskAxis::Temporal, 8, 4, 3, 1), 0).unwrap();
    assert!(m.encode_representation(&Tensor::zeros(&[8, 2, 1])).is_err());
    let spatial = MaskSpec::from_indices(MaskAxis::Spatial, 2, &[0]).unwrap();
    assert!(m.reconstruct(&Tensor::zeros(&[12, 2, 1]), &spatial).is_err());
}

#[test]
fn loss_ignores_visible_positions() {
    for trial in 0..100u64 {
        let mut r = rng(trial);
        let axis = [MaskAxis::Spatial, MaskAxis::Temporal, MaskAxis::Mixed][trial as usize % 3];
        let (t_p, n, l) = (r.gen_range(2..5), r.gen_range(2..6), r.gen_range(1..4));
        let extent = axis.extent(t_p, n);
        let spec = decoupled_mae::mae::sample_mask(axis, extent, r.gen_range(0.5..0.75), trial).unwrap();
        // decoder output over the whole grid; only hidden slots enter the loss
        let full = random_tensor(&mut r, &[extent, l], 1.0);
        let truth = random_tensor(&mut r, &[spec.num_masked(), l], 1.0);
        let mut tape = Tape::new();
        let out = tape.leaf(full);
        let q = tape.index_select(out, 0, &spec.masked).unwrap();
        let tv = tape.constant(truth);
        let loss = masked_loss(&mut tape, q, tv).unwrap();
        let g = tape.backward(loss).unwrap();
        let g = g.get(out).unwrap();
        for &v in &spec.visible {
            assert!(g.data()[v * l..(v + 1) * l].iter().all(|&x| x == 0.0));
        }
        assert!(spec
            .masked
            .iter()
            .any(|&m| g.data()[m * l..(m + 1) * l].iter().any(|&x| x != 0.0)));
    }
}

#[test]
fn spatial_encoder_is_patch_permutation_equivariant() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let m = MaskedAutoencoder::<f64>::new(tiny(MaskAxis::Spatial, 8, 2, 4, 2), seed).unwrap();
        let x = random_tensor(&mut r, &[4, 3, 8], 1.0);
        let perm = [2usize, 0, 3, 1];
        let run = |x: Tensor<f64>| {
            let mut tape = Tape::no_grad();
            let v = tape.constant(x);
            let h = m.encode(&mut tape, v).unwrap();
            tape.value(h).clone()
        };
        let a = run(x.clone()).index_select(0, &perm).unwrap();
        let b = run(x.index_select(0, &perm).unwrap());
        assert_eq!(a, b);
    }
}

#[test]
fn temporal_encoder_is_node_permutation_equivariant() {
    for seed in 0..5 {
        let mut r = rng(seed + 10);
        let m = MaskedAutoencoder::<f64>::new(tiny(MaskAxis::Temporal, 8, 2, 3, 2), seed).unwrap();
        let x = random_tensor(&mut r, &[3, 5, 8], 1.0);
        let perm = [4usize, 1, 0, 3, 2];
        let run = |x: Tensor<f64>| {
            let mut tape = Tape::no_grad();
            let v = tape.constant(x);
            let h = m.encode(&mut tape, v).unwrap();
            tape.value(h).clone()
        };
        let a = run(x.clone()).index_select(1, &perm).unwrap();
        let b = run(x.index_select(1, &perm).unwrap());
        assert_eq!(a, b);
    }
}

#[test]
fn attention_buffers_follow_the_attended_axis() {
    let x = Tensor::from_fn(&[12, 5, 1], |i| (i as f64).cos());
    for (axis, score) in [(MaskAxis::Spatial, [3, 2, 5, 5]), (MaskAxis::Temporal, [5, 2, 3, 3])] {
        let m = MaskedAutoencoder::<f64>::new(tiny(axis, 8, 4, 3, 2), 0).unwrap();
        let mut tape = Tape::no_grad();
        m.encode_full(&mut tape, &x).unwrap();
        let shapes = tape.tagged_shapes(ATTENTION_SCORES);
        assert_eq!(shapes.len(), 2);
        assert!(shapes.iter().all(|s| s == &score));
    }
}

#[test]
fn masked_index_order_does_not_matter() {
    let m = MaskedAutoencoder::<f64>::new(tiny(MaskAxis::Spatial, 8, 4, 2, 1), 3).unwrap();
    let x = Tensor::from_fn(&[8, 5, 1], |i| (i as f64 * 0.3).sin());
    let a = MaskSpec::from_indices(MaskAxis::Spatial, 5, &[4, 0, 2]).unwrap();
    let b = MaskSpec::from_indices(MaskAxis::Spatial, 5, &[2, 4, 0]).unwrap();
    assert_eq!(m.reconstruct(&x, &a).unwrap().0, m.reconstruct(&x, &b).unwrap().0);
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for axis in [MaskAxis::Spatial, MaskAxis::Temporal] {
        // N=3, T_p=2, D=8, L=4, one encoder layer
        let mut m = MaskedAutoencoder::<f64>::new(tiny(axis, 8, 4, 2, 1), 11).unwrap();
        randomize_regression(&mut m, 5);
        let mut r = rng(2);
        let x = random_tensor(&mut r, &[8, 3, 1], 1.0);
        let spec = match axis {
            MaskAxis::Spatial => MaskSpec::from_indices(axis, 3, &[1]).unwrap(),
            _ => MaskSpec::from_indices(axis, 2, &[0]).unwrap(),
        };
        let (config, params) = (m.config.clone(), m.params.clone());
        let err = gradcheck_params(&mut m.store, &|tape, store| {
            let model = MaskedAutoencoder {
                config: config.clone(),
                params: params.clone(),
                store: store.clone(),
            };
            // L1 has kinks; the smooth square keeps the check well defined
            let (_, q) = model.forward_loss(tape, &x, &spec)?;
            let sq = tape.mul(q, q)?;
            Ok(tape.mean(sq))
        });
        assert!(err < 1e-4, "{axis:?}: {err}");
    }
}

#[test]
fn representation_is_deterministic_and_shaped() {
    let m = MaskedAutoencoder::<f32>::new(tiny(MaskAxis::Temporal, 8, 4, 3, 1), 0).unwrap();
    let x = Tensor::<f32>::from_fn(&[12, 4, 1], |i| (i as f32 * 0.2).sin());
    let a = m.encode_representation(&x).unwrap();
    assert_eq!(a.shape(), &[3, 4, 8]);
    assert_eq!(a, m.encode_representation(&x).unwrap());
}

#[test]
fn constant_input_isolates_positional_shift() {
    // with a constant window the embedding differs across patches only by
    // the positional term, so shifting the window leaves the output unchanged
    let m = MaskedAutoencoder::<f64>::new(tiny(MaskAxis::Temporal, 8, 4, 3, 1), 0).unwrap();
    let x = Tensor::full(&[12, 2, 1], 0.7);
    let h = m.encode_representation(&x).unwrap();
    let h2 = m.encode_representation(&Tensor::full(&[12, 2, 1], 0.7)).unwrap();
    assert_eq!(h, h2);
    let t0 = h.index_select(0, &[0]).unwrap();
    let t1 = h.index_select(0, &[1]).unwrap();
    assert_ne!(t0, t1);
    let n0 = h.index_select(1, &[0]).unwrap();
    let n1 = h.index_select(1, &[1]).unwrap();
    assert_ne!(n0, n1);
}

fn small_series(spec: SynthSpec) -> SeriesDataset {
    synth_generate(&spec).unwrap().dataset
}

#[test]
fn pretraining_on_zeros_reaches_zero_loss() {
    let mut spec = SynthSpec::sinusoid(3, 96, 24, 0.0, 0);
    spec.node_amplitudes = vec![0.0; 3];
    let ds = small_series(spec);
    let cfg = PretrainConfig {
        epochs: 1,
        batch_size: 2,
        stride: 4,
        ..PretrainConfig::default()
    };
    let (_, hist) = pretrain::<f64>(&ds, &tiny(MaskAxis::Temporal, 8, 4, 4, 1), &cfg).unwrap();
    assert!(hist.final_loss().abs() < 1e-6, "{}", hist.final_loss());
}

#[test]
fn pretraining_is_deterministic_and_checkpoints_round_trip() {
    let ds = small_series(SynthSpec::sinusoid(4, 200, 24, 0.1, 3));
    let ds = decoupled_mae::data::fit_and_apply_zscore(&ds).unwrap();
    let mae = tiny(MaskAxis::Spatial, 8, 4, 4, 1);
    let cfg = PretrainConfig {
        epochs: 2,
        batch_size: 2,
        stride: 8,
        val_windows: 3,
        seed: 9,
        ..PretrainConfig::default()
    };
    let (m1, h1) = pretrain::<f32>(&ds, &mae, &cfg).unwrap();
    let (_, h2) = pretrain::<f32>(&ds, &mae, &cfg).unwrap();
    assert!(h1.step_losses.len() >= 5);
    assert_eq!(&h1.step_losses[..5], &h2.step_losses[..5]);
    assert_eq!(h1, h2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    let ckpt = MaeCheckpoint {
        model: m1,
        norm: ds.norm.clone(),
        dataset_hash: ds.content_hash(),
        training: TrainingMeta {
            epochs: 2,
            seed: 9,
            final_loss: h1.final_loss(),
            best_epoch: h1.best_epoch,
            best_val_loss: h1.best_val_loss,
        },
    };
    ckpt.save(&path).unwrap();
    let back = MaeCheckpoint::<f32>::load(&path).unwrap();
    assert_eq!(back.axis(), MaskAxis::Spatial);
    assert_eq!(back.training, ckpt.training);
    let x = ds.window(0, 16).cast::<f32>();
    assert_eq!(
        back.model.encode_representation(&x).unwrap(),
        ckpt.model.encode_representation(&x).unwrap()
    );
    let hist_csv = dir.path().join("loss.csv");
    h1.write_csv(&hist_csv).unwrap();
    let text = std::fs::read_to_string(&hist_csv).unwrap();
    assert!(text.starts_with("step,train_loss,val_loss\n"));
    assert_eq!(text.lines().count(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn visible_and_masked_partition_the_axis(extent in 4usize..200, ratio in 0.05f64..0.95, seed: u64) {
        prop_assume!(decoupled_mae::mae::masked_count(extent, ratio) >= 1);
        let s = decoupled_mae::mae::sample_mask(MaskAxis::Temporal, extent, ratio, seed).unwrap();
        prop_assert_eq!(s.num_masked() + s.num_visible(), extent);
        prop_assert_eq!(s.num_masked(), (extent as f64 * ratio + 1e-9).floor() as usize);
        let mut all: Vec<usize> = s.masked.iter().chain(&s.visible).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..extent).collect::<Vec<_>>());
    }
}
