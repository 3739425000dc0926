mod common;

use common::{gradcheck_params, random_tensor, rng};
use decoupled_mae::data::SplitKind;
use decoupled_mae::data::{fit_and_apply_zscore, synth_generate, SeriesDataset, SynthSpec};
use decoupled_mae::embedding::PatchConfig;
use decoupled_mae::forecast::{
    augment, evaluate, evaluate_predictions, extract_representations, predict_anchors, split_anchors, train_forecaster,
    truncate_and_project, ForecastTrainConfig, Forecaster, ForecasterCheckpoint, ForecasterConfig, RepresentationCache,
};
use decoupled_mae::mae::{pretrain, MaeCheckpoint, MaeConfig, MaskAxis, PretrainConfig, TrainingMeta};
use decoupled_mae::nn::Mlp;
use decoupled_mae::tensor::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn small_cfg(hidden: usize) -> ForecasterConfig {
    ForecasterConfig {
        hidden,
        conv_channels: 8,
        ..ForecasterConfig::default()
    }
}

fn zero_head(f: &mut Forecaster<f64>) {
    for id in [f.head.output.weight, f.head.output.bias, f.head.hidden.bias] {
        let shape = f.store.value(id).shape().to_vec();
        f.store.get_mut(id).value = Tensor::zeros(&shape);
    }
}

#[test]
fn predictor_shapes_and_zero_head() {
    let mut f = Forecaster::<f64>::baseline(ForecasterConfig::default(), 0).unwrap();
    let x = Tensor::zeros(&[12, 170, 1]);
    let mut tape = Tape::no_grad();
    let h = f.hidden_state(&mut tape, &x).unwrap();
    assert_eq!(tape.shape(h), &[170, 64]);
    assert!(tape.value(h).all_finite());
    zero_head(&mut f);
    let y = f.predict(&Tensor::zeros(&[12, 307, 1]), &[]).unwrap();
    assert_eq!(y.shape(), &[12, 307, 1]);
    assert!(y.data().iter().all(|&v| v == 0.0));
    assert!(f.predict(&Tensor::zeros(&[11, 3, 1]), &[]).is_err());
}

#[test]
fn zero_forecast_denormalizes_to_training_mean() {
    let ds = synth_generate(&SynthSpec::sinusoid(2, 200, 24, 0.1, 1))
        .unwrap()
        .dataset;
    let ds = fit_and_apply_zscore(&ds).unwrap();
    let norm = ds.norm.clone().unwrap();
    let mut f = Forecaster::<f64>::baseline(small_cfg(4), 0).unwrap();
    zero_head(&mut f);
    let mut y = f.predict(&ds.window(0, 12), &[]).unwrap();
    norm.denormalize_slice(y.data_mut());
    assert!(y.data().iter().all(|&v| (v - norm.mean[0]).abs() < 1e-12));
}

#[test]
fn predictor_is_node_wise() {
    let f = Forecaster::<f64>::baseline(small_cfg(6), 3).unwrap();
    let x = random_tensor(&mut rng(1), &[12, 5, 1], 1.0);
    let perm = [3usize, 0, 4, 2, 1];
    let run = |x: &Tensor<f64>| {
        let mut tape = Tape::no_grad();
        let h = f.hidden_state(&mut tape, x).unwrap();
        tape.value(h).clone()
    };
    let a = run(&x).index_select(0, &perm).unwrap();
    let b = run(&x.index_select(1, &perm).unwrap());
    assert_eq!(a, b);
}

#[test]
fn truncation_examples() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(0);
    let mlp = Mlp::new(&mut store, &mut r, "p", 96, 8, 8, 1.0);
    let mut tape = Tape::no_grad();
    let h = tape.constant(random_tensor(&mut r, &[72, 5, 96], 1.0));
    let y = truncate_and_project(&mut tape, &store, h, 1, &mlp).unwrap();
    assert_eq!(tape.shape(y), &[5, 8]);
    assert!(truncate_and_project(&mut tape, &store, h, 73, &mlp).is_err());

    // the whole representation when T' = T_p
    let wide = Mlp::new(&mut store, &mut r, "w", 3 * 4, 8, 8, 1.0);
    let h = tape.constant(random_tensor(&mut r, &[3, 2, 4], 1.0));
    let y = truncate_and_project(&mut tape, &store, h, 3, &wide).unwrap();
    assert_eq!(tape.shape(y), &[2, 8]);

    // zero map
    let zero = Mlp::new(&mut store, &mut r, "z", 4, 8, 8, 0.0);
    let h = tape.constant(random_tensor(&mut r, &[3, 2, 4], 1.0));
    let y = truncate_and_project(&mut tape, &store, h, 1, &zero).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    // last patch only: flattening order is [node, (patch, channel)]
    let h = Tensor::<f64>::from_fn(&[3, 2, 4], |i| i as f64);
    let mut tape = Tape::new();
    let hv = tape.constant(h);
    let tail = tape.slice_axis(hv, 0, 1, 3).unwrap();
    let tail = tape.permute(tail, &[1, 0, 2]).unwrap();
    let flat = tape.reshape(tail, &[2, 8]).unwrap();
    assert_eq!(tape.value(flat).at(&[1, 4]), 20.0);
}

#[test]
fn augmentation_is_an_elementwise_sum() {
    let mut r = rng(4);
    let hf = random_tensor(&mut r, &[2, 3], 1.0);
    let s = random_tensor(&mut r, &[2, 3], 1.0);
    let t = random_tensor(&mut r, &[2, 3], 1.0);
    let mut tape = Tape::no_grad();
    let (a, b, c) = (
        tape.constant(hf.clone()),
        tape.constant(s.clone()),
        tape.constant(t.clone()),
    );
    let out = augment(&mut tape, a, &[b, c]).unwrap();
    for i in 0..6 {
        let want = hf.data()[i] + s.data()[i] + t.data()[i];
        assert_eq!(tape.value(out).data()[i], want);
    }
    let z = tape.constant(Tensor::zeros(&[2, 3]));
    let same = augment(&mut tape, a, &[z, z]).unwrap();
    assert_eq!(tape.value(same), &hf);
    let zh = tape.constant(Tensor::zeros(&[2, 3]));
    let sum = augment(&mut tape, zh, &[b, c]).unwrap();
    for i in 0..6 {
        assert_eq!(tape.value(sum).data()[i], s.data()[i] + t.data()[i]);
    }
    let bad = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(augment(&mut tape, a, &[bad]).is_err());
}

#[test]
fn head_and_predictor_gradients_match_finite_differences() {
    let cfg = ForecasterConfig {
        hidden: 2,
        conv_channels: 2,
        t_out: 2,
        truncate: 1,
        branch_init_gain: 1.0,
        ..ForecasterConfig::default()
    };
    let mut f = Forecaster::<f64>::new(cfg, &[(MaskAxis::Temporal, 4)], 2).unwrap();
    let mut r = rng(9);
    let x = random_tensor(&mut r, &[12, 2, 1], 1.0);
    let rep = random_tensor(&mut r, &[3, 2, 4], 1.0);
    let (config, predictor, head, branches) = (f.config.clone(), f.predictor.clone(), f.head, f.branches.clone());
    let err = gradcheck_params(&mut f.store, &|tape, store| {
        let m = Forecaster {
            config: config.clone(),
            predictor: predictor.clone(),
            head,
            branches: branches.clone(),
            store: store.clone(),
        };
        let y = m.forward(tape, &x, std::slice::from_ref(&rep))?;
        let sq = tape.mul(y, y)?;
        Ok(tape.mean(sq))
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn zeroed_branches_reproduce_the_baseline_bitwise() {
    let cfg = small_cfg(8);
    let base = Forecaster::<f64>::baseline(cfg.clone(), 5).unwrap();
    let mut aug = Forecaster::<f64>::new(cfg, &[(MaskAxis::Spatial, 8), (MaskAxis::Temporal, 8)], 5).unwrap();
    for b in aug.branches.clone() {
        for id in [b.mlp.output.weight, b.mlp.output.bias] {
            let shape = aug.store.value(id).shape().to_vec();
            aug.store.get_mut(id).value = Tensor::zeros(&shape);
        }
    }
    let mut r = rng(8);
    for _ in 0..5 {
        let x = random_tensor(&mut r, &[12, 4, 1], 2.0);
        let reps = vec![
            random_tensor(&mut r, &[2, 4, 8], 1.0),
            random_tensor(&mut r, &[2, 4, 8], 1.0),
        ];
        assert_eq!(base.predict(&x, &[]).unwrap(), aug.predict(&x, &reps).unwrap());
    }
}

fn brute_force(
    pred: &[f64],
    truth: &[f64],
    steps: usize,
    inner: usize,
    thr: f64,
    step: Option<usize>,
) -> (f64, f64, Option<f64>) {
    let (mut abs, mut sq, mut n, mut pct, mut np) = (0.0, 0.0, 0usize, 0.0, 0usize);
    for i in 0..pred.len() {
        if let Some(s) = step {
            if (i / inner) % steps != s {
                continue;
            }
        }
        let e = pred[i] - truth[i];
        abs += e.abs();
        sq += e * e;
        n += 1;
        if truth[i].abs() >= thr {
            pct += (e / truth[i]).abs();
            np += 1;
        }
    }
    (
        abs / n as f64,
        (sq / n as f64).sqrt(),
        if np == 0 { None } else { Some(pct / np as f64 * 100.0) },
    )
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn metrics_match_scalar_oracle() {
    let mut r = rng(77);
    for _ in 0..1000 {
        let (s, n) = (r.gen_range(1..4), r.gen_range(1..4));
        let shape = [s, 12, n, 1];
        let pred = random_tensor(&mut r, &shape, 3.0);
        let truth = random_tensor(&mut r, &shape, 3.0);
        let m = evaluate(&pred, &truth, 0.5, &[3, 6, 12]).unwrap();
        let o = brute_force(pred.data(), truth.data(), 12, n, 0.5, None);
        assert!(close(m.overall.mae, o.0) && close(m.overall.rmse, o.1));
        match (m.overall.mape, o.2) {
            (Some(a), Some(b)) => assert!(close(a, b)),
            (None, None) => {}
            other => panic!("{other:?}"),
        }
        for h in &m.horizons {
            let o = brute_force(pred.data(), truth.data(), 12, n, 0.5, Some(h.horizon - 1));
            assert!(close(h.metrics.mae, o.0) && close(h.metrics.rmse, o.1));
            assert_eq!(h.metrics.mape.is_some(), o.2.is_some());
            if let (Some(a), Some(b)) = (h.metrics.mape, o.2) {
                assert!(close(a, b));
            }
        }
    }
    let p = Tensor::from_f64(&[1, 2, 1], &[1.0, 2.0]).unwrap();
    let m = evaluate(&p, &p, 1e-2, &[1, 2]).unwrap();
    assert_eq!((m.overall.mae, m.overall.rmse, m.overall.mape), (0.0, 0.0, Some(0.0)));
}

#[test]
fn horizon_picks_that_step() {
    // errors equal the step number, so horizon k reports exactly k
    let truth = Tensor::<f64>::zeros(&[2, 12, 3, 1]);
    let pred = Tensor::from_fn(&[2, 12, 3, 1], |i| ((i / 3) % 12 + 1) as f64);
    let m = evaluate(&pred, &truth, 1e-2, &[3, 6, 12]).unwrap();
    let got: Vec<f64> = m.horizons.iter().map(|h| h.metrics.mae).collect();
    assert_eq!(got, vec![3.0, 6.0, 12.0]);
    assert_eq!(m.overall.mae, 6.5);
    assert_eq!(m.overall.mape, None);
}

fn dataset(seed: u64) -> SeriesDataset {
    let ds = synth_generate(&SynthSpec::sinusoid(3, 240, 48, 0.1, seed))
        .unwrap()
        .dataset;
    fit_and_apply_zscore(&ds).unwrap()
}

#[test]
fn raw_mae_is_normalized_mae_times_std() {
    let ds = dataset(2);
    let f = Forecaster::<f64>::baseline(small_cfg(8), 1).unwrap();
    let anchors = split_anchors(&ds, &f.config, 48, SplitKind::Val, 1);
    let p = predict_anchors(&f, &ds, &anchors, &[]).unwrap();
    let m = evaluate_predictions(&p, ds.norm.as_ref(), 1e-2).unwrap();
    let std = ds.norm.as_ref().unwrap().std[0];
    assert!((m.raw.overall.mae - m.normalized.overall.mae * std).abs() < 1e-9);
    assert!((m.raw.overall.rmse - m.normalized.overall.rmse * std).abs() < 1e-9);
}

fn encoder(ds: &SeriesDataset, axis: MaskAxis) -> MaeCheckpoint<f64> {
    let mae = MaeConfig {
        axis,
        patch: PatchConfig {
            patch_len: 12,
            embed_dim: 8,
            t_long: 48,
        },
        encoder_layers: 1,
        heads: 2,
        ff_mult: 2,
        mask_ratio: 0.34,
        ..MaeConfig::default()
    };
    let cfg = PretrainConfig {
        epochs: 1,
        batch_size: 4,
        stride: 24,
        val_windows: 2,
        ..PretrainConfig::default()
    };
    let (model, h) = pretrain::<f64>(ds, &mae, &cfg).unwrap();
    MaeCheckpoint {
        model,
        norm: ds.norm.clone(),
        dataset_hash: ds.content_hash(),
        training: TrainingMeta {
            epochs: 1,
            final_loss: h.final_loss(),
            ..TrainingMeta::default()
        },
    }
}

fn train_cfg() -> ForecastTrainConfig {
    ForecastTrainConfig {
        t_long: 48,
        epochs: 2,
        batch_size: 8,
        train_stride: 3,
        ..ForecastTrainConfig::default()
    }
}

#[test]
fn encoders_stay_frozen_and_training_is_deterministic() {
    let ds = dataset(3);
    let s = encoder(&ds, MaskAxis::Spatial);
    let t = encoder(&ds, MaskAxis::Temporal);
    let (s0, t0) = (s.model.store.flatten(), t.model.store.flatten());
    let (f1, h1) = train_forecaster(&ds, &[&s, &t], &small_cfg(8), &train_cfg(), None).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&s.model.store.flatten()), bits(&s0));
    assert_eq!(bits(&t.model.store.flatten()), bits(&t0));
    let (f2, h2) = train_forecaster(&ds, &[&s, &t], &small_cfg(8), &train_cfg(), None).unwrap();
    assert_eq!(&h1.step_losses[..5], &h2.step_losses[..5]);
    assert_eq!(f1.store.flatten(), f2.store.flatten());
}

#[test]
fn no_branches_trains_exactly_like_the_baseline() {
    let ds = dataset(4);
    let (f, h) = train_forecaster::<f64>(&ds, &[], &small_cfg(8), &train_cfg(), None).unwrap();
    assert!(f.branches.is_empty());
    let (g, h2) = train_forecaster::<f64>(&ds, &[], &small_cfg(8), &train_cfg(), None).unwrap();
    assert_eq!(h, h2);
    let x = ds.window(100, 112);
    assert_eq!(f.predict(&x, &[]).unwrap(), g.predict(&x, &[]).unwrap());
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let ds = dataset(5);
    let other = dataset(6);
    let s = encoder(&other, MaskAxis::Spatial);
    match train_forecaster(&ds, &[&s], &small_cfg(8), &train_cfg(), None) {
        Err(decoupled_mae::Error::Data(msg)) => assert!(msg.contains("mismatch")),
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn representation_cache_round_trips() {
    let ds = dataset(7);
    let t = encoder(&ds, MaskAxis::Temporal);
    let dir = tempfile::tempdir().unwrap();
    let cache = RepresentationCache::new(dir.path());
    let anchors = split_anchors(&ds, &small_cfg(8), 48, SplitKind::Val, 5);
    let cold = extract_representations(&ds, &t.model, &anchors, 2, Some(&cache)).unwrap();
    let warm = extract_representations(&ds, &t.model, &anchors, 2, Some(&cache)).unwrap();
    assert_eq!(cold, warm);
    assert_eq!(cold[0].shape(), &[2, 3, 8]);
    let direct = extract_representations(&ds, &t.model, &anchors, 2, None).unwrap();
    for (a, b) in cold.iter().zip(&direct) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-5));
    }
}

#[test]
fn forecaster_checkpoint_round_trips() {
    let ds = dataset(8);
    let (f, _) = train_forecaster::<f32>(&ds, &[], &small_cfg(8), &train_cfg(), None).unwrap();
    let ck = ForecasterCheckpoint {
        model: f,
        t_long: 48,
        norm: ds.norm.clone(),
        dataset_hash: ds.content_hash(),
        encoder_hashes: vec![],
        seed: 0,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.ckpt");
    ck.save(&path).unwrap();
    let back = ForecasterCheckpoint::<f32>::load(&path).unwrap();
    let x = ds.window(50, 62).cast::<f32>();
    assert_eq!(back.model.predict(&x, &[]).unwrap(), ck.model.predict(&x, &[]).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_nonnegative_and_ordered(values in prop::collection::vec(-5.0f64..5.0, 24)) {
        let pred = Tensor::from_f64(&[1, 12, 1, 1], &values[..12]).unwrap();
        let truth = Tensor::from_f64(&[1, 12, 1, 1], &values[12..]).unwrap();
        let m = evaluate(&pred, &truth, 1e-2, &[3, 6, 12]).unwrap();
        prop_assert!(m.overall.mae >= 0.0);
        prop_assert!(m.overall.rmse + 1e-12 >= m.overall.mae);
    }
}
