//! Test-only oracles. Nothing here calls into the backward pass.

#![allow(dead_code)]

use decoupled_mae::tensor::{ParamStore, Tape, Tensor, Var};
use decoupled_mae::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), with exact zero when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}

/// Central finite-difference gradient of a scalar function of `inputs`
/// with respect to input `which`, evaluated forward-only.
pub fn numeric_grad(
    inputs: &[Tensor<f64>],
    which: usize,
    f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Vec<f64> {
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).item()
    };
    let mut grad = Vec::with_capacity(inputs[which].numel());
    for i in 0..inputs[which].numel() {
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[i] += FD_STEP;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[i] -= FD_STEP;
        grad.push((eval(&plus) - eval(&minus)) / (2.0 * FD_STEP));
    }
    grad
}

/// Worst relative error between reverse-mode and finite-difference
/// gradients over all inputs.
pub fn gradcheck(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let numeric = numeric_grad(inputs, i, f);
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Same check over all parameters of `store` jointly, where `f` builds the
/// loss from the store. Parameters whose true gradient vanishes (e.g. a
/// bias feeding a softmax) are judged as part of the whole vector.
pub fn gradcheck_params(
    store: &mut ParamStore<f64>,
    f: &dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
) -> f64 {
    store.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, store).unwrap();
    let grads = tape.backward(out).unwrap();
    grads.accumulate_into(&tape, store);

    let eval = |s: &ParamStore<f64>| -> f64 {
        let mut t = Tape::no_grad();
        let o = f(&mut t, s).unwrap();
        t.value(o).item()
    };
    let ids: Vec<_> = store.ids().collect();
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    for id in ids {
        let analytic = store
            .get(id)
            .grad
            .as_ref()
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; store.get(id).value.numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let fp = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let fm = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            numeric.push((fp - fm) / (2.0 * FD_STEP));
        }
        all_a.extend(analytic);
        all_n.extend(numeric);
    }
    rel_error(&all_a, &all_n)
}

pub type Case = (
    &'static str,
    Vec<Vec<usize>>,
    Box<dyn Fn(&mut Tape<f64>, &[Var]) -> decoupled_mae::Result<Var>>,
);

/// One finite-difference check per differentiable primitive.
pub fn primitive_cases() -> Vec<Case> {
    // A fixed random weighting so that the scalar loss depends on every
    // output element differently.
    fn weighted(tape: &mut Tape<f64>, y: Var) -> decoupled_mae::Result<Var> {
        let shape = tape.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let w = Tensor::from_fn(&shape, |i| {
            ((i * 7919 % 13) as f64 - 6.0) / 5.0 + 0.05 * (n as f64).sqrt()
        });
        let w = tape.constant(w);
        let p = tape.mul(y, w)?;
        Ok(tape.sum(p))
    }
    vec![
        (
            "add_broadcast",
            vec![vec![2, 3, 4], vec![4]],
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                weighted(t, y)
            }),
        ),
        (
            "sub",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(|t, v| {
                let y = t.sub(v[0], v[1])?;
                weighted(t, y)
            }),
        ),
        (
            "mul_broadcast",
            vec![vec![2, 3], vec![3]],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                weighted(t, y)
            }),
        ),
        (
            "scale",
            vec![vec![5]],
            Box::new(|t, v| {
                let y = t.scale(v[0], -1.7);
                weighted(t, y)
            }),
        ),
        (
            "matmul_batched",
            vec![vec![2, 3, 4], vec![2, 4, 2]],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted(t, y)
            }),
        ),
        (
            "matmul_shared_rhs",
            vec![vec![2, 3, 4], vec![4, 5]],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted(t, y)
            }),
        ),
        (
            "permute",
            vec![vec![2, 3, 4]],
            Box::new(|t, v| {
                let y = t.permute(v[0], &[2, 0, 1])?;
                weighted(t, y)
            }),
        ),
        (
            "reshape",
            vec![vec![2, 6]],
            Box::new(|t, v| {
                let y = t.reshape(v[0], &[3, 4])?;
                weighted(t, y)
            }),
        ),
        (
            "softmax_last",
            vec![vec![3, 5]],
            Box::new(|t, v| {
                let y = t.softmax_last(v[0])?;
                weighted(t, y)
            }),
        ),
        (
            "layer_norm",
            vec![vec![4, 6], vec![6], vec![6]],
            Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted(t, y)
            }),
        ),
        (
            "gelu",
            vec![vec![7]],
            Box::new(|t, v| {
                let y = t.gelu(v[0]);
                weighted(t, y)
            }),
        ),
        (
            "tanh",
            vec![vec![7]],
            Box::new(|t, v| {
                let y = t.tanh(v[0]);
                weighted(t, y)
            }),
        ),
        (
            "index_select",
            vec![vec![3, 4, 2]],
            Box::new(|t, v| {
                let y = t.index_select(v[0], 1, &[3, 0, 0, 2])?;
                weighted(t, y)
            }),
        ),
        (
            "concat",
            vec![vec![2, 3], vec![2, 2]],
            Box::new(|t, v| {
                let y = t.concat(&[v[0], v[1]], 1)?;
                weighted(t, y)
            }),
        ),
        (
            "mean",
            vec![vec![3, 3]],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[0])?;
                Ok(t.mean(y))
            }),
        ),
        (
            "abs",
            vec![vec![6]],
            Box::new(|t, v| {
                let y = t.abs(v[0]);
                weighted(t, y)
            }),
        ),
        (
            "l1_loss",
            vec![vec![2, 5], vec![2, 5]],
            Box::new(|t, v| t.l1_loss(v[0], v[1])),
        ),
    ]
}
