//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

pub mod criteria;
pub mod grad_suite;
pub mod reference;

use unger::numerics::{ParamStore, Tape, Tensor, Var};
use unger::Result;

pub const FD_EPS: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-3;
/// Gradient norms below this are compared absolutely; an exactly-zero
/// gradient (e.g. of an attention key bias) otherwise has no relative scale.
pub const FD_ABS_FLOOR: f64 = 1e-4;

/// Norm-wise relative error `|a - n| / max(|a|, |n|, FD_ABS_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(FD_ABS_FLOOR)
}

/// Central finite differences of a scalar function of a flat vector.
pub fn central_differences(x: &[f32], eps: f64, f: &dyn Fn(&[f32]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            work[i] = (orig as f64 + eps) as f32;
            let up = f(&work);
            work[i] = (orig as f64 - eps) as f32;
            let down = f(&work);
            work[i] = orig;
            // the stored perturbation is rounded to f32; divide by what was applied
            let h = (orig as f64 + eps) as f32 as f64 - (orig as f64 - eps) as f32 as f64;
            (up - down) / h
        })
        .collect()
}

/// Checks the gradient of a graph built from leaf inputs against central
/// differences. Returns the norm-wise relative error of each input.
pub fn check_inputs(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Vec<f64> {
    check_inputs_in(&ParamStore::new(), inputs, build)
}

/// [`check_inputs`] for graphs that also read (fixed) parameters.
pub fn check_inputs_in(
    store: &ParamStore,
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Vec<f64> {
    let mut tape = Tape::new(store);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true).unwrap())
        .collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let analytic: Vec<f64> = match grads.get(vars[i]) {
                Some(g) => g.iter().map(|&v| v as f64).collect(),
                None => vec![0.0; t.numel()],
            };
            let eval = |x: &[f32]| -> f64 {
                let mut tape = Tape::new(store);
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let t = if j == i {
                            Tensor::new(t.shape(), x.to_vec()).unwrap()
                        } else {
                            t.clone()
                        };
                        tape.leaf(t, false).unwrap()
                    })
                    .collect();
                let l = build(&mut tape, &vars).unwrap();
                tape.value(l).item().unwrap() as f64
            };
            let numeric = central_differences(t.data(), FD_EPS, &eval);
            relative_error(&analytic, &numeric)
        })
        .collect()
}

/// Checks every parameter of `store` for a loss built from it. Returns
/// `(name, relative error)` for each parameter that receives a gradient.
pub fn check_params(
    store: &ParamStore,
    loss_fn: &dyn Fn(&mut Tape) -> Result<Var>,
) -> Vec<(String, f64)> {
    let mut tape = Tape::new(store);
    let loss = loss_fn(&mut tape).unwrap();
    let grads = tape.backward(loss).unwrap();
    drop(tape);
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    with_grads.accumulate(&grads).unwrap();
    let ids: Vec<_> = store.ids().collect();
    let mut out = Vec::new();
    for id in ids {
        let Some(g) = with_grads.get(id).grad() else {
            continue;
        };
        let analytic: Vec<f64> = g.iter().map(|&v| v as f64).collect();
        let eval = |x: &[f32]| -> f64 {
            let mut s = store.clone();
            s.set_value(id, x).unwrap();
            let mut tape = Tape::new(&s);
            let l = loss_fn(&mut tape).unwrap();
            tape.value(l).item().unwrap() as f64
        };
        let numeric = central_differences(store.get(id).data(), FD_EPS, &eval);
        out.push((
            store.name(id).to_string(),
            relative_error(&analytic, &numeric),
        ));
    }
    out
}

/// Deterministic pseudo-random values in `[-scale, scale]`.
pub fn random_values(n: usize, seed: u64, scale: f32) -> Vec<f32> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-scale..=scale)).collect()
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, random_values(n, seed, 1.0)).unwrap()
}

/// Overwrites every parameter with seeded uniform values in `[-scale, scale]`.
pub fn randomize_model(store: &mut ParamStore, seed: u64, scale: f32) {
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let n = store.get(id).numel();
        store
            .set_value(id, &random_values(n, seed + 17 * k as u64, scale))
            .unwrap();
    }
}
