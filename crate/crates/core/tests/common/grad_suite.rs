//! Finite-difference checks of every tape operation, the shared layers and
//! both stage losses on micro models.

use rand::SeedableRng;
use unger::corpus::EmbeddingMatrix;
use unger::fusion::{AlignDenominator, FusionConfig, FusionModel};
use unger::generator::{distillation_loss, GenConfig, GenModel};
use unger::numerics::{
    attention_mask, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore, Tape, Tensor,
    Var,
};
use unger::Result;

use super::reference::{
    self, numeric_gradient, stage1_loss, stage2_loss, FusionShape, GenShape, Params, Rows,
};
use super::{
    check_inputs_in, random_tensor, random_values, randomize_model, relative_error, FD_EPS,
};

/// `sum(v * w)` with a fixed random `w`, so every output entry matters.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(random_tensor(&shape, seed))?;
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

/// Random values kept at least `gap` away from zero.
fn away_from_zero(shape: &[usize], seed: u64, gap: f32) -> Tensor {
    let n = shape.iter().product();
    let data = random_values(n, seed, 1.0)
        .into_iter()
        .map(|x| {
            if x.abs() < gap {
                x.signum() * gap + x
            } else {
                x
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let t = random_tensor;
    vec![
        (
            "matmul",
            vec![t(&[3, 4], 1), t(&[4, 5], 2)],
            Box::new(|tp, v| {
                let y = tp.matmul(v[0], v[1])?;
                weighted_sum(tp, y, 10)
            }),
        ),
        (
            "matmul_transposed",
            vec![t(&[3, 4], 3), t(&[5, 4], 4)],
            Box::new(|tp, v| {
                let y = tp.matmul_with(v[0], v[1], true)?;
                weighted_sum(tp, y, 11)
            }),
        ),
        (
            "matmul_batched_lhs",
            vec![t(&[2, 3, 4], 5), t(&[4, 2], 6)],
            Box::new(|tp, v| {
                let y = tp.matmul(v[0], v[1])?;
                weighted_sum(tp, y, 12)
            }),
        ),
        (
            "bmm",
            vec![t(&[2, 3, 4], 7), t(&[2, 4, 5], 8)],
            Box::new(|tp, v| {
                let y = tp.bmm(v[0], v[1], false)?;
                weighted_sum(tp, y, 13)
            }),
        ),
        (
            "bmm_transposed",
            vec![t(&[2, 3, 4], 9), t(&[2, 5, 4], 10)],
            Box::new(|tp, v| {
                let y = tp.bmm(v[0], v[1], true)?;
                weighted_sum(tp, y, 14)
            }),
        ),
        (
            "add",
            vec![t(&[3, 4], 11), t(&[3, 4], 12)],
            Box::new(|tp, v| {
                let y = tp.add(v[0], v[1])?;
                weighted_sum(tp, y, 15)
            }),
        ),
        (
            "add_broadcast",
            vec![t(&[2, 3, 4], 13), t(&[4], 14)],
            Box::new(|tp, v| {
                let y = tp.add(v[0], v[1])?;
                weighted_sum(tp, y, 16)
            }),
        ),
        (
            "add_broadcast_matrix",
            vec![t(&[2, 3, 4], 15), t(&[3, 4], 16)],
            Box::new(|tp, v| {
                let y = tp.add(v[0], v[1])?;
                weighted_sum(tp, y, 17)
            }),
        ),
        (
            "sub",
            vec![t(&[3, 4], 17), t(&[4], 18)],
            Box::new(|tp, v| {
                let y = tp.sub(v[0], v[1])?;
                weighted_sum(tp, y, 18)
            }),
        ),
        (
            "mul",
            vec![t(&[3, 4], 19), t(&[3, 4], 20)],
            Box::new(|tp, v| {
                let y = tp.mul(v[0], v[1])?;
                weighted_sum(tp, y, 19)
            }),
        ),
        (
            "mul_broadcast",
            vec![t(&[3, 4], 21), t(&[4], 22)],
            Box::new(|tp, v| {
                let y = tp.mul(v[0], v[1])?;
                weighted_sum(tp, y, 20)
            }),
        ),
        (
            "scale",
            vec![t(&[3, 4], 23)],
            Box::new(|tp, v| {
                let y = tp.scale(v[0], -2.5)?;
                weighted_sum(tp, y, 21)
            }),
        ),
        (
            "relu",
            vec![away_from_zero(&[4, 5], 24, 0.05)],
            Box::new(|tp, v| {
                let y = tp.relu(v[0])?;
                weighted_sum(tp, y, 22)
            }),
        ),
        (
            "softmax",
            vec![t(&[3, 5], 25)],
            Box::new(|tp, v| {
                let y = tp.softmax(v[0])?;
                weighted_sum(tp, y, 23)
            }),
        ),
        (
            "log_softmax",
            vec![t(&[3, 5], 26)],
            Box::new(|tp, v| {
                let y = tp.log_softmax(v[0])?;
                weighted_sum(tp, y, 24)
            }),
        ),
        (
            "logsumexp",
            vec![t(&[3, 5], 27)],
            Box::new(|tp, v| {
                let y = tp.logsumexp(v[0])?;
                weighted_sum(tp, y, 25)
            }),
        ),
        (
            "normalize",
            vec![t(&[3, 6], 28)],
            Box::new(|tp, v| {
                let y = tp.normalize(v[0], 1e-5)?;
                weighted_sum(tp, y, 26)
            }),
        ),
        (
            "l2_normalize",
            vec![t(&[3, 6], 29)],
            Box::new(|tp, v| {
                let y = tp.l2_normalize(v[0])?;
                weighted_sum(tp, y, 27)
            }),
        ),
        (
            "reshape",
            vec![t(&[2, 6], 30)],
            Box::new(|tp, v| {
                let y = tp.reshape(v[0], &[3, 4])?;
                let y = tp.softmax(y)?;
                weighted_sum(tp, y, 28)
            }),
        ),
        (
            "transpose12",
            vec![t(&[2, 3, 4, 2], 31)],
            Box::new(|tp, v| {
                let y = tp.transpose12(v[0])?;
                let y = tp.softmax(y)?;
                weighted_sum(tp, y, 29)
            }),
        ),
        (
            "slice_last",
            vec![t(&[3, 6], 32)],
            Box::new(|tp, v| {
                let y = tp.slice_last(v[0], 2, 3)?;
                weighted_sum(tp, y, 30)
            }),
        ),
        (
            "concat_last",
            vec![t(&[3, 2], 33), t(&[3, 4], 34)],
            Box::new(|tp, v| {
                let y = tp.concat_last(v[0], v[1])?;
                let y = tp.softmax(y)?;
                weighted_sum(tp, y, 31)
            }),
        ),
        (
            "gather_rows",
            vec![t(&[4, 3], 35)],
            Box::new(|tp, v| {
                let y = tp.gather_rows(v[0], &[2, 0, 2, 3, 2])?;
                weighted_sum(tp, y, 32)
            }),
        ),
        (
            "pick",
            vec![t(&[4, 5], 36)],
            Box::new(|tp, v| {
                let y = tp.pick(v[0], &[1, 4, 0, 1])?;
                weighted_sum(tp, y, 33)
            }),
        ),
        (
            "cross_entropy",
            vec![t(&[4, 5], 37)],
            Box::new(|tp, v| tp.cross_entropy(v[0], &[1, 4, 0, 1])),
        ),
        (
            "sum",
            vec![t(&[3, 4], 38)],
            Box::new(|tp, v| {
                let y = tp.mul(v[0], v[0])?;
                tp.sum(y)
            }),
        ),
        (
            "mean",
            vec![t(&[3, 4], 39)],
            Box::new(|tp, v| {
                let y = tp.mul(v[0], v[0])?;
                tp.mean(y)
            }),
        ),
        (
            "tile0",
            vec![t(&[1, 2, 3], 40)],
            Box::new(|tp, v| {
                let y = tp.tile0(v[0], 3)?;
                weighted_sum(tp, y, 34)
            }),
        ),
    ]
}

fn rows(t: &Tensor) -> Rows {
    t.data()
        .chunks(t.last_dim())
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

/// `sum(y * w)` over f64 rows with the same weights as [`weighted_sum`].
fn weighted_sum_rows(y: &Rows, seed: u64) -> f64 {
    let w = random_values(y.len() * y[0].len(), seed, 1.0);
    y.iter().flatten().zip(w).map(|(a, b)| a * b as f64).sum()
}

fn layer_cases() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let randomize = |store: &mut ParamStore, seed: u64| {
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let n = store.get(id).numel();
            store
                .set_value(id, &random_values(n, seed + k as u64, 0.5))
                .unwrap();
        }
    };
    let mut push = |tag: &str, (g, _): (Vec<(String, f64)>, f64)| {
        out.extend(g.into_iter().map(|(n, e)| (format!("{tag}/{n}"), e)));
    };

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 4, 3, true, &mut rng).unwrap();
    randomize(&mut store, 100);
    let x = random_tensor(&[2, 4], 41);
    push(
        "linear",
        against_reference(
            &store,
            &|tp| {
                let x = tp.constant(x.clone())?;
                let y = lin.forward(tp, x)?;
                weighted_sum(tp, y, 40)
            },
            &|p| weighted_sum_rows(&reference::linear(p, "lin", &rows(&x)), 40),
        ),
    );

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 5).unwrap();
    randomize(&mut store, 200);
    let x = random_tensor(&[3, 5], 42);
    push(
        "layer_norm",
        against_reference(
            &store,
            &|tp| {
                let x = tp.constant(x.clone())?;
                let y = ln.forward(tp, x)?;
                weighted_sum(tp, y, 41)
            },
            &|p| weighted_sum_rows(&reference::layer_norm(p, "ln", &rows(&x)), 41),
        ),
    );

    let mut store = ParamStore::new();
    let ffn = FeedForward::new(&mut store, "ffn", 4, 6, &mut rng).unwrap();
    randomize(&mut store, 300);
    let x = random_tensor(&[3, 4], 43);
    push(
        "feed_forward",
        against_reference(
            &store,
            &|tp| {
                let x = tp.constant(x.clone())?;
                let y = ffn.forward(tp, x)?;
                weighted_sum(tp, y, 42)
            },
            &|p| weighted_sum_rows(&reference::feed_forward(p, "ffn", &rows(&x)), 42),
        ),
    );

    let mut store = ParamStore::new();
    let att = MultiHeadAttention::new(&mut store, "att", 4, 2, &mut rng).unwrap();
    randomize(&mut store, 400);
    let q = random_tensor(&[2, 3, 4], 44);
    let m = random_tensor(&[2, 5, 4], 45);
    let allowed = |b: usize, i: usize, j: usize| j <= i + 1 + b;
    let mask = attention_mask(2, 2, 3, 5, allowed);
    push(
        "attention",
        against_reference(
            &store,
            &|tp| {
                let q = tp.constant(q.clone())?;
                let m = tp.constant(m.clone())?;
                let mask = tp.constant(mask.clone())?;
                let y = att.forward(tp, q, m, Some(mask))?;
                weighted_sum(tp, y, 43)
            },
            &|p| {
                let (qr, mr) = (rows(&q), rows(&m));
                let mut y = Vec::new();
                for b in 0..2 {
                    y.extend(reference::attention(
                        p,
                        "att",
                        2,
                        &qr[b * 3..(b + 1) * 3].to_vec(),
                        &mr[b * 5..(b + 1) * 5].to_vec(),
                        &|i, j| allowed(b, i, j),
                    ));
                }
                weighted_sum_rows(&y, 43)
            },
        ),
    );
    let errs = check_inputs_in(&store, &[q.clone(), m.clone()], &|tp, v| {
        let mask = tp.constant(mask.clone())?;
        let y = att.forward(tp, v[0], v[1], Some(mask))?;
        weighted_sum(tp, y, 43)
    });
    out.push(("attention/query_input".into(), errs[0]));
    out.push(("attention/memory_input".into(), errs[1]));
    out
}

/// Tape gradients of every parameter against central differences of the
/// f64 reference, plus the relative gap between the two forward values.
fn against_reference(
    store: &ParamStore,
    tape_loss: &dyn Fn(&mut Tape) -> Result<Var>,
    reference: &dyn Fn(&Params) -> f64,
) -> (Vec<(String, f64)>, f64) {
    let mut tape = Tape::new(store);
    let loss = tape_loss(&mut tape).unwrap();
    let value = tape.value(loss).item().unwrap() as f64;
    let grads = tape.backward(loss).unwrap();
    drop(tape);
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    with_grads.accumulate(&grads).unwrap();
    let params = Params::from_store(store);
    let ref_value = reference(&params);
    let mut out = Vec::new();
    for id in store.ids() {
        let name = store.name(id);
        let analytic: Vec<f64> = match with_grads.get(id).grad() {
            Some(g) => g.iter().map(|&v| v as f64).collect(),
            None => vec![0.0; store.get(id).numel()],
        };
        let numeric = numeric_gradient(&params, name, FD_EPS, reference);
        out.push((name.to_string(), relative_error(&analytic, &numeric)));
    }
    (out, (value - ref_value).abs() / ref_value.abs().max(1.0))
}

fn stage1_cases() -> (Vec<(String, f64)>, Vec<(String, f64)>) {
    let mut grads = Vec::new();
    let mut forward = Vec::new();
    for denominator in [AlignDenominator::Inclusive, AlignDenominator::Exclusive] {
        let cfg = FusionConfig {
            dim: 4,
            heads: 2,
            hidden: 8,
            max_history: 4,
            tau: 0.7,
            alpha: 0.5,
            denominator,
        };
        let mut model = FusionModel::new(cfg, 6, Some(5), 11).unwrap();
        randomize_model(&mut model.store, 500, 0.6);
        let sem_values = random_values(30, 501, 1.0);
        let semantic = EmbeddingMatrix::new(6, 5, sem_values.clone()).unwrap();
        let sem_rows: Vec<Vec<f64>> = sem_values
            .chunks(5)
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect();
        let histories: Vec<&[usize]> = vec![&[0, 3, 5], &[2], &[5, 1, 4, 2, 0]];
        let targets = [1usize, 4, 3];
        let items = [1usize, 4, 3, 0];
        let shape = FusionShape {
            heads: 2,
            max_history: 4,
            tau: 0.7,
            inclusive: denominator == AlignDenominator::Inclusive,
        };
        let tag = format!("{denominator:?}").to_lowercase();
        let (g, f) = against_reference(
            &model.store,
            &|tp| {
                let seq = model.next_item_loss(tp, &histories, &targets)?;
                let a = model.alignment_loss(tp, &items, &semantic)?;
                let a = tp.scale(a, 0.5)?;
                tp.add(seq, a)
            },
            &|p| stage1_loss(p, &shape, &histories, &targets, &items, &sem_rows, 0.5),
        );
        grads.extend(g.into_iter().map(|(n, e)| (format!("stage1_{tag}/{n}"), e)));
        forward.push((format!("stage1_{tag}"), f));
    }
    (grads, forward)
}

fn stage2_cases() -> (Vec<(String, f64)>, Vec<(String, f64)>) {
    let cfg = GenConfig {
        dim: 4,
        heads: 2,
        hidden: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        max_history: 3,
        beta: 1.0,
        n_neg: 2,
    };
    // K = 3 codes on L = 2 levels plus a disambiguation level of width 2
    let levels = vec![3, 3, 2];
    let mut model = GenModel::new(cfg, levels.clone(), 5, 12).unwrap();
    randomize_model(&mut model.store, 600, 0.6);
    let h0: Vec<&[u32]> = vec![&[0, 1], &[2, 2, 1]];
    let h1: Vec<&[u32]> = vec![&[1, 0]];
    let histories = vec![h0, h1.clone(), h1];
    let targets: Vec<&[u32]> = vec![&[2, 0], &[1, 1, 0], &[0, 2]];
    let candidates = random_tensor(&[3, 3, 5], 601);
    let cand_rows: Vec<Vec<Vec<f64>>> = candidates
        .data()
        .chunks(15)
        .map(|b| {
            b.chunks(5)
                .map(|r| r.iter().map(|&v| v as f64).collect())
                .collect()
        })
        .collect();
    let shape = GenShape {
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        max_history: 3,
        level_sizes: levels,
    };
    let (g, f) = against_reference(
        &model.store,
        &|tp| {
            let states = model.teacher_forced(tp, &histories, &targets)?;
            let gen = model.gen_loss(tp, states, &targets)?;
            let out = model.distill_outputs(tp, states, &targets)?;
            let cand = tp.constant(candidates.clone())?;
            let d = distillation_loss(tp, out, cand)?;
            tp.add(gen, d)
        },
        &|p| stage2_loss(p, &shape, &histories, &targets, &cand_rows, 1.0),
    );
    (
        g.into_iter()
            .map(|(n, e)| (format!("stage2/{n}"), e))
            .collect(),
        vec![("stage2".to_string(), f)],
    )
}

/// Tape gradients of every leaf input against central differences of an
/// f64 formula, plus the relative gap between the two forward values.
fn inputs_against_reference(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    reference: &dyn Fn(&[Vec<f64>]) -> f64,
) -> (Vec<f64>, f64) {
    let mut tape = Tape::detached();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true).unwrap())
        .collect();
    let loss = build(&mut tape, &vars).unwrap();
    let value = tape.value(loss).item().unwrap() as f64;
    let grads = tape.backward(loss).unwrap();
    let x: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let ref_value = reference(&x);
    let errs = (0..inputs.len())
        .map(|i| {
            let analytic: Vec<f64> = match grads.get(vars[i]) {
                Some(g) => g.iter().map(|&v| v as f64).collect(),
                None => vec![0.0; inputs[i].numel()],
            };
            let mut work = x.clone();
            let numeric: Vec<f64> = (0..x[i].len())
                .map(|j| {
                    work[i][j] = x[i][j] + FD_EPS;
                    let up = reference(&work);
                    work[i][j] = x[i][j] - FD_EPS;
                    let down = reference(&work);
                    work[i][j] = x[i][j];
                    (up - down) / (2.0 * FD_EPS)
                })
                .collect();
            relative_error(&analytic, &numeric)
        })
        .collect();
    (errs, (value - ref_value).abs() / ref_value.abs().max(1.0))
}

/// Relative gap between tape and reference values of every op case and
/// both stage losses.
pub fn forward_agreement() -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = op_cases()
        .into_iter()
        .map(|(name, inputs, build)| {
            let (_, gap) = inputs_against_reference(&inputs, &*build, &*reference::ops::get(name));
            (format!("op/{name}"), gap)
        })
        .collect();
    out.extend(stage1_cases().1);
    out.extend(stage2_cases().1);
    out
}

/// `(case, relative error)` for every checked gradient.
pub fn gradient_suite() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (name, inputs, build) in op_cases() {
        let (errs, _) = inputs_against_reference(&inputs, &*build, &*reference::ops::get(name));
        for (i, e) in errs.into_iter().enumerate() {
            out.push((format!("op/{name}/input{i}"), e));
        }
    }
    out.extend(layer_cases());
    out.extend(stage1_cases().0);
    out.extend(stage2_cases().0);
    out
}
