//! Property-level acceptance checks shared by the focused suites and the
//! acceptance report. Each returns a one-line summary on success and the
//! first violation on failure.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unger::corpus::EmbeddingMatrix;
use unger::evalkit::{dominance_similarity, ndcg_at_k, recall_at_k};
use unger::generator::{GenConfig, GenModel};
use unger::inference::{beam_decode, sequence_log_prob};
use unger::quantizer::{fit, quantization_error, random_assignment, UnicodeTable};

use super::grad_suite::{forward_agreement, gradient_suite};
use super::oracles::{
    brute_force_metrics, canonical_codes, enumerate_ranking, residual_quantize_exhaustive,
};
use super::{randomize_model, FD_REL_TOL};

pub type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn matrix(rows: &[Vec<f64>]) -> EmbeddingMatrix {
    let rows: Vec<Vec<f32>> = rows
        .iter()
        .map(|r| r.iter().map(|&v| v as f32).collect())
        .collect();
    EmbeddingMatrix::from_rows(&rows).unwrap()
}

pub fn gradients() -> Outcome {
    let start = Instant::now();
    let results = gradient_suite();
    let (worst, worst_err) = results
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, e)| (n.clone(), *e))
        .unwrap_or_default();
    if let Some((name, e)) = results.iter().find(|(_, e)| !(*e <= FD_REL_TOL)) {
        return Err(format!("{name}: relative error {e:.3e} > {FD_REL_TOL:e}"));
    }
    if let Some((name, gap)) = forward_agreement().into_iter().find(|(_, g)| !(*g <= 1e-5)) {
        return Err(format!(
            "{name}: tape and reference losses differ by {gap:.3e}"
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs <= 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} cases, worst {worst} at {worst_err:.2e}, {secs:.1}s",
        results.len()
    ))
}

/// Two pairs of pairs in the plane: far apart on x, then split on y, then
/// a small x jitter. The gaps are wide enough that k-means++ practically
/// never seeds both centroids inside one group.
pub fn pairs_of_pairs() -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for cx in [-100.0, 100.0] {
        for dy in [-2.0, 2.0] {
            for dx in [-0.05, 0.05] {
                out.push(vec![cx + dx, dy]);
            }
        }
    }
    out
}

/// 30 points in 4D: three coarse centers plus three fine offsets plus noise.
pub fn coarse_and_fine(seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let mut vecs = |n: usize, scale: f64| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..4).map(|_| r.random_range(-scale..scale)).collect())
            .collect()
    };
    let coarse = vecs(3, 10.0);
    let fine = vecs(3, 2.0);
    let noise = vecs(30, 0.05);
    (0..30)
        .map(|i| {
            (0..4)
                .map(|j| coarse[i % 3][j] + fine[(i / 3) % 3][j] + noise[i][j])
                .collect()
        })
        .collect()
}

fn gaussian_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng(seed);
    (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut r)).collect())
        .collect()
}

pub fn quantizer() -> Outcome {
    let start = Instant::now();
    let instances = [
        ("8x2", pairs_of_pairs(), 2, 2),
        ("30x4", coarse_and_fine(7), 3, 2),
    ];
    for (name, points, k, levels) in &instances {
        let (oracle, _) = residual_quantize_exhaustive(points, *k, *levels);
        let oracle = canonical_codes(&oracle, *levels);
        let e = matrix(points);
        for seed in 0..8 {
            let q = fit(&e, *k, *levels, seed).map_err(|e| e.to_string())?;
            let got = canonical_codes(q.table.codes(), *levels);
            ensure(got == oracle, || {
                format!("{name} seed {seed}: codes {got:?} != oracle {oracle:?}")
            })?;
            for (i, v) in points.iter().enumerate() {
                let rec = q.codebooks.reconstruct(q.table.code(i));
                for j in 0..v.len() {
                    let back = rec[j] + q.residuals[i * v.len() + j];
                    ensure((back - v[j]).abs() <= 1e-5, || {
                        format!(
                            "{name} seed {seed}: item {i} reconstructs to {back} not {}",
                            v[j]
                        )
                    })?;
                }
            }
        }
    }
    let gauss = gaussian_rows(100, 8, 3);
    let e = matrix(&gauss);
    let q = fit(&e, 4, 2, 11).map_err(|e| e.to_string())?;
    let err = quantization_error(&e, &q.codebooks, &q.table).map_err(|e| e.to_string())?;
    let direct = q.residuals.iter().map(|r| r * r).sum::<f64>() / 100.0;
    ensure((err - direct).abs() <= 1e-5, || {
        format!("quantization error {err} != residual norm {direct}")
    })?;
    for (name, points) in [
        ("8x2", pairs_of_pairs()),
        ("30x4", coarse_and_fine(7)),
        ("100x8", gauss),
    ] {
        let e = matrix(&points);
        for seed in 0..4 {
            let mut last = f64::INFINITY;
            for levels in 1..=4 {
                let q = fit(&e, 3, levels, seed).map_err(|e| e.to_string())?;
                let err =
                    quantization_error(&e, &q.codebooks, &q.table).map_err(|e| e.to_string())?;
                ensure(err <= last, || {
                    format!("{name} seed {seed}: error rose to {err} at L={levels}")
                })?;
                last = err;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs <= 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "codes match the exhaustive oracle on 8x2 and 30x4 over 8 seeds, {secs:.1}s"
    ))
}

/// A random code table: either distinct codes drawn from all `k^levels`, or
/// free draws with collisions resolved by a disambiguation level.
pub fn random_table(r: &mut ChaCha8Rng) -> UnicodeTable {
    let k: usize = r.random_range(2..=4);
    let levels = r.random_range(1..=3);
    let capacity = k.pow(levels as u32);
    let seed = r.random();
    if r.random_bool(0.5) {
        let n = r.random_range(2..=capacity.min(64));
        random_assignment(n, k, levels, seed, true).unwrap()
    } else {
        let n = r.random_range(2..=64);
        random_assignment(n, k, levels, seed, false).unwrap()
    }
}

pub fn random_micro_model(table: &UnicodeTable, seed: u64) -> GenModel {
    let config = GenConfig {
        dim: 8,
        heads: 2,
        hidden: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        max_history: 3,
        beta: 1.0,
        n_neg: 4,
    };
    let mut model = GenModel::new(config, table.level_sizes(), 4, seed).unwrap();
    // fresh output heads are zero, which would make every ranking a tie
    randomize_model(&mut model.store, seed, 0.8);
    model
}

pub fn beam_exactness(n_models: usize) -> Outcome {
    let start = Instant::now();
    let mut r = rng(99);
    let mut disambiguated = 0;
    let mut worst_gap: f64 = 0.0;
    for m in 0..n_models {
        let table = random_table(&mut r);
        disambiguated += table.has_disambiguation() as usize;
        let model = random_micro_model(&table, 1000 + m as u64);
        let n = table.n_items();
        for _ in 0..2 {
            let len = r.random_range(1..=3);
            let history: Vec<usize> = (0..len).map(|_| r.random_range(0..n)).collect();
            let (ranked, _) =
                beam_decode(&model, &table, &history, n, n).map_err(|e| e.to_string())?;
            let oracle = enumerate_ranking(&model, &table, &history);
            ensure(
                ranked.items() == oracle.iter().map(|e| e.0).collect::<Vec<_>>(),
                || {
                    format!(
                        "model {m}, history {history:?}: beam {:?} != enumeration {oracle:?}",
                        ranked.entries
                    )
                },
            )?;
            for (&(item, score), &(_, exact)) in ranked.entries.iter().zip(&oracle) {
                worst_gap = worst_gap.max((score - exact).abs());
                let forced =
                    sequence_log_prob(&model, &table, &history, item).map_err(|e| e.to_string())?;
                ensure((score - forced).abs() <= 1e-4, || {
                    format!("model {m}: item {item} beam score {score} vs teacher-forced {forced}")
                })?;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs <= 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{n_models} models ({disambiguated} with a disambiguation level), max score gap {worst_gap:.1e}, {secs:.1}s"
    ))
}

pub fn metrics() -> Outcome {
    let mut r = rng(5);
    let n_items = 300;
    let mut rankings = Vec::new();
    let mut truth = Vec::new();
    for _ in 0..200 {
        let mut items: Vec<usize> = (0..n_items).collect();
        items.shuffle(&mut r);
        items.truncate(r.random_range(1..=40));
        truth.push(r.random_range(0..n_items));
        rankings.push(items);
    }
    // a few guaranteed hits at shallow ranks
    for u in 0..40 {
        let p = u % rankings[u].len();
        truth[u] = rankings[u][p];
    }
    let wrapped: Vec<Option<Vec<usize>>> = rankings.iter().cloned().map(Some).collect();
    for k in [1, 3, 5, 10, 20, 50] {
        let (recall, ndcg) = brute_force_metrics(&rankings, &truth, k);
        let got_r = recall_at_k(&wrapped, &truth, k).map_err(|e| e.to_string())?;
        let got_n = ndcg_at_k(&wrapped, &truth, k).map_err(|e| e.to_string())?;
        ensure((got_r - recall).abs() <= 1e-12, || {
            format!("Recall@{k} {got_r} vs {recall}")
        })?;
        ensure((got_n - ndcg).abs() <= 1e-12, || {
            format!("NDCG@{k} {got_n} vs {ndcg}")
        })?;
    }
    let at = |pos: usize| -> f64 {
        let mut list = vec![7, 8, 9];
        list.insert(pos, 42);
        ndcg_at_k(&[Some(list)], &[42], 10).unwrap()
    };
    ensure(at(0) == 1.0, || format!("rank-1 NDCG {}", at(0)))?;
    ensure(at(2) == 0.5, || format!("rank-3 NDCG {}", at(2)))?;
    Ok("200 users at K in {1,3,5,10,20,50} match the scan; rank-1 = 1, rank-3 = 0.5".into())
}

fn random_matrix(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
    matrix(&gaussian_rows(n, d, seed))
}

pub fn dominance() -> Outcome {
    let mut worst: f64 = 0.0;
    for t in 0..20u64 {
        let n = 30 + 5 * t as usize;
        let s = random_matrix(n, 6, 3 * t);
        let c = random_matrix(n, 4, 3 * t + 1);
        let e = random_matrix(n, 5, 3 * t + 2);
        let rep = dominance_similarity(&s, &c, &e, 6, t).map_err(|e| e.to_string())?;
        let sum = rep.similarity_semantic + rep.similarity_collaborative;
        worst = worst.max((sum - 1.0).abs());
        ensure((sum - 1.0).abs() <= 1e-12, || {
            format!("trial {t}: shares sum to {sum}")
        })?;
        let swapped = dominance_similarity(&c, &s, &e, 6, t).map_err(|e| e.to_string())?;
        ensure(
            swapped.similarity_semantic == rep.similarity_collaborative
                && swapped.similarity_collaborative == rep.similarity_semantic
                && swapped.kl_s_e == rep.kl_c_e
                && swapped.kl_c_e == rep.kl_s_e,
            || format!("trial {t}: swap gives {swapped:?} for {rep:?}"),
        )?;
        let same = dominance_similarity(&s, &c, &s, 6, t).map_err(|e| e.to_string())?;
        ensure(same.kl_c_e > 0.0, || format!("trial {t}: KL(C|E) is zero"))?;
        ensure(
            same.similarity_semantic == 1.0 && same.similarity_collaborative == 0.0,
            || format!("trial {t}: E = S gives {same:?}"),
        )?;
    }
    Ok(format!(
        "20 random triples: max |sum - 1| {worst:.1e}, E = S -> (1, 0), swap exact"
    ))
}
