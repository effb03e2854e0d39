//! Trie-constrained beam search over item codes and the decoding cost
//! benchmark.

mod bench;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{InteractionCorpus, SplitSelector};
use crate::error::{invalid, Result};
use crate::generator::{history_codes, GenModel};
use crate::numerics::Tape;
use crate::quantizer::{Trie, UnicodeTable};

pub use bench::{bench_cost, merge_ranked, CostReport, Stream};

/// Default beam width.
pub const DEFAULT_BEAM: usize = 100;

/// Items ranked by descending log-probability; ties by item index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<(usize, f64)>,
}

impl RankedList {
    pub fn items(&self) -> Vec<usize> {
        self.entries.iter().map(|&(i, _)| i).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorts `(item, score)` pairs into ranking order and keeps `k`.
    pub fn from_scores(mut entries: Vec<(usize, f64)>, k: usize) -> Self {
        entries.sort_by(rank_order);
        entries.truncate(k);
        Self { entries }
    }
}

pub(crate) fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Work done by one decode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeStats {
    /// Decoder invocations (one batched call per expanded level).
    pub decoder_forwards: usize,
}

#[derive(Clone, Debug)]
struct Hypothesis {
    prefix: Vec<u32>,
    node: usize,
    score: f64,
}

/// Beam search restricted to code prefixes present in `table`.
///
/// The history is encoded once. At every level each live hypothesis is
/// extended by the trie children of its node; extensions that reach an
/// item move to the finished list, the rest compete for `beam_width`
/// slots. Scores are raw sums of per-level log-probabilities.
pub fn beam_decode(
    model: &GenModel,
    table: &UnicodeTable,
    history: &[usize],
    beam_width: usize,
    k: usize,
) -> Result<(RankedList, DecodeStats)> {
    if k == 0 || beam_width < k {
        return Err(invalid!("beam width {beam_width} must be >= k = {k} >= 1"));
    }
    if history.is_empty() {
        return Err(invalid!("cannot decode from an empty history"));
    }
    let trie = table.trie();
    if trie.is_empty() {
        return Err(invalid!("code table trie is empty"));
    }
    if let Some(&bad) = history.iter().find(|&&i| i >= table.n_items()) {
        return Err(invalid!("history item {bad} is not in the code table"));
    }
    model.check_table(table)?;
    let mut stats = DecodeStats::default();
    let mut tape = Tape::new(&model.store);
    let memory = model.prepare(&mut tape, &history_codes(table, history))?;
    let mut beam = vec![Hypothesis {
        prefix: Vec::new(),
        node: Trie::ROOT,
        score: 0.0,
    }];
    let mut finished: Vec<(usize, f64)> = Vec::new();
    while !beam.is_empty() {
        let prefixes: Vec<&[u32]> = beam.iter().map(|h| h.prefix.as_slice()).collect();
        let lp = model.next_code_log_probs(&mut tape, &memory, &prefixes)?;
        stats.decoder_forwards += 1;
        let lp = tape.value(lp);
        let width = lp.last_dim();
        let mut next = Vec::new();
        for (h, hyp) in beam.iter().enumerate() {
            let row = &lp.data()[h * width..(h + 1) * width];
            for &(code, child) in &trie.node(hyp.node).children {
                let score = hyp.score + row[code as usize] as f64;
                let node = trie.node(child);
                if let Some(item) = node.item {
                    finished.push((item, score));
                } else {
                    let mut prefix = hyp.prefix.clone();
                    prefix.push(code);
                    next.push(Hypothesis {
                        prefix,
                        node: child,
                        score,
                    });
                }
            }
        }
        next.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.prefix.cmp(&b.prefix))
        });
        next.truncate(beam_width);
        beam = next;
    }
    Ok((RankedList::from_scores(finished, k), stats))
}

/// Teacher-forced log-probability of `item`'s full code given `history`.
pub fn sequence_log_prob(
    model: &GenModel,
    table: &UnicodeTable,
    history: &[usize],
    item: usize,
) -> Result<f64> {
    let code = table.code(item);
    let mut tape = Tape::new(&model.store);
    let states = model.teacher_forced(&mut tape, &[history_codes(table, history)], &[code])?;
    let mut total = 0.0;
    for (l, &c) in code.iter().enumerate() {
        let logits = model.level_logits(&mut tape, states, l)?;
        let lp = tape.log_softmax(logits)?;
        total += tape.value(lp).data()[c as usize] as f64;
    }
    Ok(total)
}

/// Number of worker threads from `UNGER_THREADS` (default 1).
pub fn threads_from_env() -> usize {
    std::env::var("UNGER_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Decodes every user of `corpus` for the chosen split. Output `i`
/// belongs to user `i`; results do not depend on `threads`.
pub fn batch_recommend(
    model: &GenModel,
    table: &UnicodeTable,
    corpus: &InteractionCorpus,
    selector: SplitSelector,
    beam_width: usize,
    k: usize,
    threads: usize,
) -> Result<Vec<RankedList>> {
    let users: Vec<usize> = (0..corpus.n_users()).collect();
    let max_len = model.config.max_history;
    let run = |chunk: &[usize]| -> Result<Vec<RankedList>> {
        chunk
            .iter()
            .map(|&u| {
                let h = corpus.history_for(u, selector, max_len);
                beam_decode(model, table, h, beam_width, k).map(|(r, _)| r)
            })
            .collect()
    };
    let threads = threads.max(1).min(users.len().max(1));
    if threads == 1 {
        return run(&users);
    }
    let chunk = users.len().div_ceil(threads);
    let parts: Vec<Result<Vec<RankedList>>> = std::thread::scope(|s| {
        let handles: Vec<_> = users
            .chunks(chunk)
            .map(|c| s.spawn(move || run(c)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(invalid!("decoding worker panicked")))
            })
            .collect()
    });
    let mut out = Vec::with_capacity(users.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
