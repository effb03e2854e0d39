use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{beam_decode, rank_order, RankedList};
use crate::error::{invalid, Result};
use crate::generator::GenModel;
use crate::quantizer::UnicodeTable;

/// One decoding stream: a model and the code table it generates.
#[derive(Clone, Copy, Debug)]
pub struct Stream<'a> {
    pub model: &'a GenModel,
    pub table: &'a UnicodeTable,
}

/// Latency and storage of unified (one stream) or dual (two streams)
/// decoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub mode: String,
    pub n_queries: usize,
    pub beam_width: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub decoder_forwards: usize,
    pub table_bytes: usize,
}

/// Merges per-stream rankings by raw score; an item found by several
/// streams keeps its best score.
pub fn merge_ranked(lists: &[RankedList], k: usize) -> RankedList {
    let mut best: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    for l in lists {
        for &(item, s) in &l.entries {
            best.entry(item)
                .and_modify(|b| {
                    if s > *b {
                        *b = s
                    }
                })
                .or_insert(s);
        }
    }
    let mut entries: Vec<(usize, f64)> = best.into_iter().collect();
    entries.sort_by(rank_order);
    entries.truncate(k);
    RankedList { entries }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times `queries` through one stream (unified) or two streams (dual,
/// merged by score). Every query decodes every stream in full.
pub fn bench_cost(
    streams: &[Stream<'_>],
    queries: &[Vec<usize>],
    beam_width: usize,
    k: usize,
) -> Result<CostReport> {
    let mode = match streams.len() {
        1 => "unified",
        2 => "dual",
        n => return Err(invalid!("bench_cost takes 1 or 2 streams, got {n}")),
    };
    if queries.is_empty() {
        return Err(invalid!("no benchmark queries"));
    }
    let mut times = Vec::with_capacity(queries.len());
    let mut forwards = 0;
    for q in queries {
        let start = Instant::now();
        let mut lists = Vec::with_capacity(streams.len());
        for s in streams {
            let (r, stats) = beam_decode(s.model, s.table, q, beam_width, k)?;
            forwards += stats.decoder_forwards;
            lists.push(r);
        }
        let merged = merge_ranked(&lists, k);
        std::hint::black_box(&merged);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(CostReport {
        mode: mode.to_string(),
        n_queries: queries.len(),
        beam_width,
        mean_ms,
        p50_ms: percentile(&sorted, 0.5),
        p95_ms: percentile(&sorted, 0.95),
        decoder_forwards: forwards,
        table_bytes: streams.iter().map(|s| s.table.storage_bytes()).sum(),
    })
}
