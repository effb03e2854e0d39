use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

fn hit_rank(ranking: Option<&[usize]>, truth: usize) -> Option<usize> {
    ranking.and_then(|r| r.iter().position(|&i| i == truth))
}

fn check(rankings: &[Option<Vec<usize>>], truth: &[usize], k: usize) -> Result<()> {
    if k == 0 {
        return Err(invalid!("K must be >= 1"));
    }
    if rankings.len() != truth.len() {
        return Err(invalid!(
            "{} rankings for {} users",
            rankings.len(),
            truth.len()
        ));
    }
    if truth.is_empty() {
        return Err(invalid!("no users to evaluate"));
    }
    let missing = rankings.iter().filter(|r| r.is_none()).count();
    if missing > 0 {
        log::warn!("{missing} users have no ranked list; counted as misses");
    }
    Ok(())
}

/// Fraction of users whose held-out item has 0-based rank `< k`.
pub fn recall_at_k(rankings: &[Option<Vec<usize>>], truth: &[usize], k: usize) -> Result<f64> {
    check(rankings, truth, k)?;
    let hits = rankings
        .iter()
        .zip(truth)
        .filter(|(r, &t)| hit_rank(r.as_deref(), t).is_some_and(|p| p < k))
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Mean `1 / log2(j + 1)` at the 1-based hit position `j <= k` (0 on a
/// miss); the ideal DCG of a single relevant item is 1.
pub fn ndcg_at_k(rankings: &[Option<Vec<usize>>], truth: &[usize], k: usize) -> Result<f64> {
    check(rankings, truth, k)?;
    let total: f64 = rankings
        .iter()
        .zip(truth)
        .map(|(r, &t)| match hit_rank(r.as_deref(), t) {
            Some(p) if p < k => 1.0 / ((p + 2) as f64).log2(),
            _ => 0.0,
        })
        .sum();
    Ok(total / truth.len() as f64)
}

/// Recall and NDCG at several cutoffs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_users: usize,
    pub recall_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
}

impl MetricReport {
    pub fn compute(rankings: &[Option<Vec<usize>>], truth: &[usize], ks: &[usize]) -> Result<Self> {
        let mut recall_at = BTreeMap::new();
        let mut ndcg_at = BTreeMap::new();
        for &k in ks {
            recall_at.insert(k, recall_at_k(rankings, truth, k)?);
            ndcg_at.insert(k, ndcg_at_k(rankings, truth, k)?);
        }
        Ok(Self {
            n_users: truth.len(),
            recall_at,
            ndcg_at,
        })
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.ndcg_at.get(&k).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table, one row per metric.
    pub fn to_text(&self) -> String {
        let mut rows = vec![("metric".to_string(), "value".to_string())];
        for (k, v) in &self.recall_at {
            rows.push((format!("Recall@{k}"), format!("{v:.4}")));
        }
        for (k, v) in &self.ndcg_at {
            rows.push((format!("NDCG@{k}"), format!("{v:.4}")));
        }
        rows.push(("users".to_string(), self.n_users.to_string()));
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(a, b)| format!("{a:<w$}  {b:>8}\n"))
            .collect()
    }
}

/// Items ordered by training-prefix interaction count (ties by index).
pub fn popularity_ranking(counts: &[usize], k: usize) -> Vec<usize> {
    let mut items: Vec<usize> = (0..counts.len()).collect();
    items.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    items.truncate(k);
    items
}
