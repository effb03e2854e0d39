//! Interaction logs, leave-one-out splits, item embedding files and the
//! synthetic corpus generator.

mod embeddings;
mod synthetic;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use embeddings::{load_tokens, save_tokens, tokens_path, EmbeddingMatrix};
pub use synthetic::{generate_synthetic, SyntheticCorpus, SyntheticSpec};

/// Default number of most recent items fed to the models.
pub const DEFAULT_HISTORY: usize = 20;

/// Which held-out item a prediction targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSelector {
    Valid,
    Test,
}

/// Leave-one-out view of one user's sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Split<'a> {
    pub train: &'a [usize],
    pub valid: usize,
    pub test: usize,
}

/// Per-user chronologically ordered item sequences over a dense item index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionCorpus {
    item_tokens: Vec<String>,
    user_tokens: Vec<String>,
    sequences: Vec<Vec<usize>>,
}

/// Counts reported by [`load_interactions`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LoadStats {
    pub lines: usize,
    pub kept_interactions: usize,
    pub dropped_short_users: usize,
    pub core_rounds: usize,
}

impl InteractionCorpus {
    /// Every sequence needs at least 3 items (train prefix, valid, test).
    pub fn new(
        item_tokens: Vec<String>,
        user_tokens: Vec<String>,
        sequences: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if user_tokens.len() != sequences.len() {
            return Err(invalid!(
                "{} user tokens for {} sequences",
                user_tokens.len(),
                sequences.len()
            ));
        }
        for (u, s) in sequences.iter().enumerate() {
            if s.len() < 3 {
                return Err(invalid!(
                    "user {} has {} interactions (< 3)",
                    user_tokens[u],
                    s.len()
                ));
            }
            if let Some(&bad) = s.iter().find(|&&i| i >= item_tokens.len()) {
                return Err(invalid!(
                    "user {} references unknown item index {bad}",
                    user_tokens[u]
                ));
            }
        }
        Ok(Self {
            item_tokens,
            user_tokens,
            sequences,
        })
    }

    pub fn n_items(&self) -> usize {
        self.item_tokens.len()
    }

    pub fn n_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn item_tokens(&self) -> &[String] {
        &self.item_tokens
    }

    pub fn user_tokens(&self) -> &[String] {
        &self.user_tokens
    }

    pub fn sequence(&self, user: usize) -> &[usize] {
        &self.sequences[user]
    }

    pub fn item_index(&self) -> HashMap<&str, usize> {
        self.item_tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect()
    }

    pub fn split(&self, user: usize) -> Split<'_> {
        let s = &self.sequences[user];
        let n = s.len();
        Split {
            train: &s[..n - 2],
            valid: s[n - 2],
            test: s[n - 1],
        }
    }

    /// Last `max_len` training items of `user`, oldest first.
    pub fn history_window(&self, user: usize, max_len: usize) -> &[usize] {
        let train = self.split(user).train;
        &train[train.len().saturating_sub(max_len)..]
    }

    /// Input history for predicting the held-out item of `selector`: the
    /// training prefix for validation, the prefix plus the validation item
    /// for test, truncated to the last `max_len` items.
    pub fn history_for(&self, user: usize, selector: SplitSelector, max_len: usize) -> &[usize] {
        let s = &self.sequences[user];
        let end = match selector {
            SplitSelector::Valid => s.len() - 2,
            SplitSelector::Test => s.len() - 1,
        };
        &s[end.saturating_sub(max_len)..end]
    }

    pub fn target_for(&self, user: usize, selector: SplitSelector) -> usize {
        let sp = self.split(user);
        match selector {
            SplitSelector::Valid => sp.valid,
            SplitSelector::Test => sp.test,
        }
    }

    /// `(user, position)` for every next-item training example: the target is
    /// `train[position]` and the history the up to `max_len` items before it.
    pub fn training_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for u in 0..self.n_users() {
            for t in 1..self.split(u).train.len() {
                pairs.push((u, t));
            }
        }
        pairs
    }

    /// History and target of a training pair.
    pub fn training_example(
        &self,
        user: usize,
        position: usize,
        max_len: usize,
    ) -> (&[usize], usize) {
        let train = self.split(user).train;
        (
            &train[position.saturating_sub(max_len)..position],
            train[position],
        )
    }

    /// Interaction counts per item over the training prefixes.
    pub fn train_item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_items()];
        for u in 0..self.n_users() {
            for &i in self.split(u).train {
                counts[i] += 1;
            }
        }
        counts
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: InteractionCorpus = serde_json::from_str(&text)?;
        Self::new(raw.item_tokens, raw.user_tokens, raw.sequences)
    }
}

struct RawInteraction {
    user: usize,
    item: usize,
    timestamp: i64,
}

/// Reads `user <TAB> item <TAB> timestamp` lines, applies iterated k-core
/// filtering at `min_core` (disabled when `min_core <= 1`), sorts each user
/// by timestamp (ties keep file order) and drops users left with fewer
/// than 3 interactions.
pub fn load_interactions(path: &Path, min_core: usize) -> Result<(InteractionCorpus, LoadStats)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut user_ids: HashMap<String, usize> = HashMap::new();
    let mut item_ids: HashMap<String, usize> = HashMap::new();
    let mut user_names = Vec::new();
    let mut item_names = Vec::new();
    let mut rows = Vec::new();
    let mut stats = LoadStats::default();
    for (lineno, line) in text.lines().enumerate() {
        stats.lines += 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        if fields.len() != 3 {
            return Err(parse_err(format!(
                "expected 3 tab-separated fields, found {}",
                fields.len()
            )));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_err("empty user or item token".into()));
        }
        let timestamp: i64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad timestamp {:?}", fields[2])))?;
        let user = *user_ids.entry(fields[0].to_string()).or_insert_with(|| {
            user_names.push(fields[0].to_string());
            user_names.len() - 1
        });
        let item = *item_ids.entry(fields[1].to_string()).or_insert_with(|| {
            item_names.push(fields[1].to_string());
            item_names.len() - 1
        });
        rows.push(RawInteraction {
            user,
            item,
            timestamp,
        });
    }

    if min_core > 1 {
        loop {
            stats.core_rounds += 1;
            let mut uc = vec![0usize; user_names.len()];
            let mut ic = vec![0usize; item_names.len()];
            for r in &rows {
                uc[r.user] += 1;
                ic[r.item] += 1;
            }
            let before = rows.len();
            rows.retain(|r| uc[r.user] >= min_core && ic[r.item] >= min_core);
            if rows.len() == before {
                break;
            }
        }
    }

    let mut per_user: Vec<Vec<(i64, usize)>> = vec![Vec::new(); user_names.len()];
    for r in &rows {
        per_user[r.user].push((r.timestamp, r.item));
    }
    let mut kept_users = Vec::new();
    for (u, seq) in per_user.iter_mut().enumerate() {
        if seq.is_empty() {
            continue;
        }
        if seq.len() < 3 {
            stats.dropped_short_users += 1;
            continue;
        }
        seq.sort_by_key(|&(ts, _)| ts);
        kept_users.push(u);
    }
    if stats.dropped_short_users > 0 {
        log::warn!(
            "dropped {} users with fewer than 3 interactions",
            stats.dropped_short_users
        );
    }

    // dense item ids in order of first appearance among the kept interactions
    let mut remap: Vec<Option<usize>> = vec![None; item_names.len()];
    let mut item_tokens = Vec::new();
    let kept: std::collections::HashSet<usize> = kept_users.iter().copied().collect();
    for r in &rows {
        if kept.contains(&r.user) && remap[r.item].is_none() {
            remap[r.item] = Some(item_tokens.len());
            item_tokens.push(item_names[r.item].clone());
        }
    }
    let mut user_tokens = Vec::with_capacity(kept_users.len());
    let mut sequences = Vec::with_capacity(kept_users.len());
    for &u in &kept_users {
        user_tokens.push(user_names[u].clone());
        sequences.push(
            per_user[u]
                .iter()
                .map(|&(_, i)| remap[i].expect("kept item is remapped"))
                .collect(),
        );
    }
    let corpus = InteractionCorpus::new(item_tokens, user_tokens, sequences)?;
    stats.kept_interactions = corpus.n_interactions();
    Ok((corpus, stats))
}

/// Writes the corpus back as interaction TSV (timestamps are positions).
pub fn save_interactions(corpus: &InteractionCorpus, path: &Path) -> Result<()> {
    let mut out = String::new();
    for u in 0..corpus.n_users() {
        for (t, &i) in corpus.sequence(u).iter().enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                corpus.user_tokens[u], corpus.item_tokens[i], t
            ));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
