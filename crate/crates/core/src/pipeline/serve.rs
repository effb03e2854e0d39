use std::collections::HashMap;
use std::path::Path;

use super::files;
use crate::corpus::{InteractionCorpus, SplitSelector};
use crate::error::{invalid, Result};
use crate::generator::GenModel;
use crate::inference::beam_decode;
use crate::quantizer::UnicodeTable;

/// A trained run loaded for serving: corpus vocabulary, code table and
/// generator.
#[derive(Debug)]
pub struct Recommender {
    corpus: InteractionCorpus,
    table: UnicodeTable,
    model: GenModel,
    items: HashMap<String, usize>,
    users: HashMap<String, usize>,
}

impl Recommender {
    /// Loads `corpus.json`, `codes.tsv` and the Stage II checkpoint of a run
    /// directory.
    pub fn open(run: &Path) -> Result<Self> {
        let corpus = InteractionCorpus::load_json(&run.join(files::CORPUS))?;
        let table = UnicodeTable::load_for(&run.join(files::CODES), corpus.item_tokens())?;
        let model = GenModel::load(&run.join(files::STAGE2))?;
        model.check_table(&table)?;
        let index = |t: &[String]| t.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Ok(Self {
            items: index(corpus.item_tokens()),
            users: index(corpus.user_tokens()),
            corpus,
            table,
            model,
        })
    }

    pub fn n_items(&self) -> usize {
        self.corpus.n_items()
    }

    pub fn n_users(&self) -> usize {
        self.corpus.n_users()
    }

    /// Top-`k` items after a history of item tokens, oldest first. Only the
    /// most recent `max_history` items are used.
    pub fn recommend(&self, history: &[&str], beam: usize, k: usize) -> Result<Vec<(String, f64)>> {
        let ids = history
            .iter()
            .map(|t| {
                self.items
                    .get(*t)
                    .copied()
                    .ok_or_else(|| invalid!("unknown item {t:?}"))
            })
            .collect::<Result<Vec<_>>>()?;
        let start = ids.len().saturating_sub(self.model.config.max_history);
        self.decode(&ids[start..], beam, k)
    }

    /// Top-`k` items for a known user at the given split.
    pub fn recommend_user(
        &self,
        user: &str,
        split: SplitSelector,
        beam: usize,
        k: usize,
    ) -> Result<Vec<(String, f64)>> {
        let u = *self
            .users
            .get(user)
            .ok_or_else(|| invalid!("unknown user {user:?}"))?;
        let h = self
            .corpus
            .history_for(u, split, self.model.config.max_history);
        self.decode(h, beam, k)
    }

    fn decode(&self, history: &[usize], beam: usize, k: usize) -> Result<Vec<(String, f64)>> {
        let (list, _) = beam_decode(&self.model, &self.table, history, beam, k)?;
        Ok(list
            .entries
            .iter()
            .map(|&(i, s)| (self.corpus.item_tokens()[i].clone(), s))
            .collect())
    }
}
