use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};

/// One trie node; children are kept sorted by code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrieNode {
    pub children: Vec<(u32, usize)>,
    pub item: Option<usize>,
}

/// Prefix tree over the code sequences of a [`UnicodeTable`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trie {
    nodes: Vec<TrieNode>,
}

impl Trie {
    pub const ROOT: usize = 0;

    pub fn node(&self, id: usize) -> &TrieNode {
        &self.nodes[id]
    }

    pub fn child(&self, id: usize, code: u32) -> Option<usize> {
        let ch = &self.nodes[id].children;
        ch.binary_search_by_key(&code, |&(c, _)| c)
            .ok()
            .map(|k| ch[k].1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes[Self::ROOT].children.is_empty()
    }

    /// Items whose codes start with the path to `id`, in ascending order.
    pub fn items_under(&self, id: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            if let Some(i) = self.nodes[n].item {
                out.push(i);
            }
            stack.extend(self.nodes[n].children.iter().map(|&(_, c)| c));
        }
        out.sort_unstable();
        out
    }
}

/// Item to code-sequence mapping plus its prefix trie.
///
/// Every item has the same number of base levels; items whose base codes
/// collide carry one extra disambiguation code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnicodeTable {
    codes: Vec<Vec<u32>>,
    base_levels: usize,
    trie: Trie,
}

impl UnicodeTable {
    /// Validates uniqueness and prefix-freeness and builds the trie.
    pub fn from_codes(codes: Vec<Vec<u32>>) -> Result<Self> {
        if codes.is_empty() {
            return Err(invalid!("code table has no items"));
        }
        let base_levels = codes.iter().map(Vec::len).min().unwrap_or(0);
        if base_levels == 0 {
            return Err(invalid!("every item needs at least one code"));
        }
        if let Some((i, c)) = codes
            .iter()
            .enumerate()
            .find(|(_, c)| c.len() > base_levels + 1)
        {
            return Err(invalid!(
                "item {i} has {} codes; at most one disambiguation level is allowed",
                c.len()
            ));
        }
        let mut nodes = vec![TrieNode {
            children: Vec::new(),
            item: None,
        }];
        for (item, code) in codes.iter().enumerate() {
            let mut cur = Trie::ROOT;
            for &c in code {
                if let Some(owner) = nodes[cur].item {
                    return Err(invalid!(
                        "code of item {owner} is a prefix of item {item}'s code"
                    ));
                }
                cur = match nodes[cur].children.binary_search_by_key(&c, |&(k, _)| k) {
                    Ok(k) => nodes[cur].children[k].1,
                    Err(pos) => {
                        nodes.push(TrieNode {
                            children: Vec::new(),
                            item: None,
                        });
                        let id = nodes.len() - 1;
                        nodes[cur].children.insert(pos, (c, id));
                        id
                    }
                };
            }
            if let Some(other) = nodes[cur].item {
                return Err(invalid!("items {other} and {item} share the code {code:?}"));
            }
            if !nodes[cur].children.is_empty() {
                return Err(invalid!(
                    "code of item {item} is a prefix of another item's code"
                ));
            }
            nodes[cur].item = Some(item);
        }
        Ok(Self {
            codes,
            base_levels,
            trie: Trie { nodes },
        })
    }

    /// Appends a disambiguation code to every group of items sharing a code
    /// sequence, numbering group members in ascending item order.
    pub fn disambiguate(mut codes: Vec<Vec<u32>>) -> Result<Self> {
        let mut groups: HashMap<Vec<u32>, Vec<usize>> = HashMap::new();
        for (i, c) in codes.iter().enumerate() {
            groups.entry(c.clone()).or_default().push(i);
        }
        for members in groups.values() {
            if members.len() > 1 {
                for (k, &i) in members.iter().enumerate() {
                    codes[i].push(k as u32);
                }
            }
        }
        Self::from_codes(codes)
    }

    pub fn n_items(&self) -> usize {
        self.codes.len()
    }

    pub fn code(&self, item: usize) -> &[u32] {
        &self.codes[item]
    }

    pub fn codes(&self) -> &[Vec<u32>] {
        &self.codes
    }

    pub fn base_levels(&self) -> usize {
        self.base_levels
    }

    /// Longest code length (base levels plus any disambiguation level).
    pub fn max_len(&self) -> usize {
        self.codes.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn has_disambiguation(&self) -> bool {
        self.max_len() > self.base_levels
    }

    pub fn n_disambiguated(&self) -> usize {
        self.codes
            .iter()
            .filter(|c| c.len() > self.base_levels)
            .count()
    }

    /// Vocabulary size of every level: one more than the largest code used.
    pub fn level_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.max_len()];
        for c in &self.codes {
            for (l, &v) in c.iter().enumerate() {
                sizes[l] = sizes[l].max(v as usize + 1);
            }
        }
        sizes
    }

    pub fn trie(&self) -> &Trie {
        &self.trie
    }

    pub fn lookup(&self, code: &[u32]) -> Option<usize> {
        let mut cur = Trie::ROOT;
        for &c in code {
            cur = self.trie.child(cur, c)?;
        }
        self.trie.node(cur).item
    }

    /// Bytes needed to store every code as a 32-bit integer.
    pub fn storage_bytes(&self) -> usize {
        self.codes.iter().map(|c| 4 * c.len()).sum()
    }

    /// Writes `token <TAB> c1 c2 ...` lines in item order.
    pub fn save(&self, path: &Path, tokens: &[String]) -> Result<()> {
        if tokens.len() != self.n_items() {
            return Err(invalid!(
                "{} tokens for {} items",
                tokens.len(),
                self.n_items()
            ));
        }
        let mut out = String::new();
        for (tok, code) in tokens.iter().zip(&self.codes) {
            if tok.contains('\t') || tok.contains('\n') {
                return Err(invalid!("item token {tok:?} contains a tab or newline"));
            }
            out.push_str(tok);
            out.push('\t');
            let parts: Vec<String> = code.iter().map(u32::to_string).collect();
            out.push_str(&parts.join(" "));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a table file; items are numbered in file order.
    pub fn load(path: &Path) -> Result<(Vec<String>, Self)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        let mut codes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg,
            };
            let (tok, rest) = line
                .split_once('\t')
                .ok_or_else(|| err("expected `token<TAB>codes`".into()))?;
            let code = rest
                .split_whitespace()
                .map(|c| c.parse::<u32>().map_err(|_| err(format!("bad code {c:?}"))))
                .collect::<Result<Vec<u32>>>()?;
            if code.is_empty() {
                return Err(err("empty code sequence".into()));
            }
            tokens.push(tok.to_string());
            codes.push(code);
        }
        let table = Self::from_codes(codes).map_err(|e| Error::format(path, e.to_string()))?;
        Ok((tokens, table))
    }

    /// Loads a table and reorders it to follow `item_tokens`.
    pub fn load_for(path: &Path, item_tokens: &[String]) -> Result<Self> {
        let (tokens, table) = Self::load(path)?;
        let index: HashMap<&str, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        if index.len() != tokens.len() {
            return Err(Error::format(path, "duplicate item token"));
        }
        let mut codes = Vec::with_capacity(item_tokens.len());
        for t in item_tokens {
            let &i = index
                .get(t.as_str())
                .ok_or_else(|| Error::format(path, format!("no code for item {t}")))?;
            codes.push(table.codes[i].clone());
        }
        if codes.len() != tokens.len() {
            return Err(Error::format(
                path,
                format!(
                    "table has {} items, corpus has {}",
                    tokens.len(),
                    codes.len()
                ),
            ));
        }
        Self::from_codes(codes)
    }
}
