use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{invalid, Result};
use crate::numerics::{
    attention_mask, seeded_rng, FeedForward, KeyValue, LayerNorm, Linear, MultiHeadAttention,
    ParamId, ParamStore, Tape, Var,
};
use crate::quantizer::UnicodeTable;

const CHECKPOINT_KIND: &str = "generator";

/// Index of the special tokens in the specials table.
pub const BOS: usize = 0;
pub const PAD: usize = 1;
pub const C_DIS: usize = 2;

/// Stage II architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_history: usize,
    /// Weight of the distillation loss.
    pub beta: f64,
    /// Negatives per distillation example.
    pub n_neg: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            dim: 96,
            heads: 6,
            hidden: 256,
            encoder_layers: 1,
            decoder_layers: 4,
            max_history: crate::corpus::DEFAULT_HISTORY,
            beta: 1.0,
            n_neg: 128,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.max_history == 0 {
            return Err(invalid!(
                "generator dim, hidden and max_history must be >= 1"
            ));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(invalid!(
                "generator dim {} is not divisible by {} heads",
                self.dim,
                self.heads
            ));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(invalid!("need at least one encoder and one decoder layer"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(invalid!("beta must be >= 0, got {}", self.beta));
        }
        if self.n_neg == 0 {
            return Err(invalid!("n_neg must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: MultiHeadAttention,
    norm2: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm3: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Architecture {
    config: GenConfig,
    level_sizes: Vec<usize>,
    integrated_dim: usize,
    seed: u64,
}

/// Encoder output for a batch of histories.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[B, T, dim]`.
    pub h: Var,
    pub batch: usize,
    pub len: usize,
}

/// Per-query state reused across decoding steps: the cross-attention
/// keys/values of every decoder layer and the valid encoder positions.
#[derive(Clone, Debug)]
pub struct CrossMemory {
    pub kv: Vec<KeyValue>,
    pub valid: Vec<bool>,
}

/// Encoder-decoder over per-level code vocabularies.
#[derive(Clone, Debug)]
pub struct GenModel {
    pub config: GenConfig,
    pub store: ParamStore,
    pub level_sizes: Vec<usize>,
    pub integrated_dim: usize,
    pub seed: u64,
    /// Code embeddings of every level followed by the specials.
    vocab: ParamId,
    level_offsets: Vec<usize>,
    enc_positions: ParamId,
    dec_positions: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    heads: Vec<Linear>,
    pub distill: Linear,
}

impl GenModel {
    /// `level_sizes[l]` is the vocabulary of decoding level `l`;
    /// `integrated_dim` the width of the distillation targets.
    pub fn new(
        config: GenConfig,
        level_sizes: Vec<usize>,
        integrated_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if level_sizes.is_empty() || level_sizes.contains(&0) {
            return Err(invalid!(
                "every decoding level needs a non-empty vocabulary"
            ));
        }
        if integrated_dim == 0 {
            return Err(invalid!("integrated dimension must be >= 1"));
        }
        let d = config.dim;
        let levels = level_sizes.len();
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        let mut level_offsets = vec![0];
        for &v in &level_sizes {
            level_offsets.push(level_offsets.last().unwrap() + v);
        }
        let vocab = store.xavier("vocab", level_offsets[levels] + 3, d, &mut rng)?;
        let enc_positions =
            store.xavier("enc.positions", config.max_history * levels, d, &mut rng)?;
        let dec_positions = store.xavier("dec.positions", levels + 2, d, &mut rng)?;
        let mut encoder = Vec::new();
        for i in 0..config.encoder_layers {
            let n = format!("enc.{i}");
            encoder.push(EncoderLayer {
                norm1: LayerNorm::new(&mut store, &format!("{n}.norm1"), d)?,
                attn: MultiHeadAttention::new(
                    &mut store,
                    &format!("{n}.attn"),
                    d,
                    config.heads,
                    &mut rng,
                )?,
                norm2: LayerNorm::new(&mut store, &format!("{n}.norm2"), d)?,
                ffn: FeedForward::new(&mut store, &format!("{n}.ffn"), d, config.hidden, &mut rng)?,
            });
        }
        let enc_norm = LayerNorm::new(&mut store, "enc.norm", d)?;
        let mut decoder = Vec::new();
        for i in 0..config.decoder_layers {
            let n = format!("dec.{i}");
            decoder.push(DecoderLayer {
                norm1: LayerNorm::new(&mut store, &format!("{n}.norm1"), d)?,
                self_attn: MultiHeadAttention::new(
                    &mut store,
                    &format!("{n}.self"),
                    d,
                    config.heads,
                    &mut rng,
                )?,
                norm2: LayerNorm::new(&mut store, &format!("{n}.norm2"), d)?,
                cross_attn: MultiHeadAttention::new(
                    &mut store,
                    &format!("{n}.cross"),
                    d,
                    config.heads,
                    &mut rng,
                )?,
                norm3: LayerNorm::new(&mut store, &format!("{n}.norm3"), d)?,
                ffn: FeedForward::new(&mut store, &format!("{n}.ffn"), d, config.hidden, &mut rng)?,
            });
        }
        let dec_norm = LayerNorm::new(&mut store, "dec.norm", d)?;
        // output heads start at zero so an untrained model predicts uniformly
        let heads = level_sizes
            .iter()
            .enumerate()
            .map(|(l, &v)| {
                Ok(Linear {
                    weight: store.zeros(format!("head.{l}.weight"), &[d, v])?,
                    bias: Some(store.zeros(format!("head.{l}.bias"), &[v])?),
                    in_dim: d,
                    out_dim: v,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let distill = Linear::new(&mut store, "distill", d, integrated_dim, true, &mut rng)?;
        Ok(Self {
            config,
            store,
            level_sizes,
            integrated_dim,
            seed,
            vocab,
            level_offsets,
            enc_positions,
            dec_positions,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            heads,
            distill,
        })
    }

    /// Number of decoding levels (including a disambiguation level).
    pub fn levels(&self) -> usize {
        self.level_sizes.len()
    }

    /// Checks that `table` fits this model's vocabularies.
    pub fn check_table(&self, table: &UnicodeTable) -> Result<()> {
        if table.max_len() > self.levels() {
            return Err(invalid!(
                "table codes have up to {} levels, model decodes {}",
                table.max_len(),
                self.levels()
            ));
        }
        for (l, &v) in table.level_sizes().iter().enumerate() {
            if v > self.level_sizes[l] {
                return Err(invalid!(
                    "table uses code {} at level {l}, vocabulary is {}",
                    v - 1,
                    self.level_sizes[l]
                ));
            }
        }
        Ok(())
    }

    fn check_code(&self, code: &[u32]) -> Result<()> {
        if code.len() > self.levels() {
            return Err(invalid!(
                "code {code:?} is longer than {} levels",
                self.levels()
            ));
        }
        for (l, &c) in code.iter().enumerate() {
            if c as usize >= self.level_sizes[l] {
                return Err(invalid!(
                    "code {c} out of level {l} vocabulary of size {}",
                    self.level_sizes[l]
                ));
            }
        }
        Ok(())
    }

    /// Row of `tok` in the shared vocabulary table.
    fn vocab_row(&self, tok: Token) -> usize {
        match tok {
            Token::Code(l, c) => self.level_offsets[l] + c as usize,
            Token::Special(s) => self.level_offsets[self.levels()] + s,
        }
    }

    /// Embeds a `[B, T]` grid of tokens and adds the positional rows.
    fn embed(
        &self,
        tape: &mut Tape,
        tokens: &[Token],
        positions: &[usize],
        table: ParamId,
        t: usize,
    ) -> Result<Var> {
        let d = self.config.dim;
        let b = tokens.len() / t;
        let rows: Vec<usize> = tokens.iter().map(|&tok| self.vocab_row(tok)).collect();
        let vocab = tape.param(self.vocab)?;
        let x = tape.gather_rows(vocab, &rows)?;
        let ptab = tape.param(table)?;
        let p = tape.gather_rows(ptab, positions)?;
        let x = tape.add(x, p)?;
        tape.reshape(x, &[b, t, d])
    }

    /// Encodes a batch of histories given as per-item code sequences
    /// (oldest first). Histories longer than `max_history` items keep only
    /// their most recent items. Returns the encoder output and the number
    /// of valid (non-PAD) positions per history.
    pub fn encode(
        &self,
        tape: &mut Tape,
        histories: &[Vec<&[u32]>],
    ) -> Result<(Encoded, Vec<Vec<bool>>)> {
        let b = histories.len();
        if b == 0 {
            return Err(invalid!("empty history batch"));
        }
        let lmax = self.levels();
        let mut n_max = 0;
        for h in histories {
            if h.is_empty() {
                return Err(invalid!("cannot encode an empty (all-PAD) history"));
            }
            n_max = n_max.max(h.len().min(self.config.max_history));
        }
        let t = n_max * lmax;
        let mut tokens = Vec::with_capacity(b * t);
        let mut positions = Vec::with_capacity(b * t);
        let mut valid = Vec::with_capacity(b);
        for h in histories {
            let h = &h[h.len().saturating_sub(self.config.max_history)..];
            let mut v = Vec::with_capacity(t);
            for slot in 0..n_max {
                for l in 0..lmax {
                    match h.get(slot) {
                        Some(code) if l < code.len() => {
                            self.check_code(code)?;
                            tokens.push(Token::Code(l, code[l]));
                            // positions count back from the most recent item
                            positions.push((h.len() - 1 - slot) * lmax + l);
                            v.push(true);
                        }
                        _ => {
                            tokens.push(Token::Special(PAD));
                            positions.push(0);
                            v.push(false);
                        }
                    }
                }
            }
            valid.push(v);
        }
        let mut x = self.embed(tape, &tokens, &positions, self.enc_positions, t)?;
        let heads = self.config.heads;
        let mask = attention_mask(b, heads, t, t, |bi, _, j| valid[bi][j]);
        let mask = tape.constant(mask)?;
        for layer in &self.encoder {
            let y = layer.norm1.forward(tape, x)?;
            let y = layer.attn.forward(tape, y, y, Some(mask))?;
            x = tape.add(x, y)?;
            let y = layer.norm2.forward(tape, x)?;
            let y = layer.ffn.forward(tape, y)?;
            x = tape.add(x, y)?;
        }
        let h = self.enc_norm.forward(tape, x)?;
        Ok((
            Encoded {
                h,
                batch: b,
                len: t,
            },
            valid,
        ))
    }

    /// Runs the decoder over `[B, T]` decoder tokens. `lens[b]` is the
    /// number of non-PAD decoder positions of row `b`; `memory_valid[b]`
    /// flags the valid encoder positions. Returns `[B, T, dim]`.
    fn decode(
        &self,
        tape: &mut Tape,
        tokens: &[Token],
        t: usize,
        lens: &[usize],
        cross: &[KeyValue],
        memory_valid: &[Vec<bool>],
    ) -> Result<Var> {
        let b = lens.len();
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let mut x = self.embed(tape, tokens, &positions, self.dec_positions, t)?;
        let heads = self.config.heads;
        let self_mask = attention_mask(b, heads, t, t, |bi, i, j| j <= i && j < lens[bi]);
        let self_mask = tape.constant(self_mask)?;
        let tk = memory_valid[0].len();
        let cross_mask = attention_mask(b, heads, t, tk, |bi, _, j| memory_valid[bi][j]);
        let cross_mask = tape.constant(cross_mask)?;
        for (layer, kv) in self.decoder.iter().zip(cross) {
            let y = layer.norm1.forward(tape, x)?;
            let y = layer.self_attn.forward(tape, y, y, Some(self_mask))?;
            x = tape.add(x, y)?;
            let y = layer.norm2.forward(tape, x)?;
            let y = layer.cross_attn.attend(tape, y, kv, Some(cross_mask))?;
            x = tape.add(x, y)?;
            let y = layer.norm3.forward(tape, x)?;
            let y = layer.ffn.forward(tape, y)?;
            x = tape.add(x, y)?;
        }
        self.dec_norm.forward(tape, x)
    }

    fn cross_kv(&self, tape: &mut Tape, enc: &Encoded) -> Result<Vec<KeyValue>> {
        self.decoder
            .iter()
            .map(|l| l.cross_attn.key_value(tape, enc.h))
            .collect()
    }

    /// Teacher-forced decoder states for target codes: input rows are
    /// `[BOS, c_1 .. c_m, C_DIS, PAD ..]`.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape,
        histories: &[Vec<&[u32]>],
        targets: &[&[u32]],
    ) -> Result<Var> {
        if histories.len() != targets.len() {
            return Err(invalid!(
                "{} histories for {} targets",
                histories.len(),
                targets.len()
            ));
        }
        let (enc, valid) = self.encode(tape, histories)?;
        let cross = self.cross_kv(tape, &enc)?;
        let t = self.levels() + 2;
        let mut tokens = Vec::with_capacity(targets.len() * t);
        let mut lens = Vec::with_capacity(targets.len());
        for code in targets {
            self.check_code(code)?;
            if code.is_empty() {
                return Err(invalid!("empty target code"));
            }
            tokens.push(Token::Special(BOS));
            tokens.extend(code.iter().enumerate().map(|(l, &c)| Token::Code(l, c)));
            tokens.push(Token::Special(C_DIS));
            tokens.extend(std::iter::repeat_n(Token::Special(PAD), t - code.len() - 2));
            lens.push(code.len() + 2);
        }
        self.decode(tape, &tokens, t, &lens, &cross, &valid)
    }

    /// Mean next-code cross-entropy over every target code position.
    pub fn gen_loss(&self, tape: &mut Tape, states: Var, targets: &[&[u32]]) -> Result<Var> {
        let (b, t, d) = dims3(tape, states)?;
        if b != targets.len() {
            return Err(invalid!("{b} decoder rows for {} targets", targets.len()));
        }
        let flat = tape.reshape(states, &[b * t, d])?;
        let total: usize = targets.iter().map(|c| c.len()).sum();
        let mut loss: Option<Var> = None;
        for l in 0..self.levels() {
            let rows: Vec<usize> = (0..b).filter(|&i| targets[i].len() > l).collect();
            if rows.is_empty() {
                continue;
            }
            let idx: Vec<usize> = rows.iter().map(|&i| i * t + l).collect();
            let classes: Vec<usize> = rows.iter().map(|&i| targets[i][l] as usize).collect();
            let h = tape.gather_rows(flat, &idx)?;
            let logits = self.heads[l].forward(tape, h)?;
            let ce = tape.cross_entropy(logits, &classes)?;
            let ce = tape.scale(ce, (rows.len() as f64 / total as f64) as f32)?;
            loss = Some(match loss {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
        }
        loss.ok_or_else(|| invalid!("no target codes"))
    }

    /// Projected distillation-token outputs `[B, integrated_dim]`.
    pub fn distill_outputs(&self, tape: &mut Tape, states: Var, targets: &[&[u32]]) -> Result<Var> {
        let (b, t, d) = dims3(tape, states)?;
        let flat = tape.reshape(states, &[b * t, d])?;
        let idx: Vec<usize> = targets
            .iter()
            .enumerate()
            .map(|(i, c)| i * t + c.len() + 1)
            .collect();
        let h = tape.gather_rows(flat, &idx)?;
        self.distill.forward(tape, h)
    }

    /// Level-`l` logits at every position of a teacher-forced batch.
    pub fn level_logits(&self, tape: &mut Tape, states: Var, level: usize) -> Result<Var> {
        let (b, t, d) = dims3(tape, states)?;
        let flat = tape.reshape(states, &[b * t, d])?;
        let idx: Vec<usize> = (0..b).map(|i| i * t + level).collect();
        let h = tape.gather_rows(flat, &idx)?;
        self.heads[level].forward(tape, h)
    }

    /// Encodes one history and precomputes cross-attention keys/values.
    pub fn prepare(&self, tape: &mut Tape, history: &[&[u32]]) -> Result<CrossMemory> {
        let (enc, valid) = self.encode(tape, &[history.to_vec()])?;
        let kv = self.cross_kv(tape, &enc)?;
        let valid = valid.into_iter().next().expect("one history");
        Ok(CrossMemory { kv, valid })
    }

    /// Log-probabilities `[n, V_l]` of the next code for `n` prefixes of
    /// equal length `l` decoded against one prepared history.
    pub fn next_code_log_probs(
        &self,
        tape: &mut Tape,
        memory: &CrossMemory,
        prefixes: &[&[u32]],
    ) -> Result<Var> {
        let n = prefixes.len();
        if n == 0 {
            return Err(invalid!("no prefixes to extend"));
        }
        let l = prefixes[0].len();
        if prefixes.iter().any(|p| p.len() != l) || l >= self.levels() {
            return Err(invalid!(
                "prefixes must share a length below {}",
                self.levels()
            ));
        }
        let t = l + 1;
        let mut tokens = Vec::with_capacity(n * t);
        for p in prefixes {
            tokens.push(Token::Special(BOS));
            tokens.extend(p.iter().enumerate().map(|(k, &c)| Token::Code(k, c)));
        }
        let kv: Vec<KeyValue> = memory
            .kv
            .iter()
            .map(|kv| {
                Ok(KeyValue {
                    keys: tape.tile0(kv.keys, n)?,
                    values: tape.tile0(kv.values, n)?,
                    batch: n,
                    len: kv.len,
                })
            })
            .collect::<Result<_>>()?;
        let valid = vec![memory.valid.clone(); n];
        let lens = vec![t; n];
        let states = self.decode(tape, &tokens, t, &lens, &kv, &valid)?;
        let (_, _, d) = dims3(tape, states)?;
        let flat = tape.reshape(states, &[n * t, d])?;
        let idx: Vec<usize> = (0..n).map(|i| i * t + l).collect();
        let h = tape.gather_rows(flat, &idx)?;
        let logits = self.heads[l].forward(tape, h)?;
        tape.log_softmax(logits)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let arch = Architecture {
            config: self.config.clone(),
            level_sizes: self.level_sizes.clone(),
            integrated_dim: self.integrated_dim,
            seed: self.seed,
        };
        checkpoint::save(dir, CHECKPOINT_KIND, &arch, &self.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let arch: Architecture = checkpoint::load_architecture(dir, CHECKPOINT_KIND)?;
        let mut model = Self::new(
            arch.config,
            arch.level_sizes,
            arch.integrated_dim,
            arch.seed,
        )?;
        checkpoint::load_into(dir, CHECKPOINT_KIND, &mut model.store)?;
        Ok(model)
    }
}

#[derive(Clone, Copy, Debug)]
enum Token {
    Code(usize, u32),
    Special(usize),
}

fn dims3(tape: &Tape, v: Var) -> Result<(usize, usize, usize)> {
    match *tape.shape(v) {
        [b, t, d] => Ok((b, t, d)),
        ref s => Err(invalid!("expected a [B, T, d] tensor, got {s:?}")),
    }
}

/// Samples `n` distinct items from `0..n_items` excluding `target`.
pub fn sample_negatives(rng: &mut impl Rng, n_items: usize, target: usize, n: usize) -> Vec<usize> {
    let pool = n_items.saturating_sub(1);
    let n = n.min(pool);
    rand::seq::index::sample(rng, pool, n)
        .into_iter()
        .map(|i| if i >= target { i + 1 } else { i })
        .collect()
}
