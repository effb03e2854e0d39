use serde::{Deserialize, Serialize};

use super::model::FusionModel;
use crate::corpus::{EmbeddingMatrix, InteractionCorpus};
use crate::error::{invalid, Result};
use crate::numerics::{Adam, BatchSampler, Tape, TrainOptions};

/// Which tensor is exported as the integrated item embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegratedVariant {
    /// The trained collaborative item table.
    #[default]
    Table,
    /// Average of the item table and the adapted semantic embeddings.
    Mean,
}

/// Per-step losses of a Stage I run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Log {
    pub seq_loss: Vec<f32>,
    /// Alignment loss per step (`None` when the term was not computed).
    pub align_loss: Vec<Option<f32>>,
    pub total_loss: Vec<f32>,
}

impl Stage1Log {
    pub fn final_seq_loss(&self, window: usize) -> Option<f32> {
        tail_mean(&self.seq_loss, window)
    }
}

pub(crate) fn tail_mean(xs: &[f32], window: usize) -> Option<f32> {
    if xs.is_empty() {
        return None;
    }
    let tail = &xs[xs.len().saturating_sub(window.max(1))..];
    Some((tail.iter().map(|&x| x as f64).sum::<f64>() / tail.len() as f64) as f32)
}

/// Minimises `L_seq + alpha * L_align` with Adam.
///
/// Each step draws `batch_size` (history, next item) pairs from the
/// training prefixes. The alignment batch is the set of distinct target
/// items of that step, so no item appears as its own negative.
pub fn train_stage1(
    model: &mut FusionModel,
    corpus: &InteractionCorpus,
    semantic: Option<&EmbeddingMatrix>,
    opts: &TrainOptions,
) -> Result<Stage1Log> {
    opts.validate()?;
    if corpus.n_items() != model.n_items {
        return Err(invalid!(
            "model has {} items, corpus has {}",
            model.n_items,
            corpus.n_items()
        ));
    }
    let alpha = model.config.alpha;
    let aligned = alpha > 0.0;
    let semantic = if aligned {
        let s = semantic.ok_or_else(|| invalid!("alpha > 0 needs semantic embeddings"))?;
        if s.n_items() != corpus.n_items() {
            return Err(invalid!(
                "semantic matrix has {} rows for {} items",
                s.n_items(),
                corpus.n_items()
            ));
        }
        if model.semantic_dim() != Some(s.dim()) {
            return Err(invalid!(
                "semantic width {} does not match the adaptation layer ({:?})",
                s.dim(),
                model.semantic_dim()
            ));
        }
        Some(s)
    } else {
        None
    };
    let pairs = corpus.training_pairs();
    if pairs.is_empty() {
        return Err(invalid!(
            "corpus has no training pairs (train prefixes of length 1)"
        ));
    }
    let mut sampler = BatchSampler::new(pairs.len(), opts.seed)?;
    let mut adam = Adam::new(opts.adam.clone(), &model.store);
    let mut log = Stage1Log::default();
    let max_len = model.config.max_history;
    for step in 0..opts.steps {
        let batch = sampler.next_batch(opts.batch_size);
        let mut histories = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for &k in &batch {
            let (u, t) = pairs[k];
            let (h, y) = corpus.training_example(u, t, max_len);
            histories.push(h);
            targets.push(y);
        }
        let mut tape = Tape::new(&model.store);
        let seq = model.next_item_loss(&mut tape, &histories, &targets)?;
        let seq_value = tape.value(seq).item()?;
        let mut align_value = None;
        let mut loss = seq;
        if let Some(sem) = semantic {
            let mut items = Vec::new();
            for &y in &targets {
                if !items.contains(&y) {
                    items.push(y);
                }
            }
            if items.len() >= 2 {
                let a = model.alignment_loss(&mut tape, &items, sem)?;
                align_value = Some(tape.value(a).item()?);
                let a = tape.scale(a, alpha as f32)?;
                loss = tape.add(loss, a)?;
            }
        }
        let total = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        drop(tape);
        model.store.accumulate(&grads)?;
        adam.step(&mut model.store)?;
        log.seq_loss.push(seq_value);
        log.align_loss.push(align_value);
        log.total_loss.push(total);
        if opts.log_every > 0 && (step + 1) % opts.log_every == 0 {
            log::info!(
                "stage1 step {}/{}: seq {:.4} align {} total {:.4}",
                step + 1,
                opts.steps,
                tail_mean(&log.seq_loss, opts.log_every as usize).unwrap_or(0.0),
                align_value.map_or("-".to_string(), |v| format!("{v:.4}")),
                total
            );
        }
    }
    Ok(log)
}

/// Integrated item embeddings of a trained model.
pub fn export_integrated(
    model: &FusionModel,
    variant: IntegratedVariant,
    semantic: Option<&EmbeddingMatrix>,
) -> Result<EmbeddingMatrix> {
    let table = model.item_embeddings();
    match variant {
        IntegratedVariant::Table => Ok(table),
        IntegratedVariant::Mean => {
            let s =
                semantic.ok_or_else(|| invalid!("the mean variant needs semantic embeddings"))?;
            let t = model.adapt_all(s)?;
            let data = table
                .data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| 0.5 * (a + b))
                .collect();
            EmbeddingMatrix::new(table.n_items(), table.dim(), data)
        }
    }
}
