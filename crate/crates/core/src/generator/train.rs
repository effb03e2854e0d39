use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{sample_negatives, GenModel};
use crate::corpus::{EmbeddingMatrix, InteractionCorpus};
use crate::error::{invalid, Result};
use crate::fusion::tail_mean;
use crate::numerics::{Adam, BatchSampler, Tape, Tensor, TrainOptions, Var};
use crate::quantizer::UnicodeTable;

/// Contrastive loss of projected distillation outputs `[B, d]` against
/// candidate rows `[B, 1 + n, d]` whose first row is the positive:
/// `-log(exp(c . e_pos) / sum_j exp(c . e_j))`, averaged over the batch.
pub fn distillation_loss(tape: &mut Tape, outputs: Var, candidates: Var) -> Result<Var> {
    let (so, sc) = (
        tape.shape(outputs).to_vec(),
        tape.shape(candidates).to_vec(),
    );
    if so.len() != 2 || sc.len() != 3 || sc[0] != so[0] || sc[2] != so[1] {
        return Err(crate::Error::Shape {
            op: "distillation_loss",
            lhs: so,
            rhs: sc,
        });
    }
    let (b, n) = (sc[0], sc[1]);
    let q = tape.reshape(outputs, &[b, 1, so[1]])?;
    let scores = tape.bmm(q, candidates, true)?;
    let scores = tape.reshape(scores, &[b, n])?;
    tape.cross_entropy(scores, &vec![0; b])
}

/// Candidate rows `[B, 1 + n, d]`: each target item followed by `n_neg`
/// distinct uniformly sampled other items (fewer when the corpus is small).
pub fn distillation_candidates(
    integrated: &EmbeddingMatrix,
    targets: &[usize],
    n_neg: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let d = integrated.dim();
    let n = n_neg.min(integrated.n_items().saturating_sub(1));
    let mut data = Vec::with_capacity(targets.len() * (n + 1) * d);
    for &t in targets {
        if t >= integrated.n_items() {
            return Err(invalid!("target item {t} has no integrated embedding"));
        }
        data.extend_from_slice(integrated.row(t));
        for j in sample_negatives(rng, integrated.n_items(), t, n) {
            data.extend_from_slice(integrated.row(j));
        }
    }
    Tensor::new(&[targets.len(), n + 1, d], data)
}

/// Per-step losses of a Stage II run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Log {
    pub gen_loss: Vec<f32>,
    pub distill_loss: Vec<Option<f32>>,
    pub total_loss: Vec<f32>,
}

impl Stage2Log {
    pub fn final_gen_loss(&self, window: usize) -> Option<f32> {
        tail_mean(&self.gen_loss, window)
    }
}

/// Code sequences of a history window.
pub fn history_codes<'t>(table: &'t UnicodeTable, history: &[usize]) -> Vec<&'t [u32]> {
    history.iter().map(|&i| table.code(i)).collect()
}

/// Minimises `L_gen + beta * L_distill` over every (history, next item)
/// pair of the training prefixes.
pub fn train_stage2(
    model: &mut GenModel,
    corpus: &InteractionCorpus,
    table: &UnicodeTable,
    integrated: Option<&EmbeddingMatrix>,
    opts: &TrainOptions,
) -> Result<Stage2Log> {
    opts.validate()?;
    if table.n_items() != corpus.n_items() {
        return Err(invalid!(
            "code table covers {} items, corpus has {}",
            table.n_items(),
            corpus.n_items()
        ));
    }
    model.check_table(table)?;
    let beta = model.config.beta;
    let integrated = if beta > 0.0 {
        let e = integrated.ok_or_else(|| invalid!("beta > 0 needs integrated embeddings"))?;
        if e.n_items() != corpus.n_items() || e.dim() != model.integrated_dim {
            return Err(invalid!(
                "integrated embeddings are {}x{}, expected {}x{}",
                e.n_items(),
                e.dim(),
                corpus.n_items(),
                model.integrated_dim
            ));
        }
        Some(e)
    } else {
        None
    };
    let pairs = corpus.training_pairs();
    if pairs.is_empty() {
        return Err(invalid!("corpus has no training pairs"));
    }
    let mut sampler = BatchSampler::new(pairs.len(), opts.seed)?;
    let mut adam = Adam::new(opts.adam.clone(), &model.store);
    let mut log = Stage2Log::default();
    let max_len = model.config.max_history;
    for step in 0..opts.steps {
        let batch = sampler.next_batch(opts.batch_size);
        let mut histories = Vec::with_capacity(batch.len());
        let mut target_items = Vec::with_capacity(batch.len());
        for &k in &batch {
            let (u, t) = pairs[k];
            let (h, y) = corpus.training_example(u, t, max_len);
            histories.push(history_codes(table, h));
            target_items.push(y);
        }
        let targets: Vec<&[u32]> = target_items.iter().map(|&i| table.code(i)).collect();
        let mut tape = Tape::new(&model.store);
        let states = model.teacher_forced(&mut tape, &histories, &targets)?;
        let gen = model.gen_loss(&mut tape, states, &targets)?;
        let gen_value = tape.value(gen).item()?;
        let mut loss = gen;
        let mut distill_value = None;
        if let Some(e) = integrated {
            let cand =
                distillation_candidates(e, &target_items, model.config.n_neg, sampler.rng())?;
            let cand = tape.constant(cand)?;
            let out = model.distill_outputs(&mut tape, states, &targets)?;
            let dl = distillation_loss(&mut tape, out, cand)?;
            distill_value = Some(tape.value(dl).item()?);
            let dl = tape.scale(dl, beta as f32)?;
            loss = tape.add(loss, dl)?;
        }
        let total = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        drop(tape);
        model.store.accumulate(&grads)?;
        adam.step(&mut model.store)?;
        log.gen_loss.push(gen_value);
        log.distill_loss.push(distill_value);
        log.total_loss.push(total);
        if opts.log_every > 0 && (step + 1) % opts.log_every == 0 {
            log::info!(
                "stage2 step {}/{}: gen {:.4} distill {} total {:.4}",
                step + 1,
                opts.steps,
                tail_mean(&log.gen_loss, opts.log_every as usize).unwrap_or(0.0),
                distill_value.map_or("-".to_string(), |v| format!("{v:.4}")),
                total
            );
        }
    }
    Ok(log)
}
