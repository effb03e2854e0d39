use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{Mode, RunConfig, SeedUse};
use super::files;
use super::manifest::{OutputGuard, RunManifest};
use crate::corpus::{
    generate_synthetic, load_interactions, load_tokens, save_interactions, tokens_path,
    EmbeddingMatrix, InteractionCorpus,
};
use crate::error::{invalid, Error, Result};
use crate::evalkit::{
    concat_baseline, dominance_similarity, popularity_ranking, DominanceReport, MetricReport,
};
use crate::fusion::{export_integrated, train_stage1, FusionModel};
use crate::generator::{train_stage2, GenModel};
use crate::inference::{
    batch_recommend, bench_cost, threads_from_env, CostReport, RankedList, Stream,
};
use crate::quantizer::{fit, quantization_error, random_assignment, FitReport, UnicodeTable};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(out: &Path, name: &str, producer: &str) -> Result<PathBuf> {
    let p = out.join(name);
    if p.exists() {
        Ok(p)
    } else {
        Err(invalid!(
            "{} is missing; run `{producer}` first",
            p.display()
        ))
    }
}

fn load_corpus(out: &Path) -> Result<InteractionCorpus> {
    InteractionCorpus::load_json(&require(
        out,
        files::CORPUS,
        "prepare-data` or `synth-data",
    )?)
}

/// Loads an embedding file with rows put into corpus item order (via its
/// companion tokens file when present).
pub fn load_aligned(path: &Path, corpus: &InteractionCorpus) -> Result<EmbeddingMatrix> {
    let m = EmbeddingMatrix::load(path)?;
    let tp = tokens_path(path);
    if tp.exists() {
        let tokens = load_tokens(&tp)?;
        if tokens.as_slice() == corpus.item_tokens() {
            return Ok(m);
        }
        return m.reorder(&tokens, corpus.item_tokens());
    }
    if m.n_items() != corpus.n_items() {
        return Err(invalid!(
            "{} has {} rows for {} items and no tokens file",
            path.display(),
            m.n_items(),
            corpus.n_items()
        ));
    }
    Ok(m)
}

fn load_semantic(out: &Path, corpus: &InteractionCorpus) -> Result<EmbeddingMatrix> {
    load_aligned(
        &require(out, files::SEMANTIC, "prepare-data` or `synth-data")?,
        corpus,
    )
}

fn save_matrix(
    guard: &mut OutputGuard,
    name: &str,
    m: &EmbeddingMatrix,
    corpus: &InteractionCorpus,
) -> Result<()> {
    let path = guard.track(name)?;
    guard.track(&tokens_path(Path::new(name)).display().to_string())?;
    m.save_with_tokens(&path, corpus.item_tokens())
}

/// Generates the synthetic corpus and its semantic embeddings.
pub fn synth_data(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let mut g = OutputGuard::new(out)?;
    let synth = generate_synthetic(&cfg.synthetic)?;
    save_interactions(&synth.corpus, &g.track(files::INTERACTIONS)?)?;
    synth.corpus.save_json(&g.track(files::CORPUS)?)?;
    save_matrix(&mut g, files::SEMANTIC, &synth.semantic, &synth.corpus)?;
    write_json(&g.track(files::CATEGORIES)?, &synth.categories)?;
    log::info!(
        "synthetic corpus: {} users, {} items, {} interactions",
        synth.corpus.n_users(),
        synth.corpus.n_items(),
        synth.corpus.n_interactions()
    );
    g.commit("synth-data", cfg)
}

/// Filters a raw interaction log and aligns its semantic embeddings.
pub fn prepare_data(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let path = cfg
        .data
        .interactions
        .as_ref()
        .ok_or_else(|| Error::Config("data.interactions is not set".into()))?;
    let (corpus, stats) = load_interactions(path, cfg.data.min_core)?;
    let semantic = cfg
        .data
        .semantic
        .as_ref()
        .map(|p| load_aligned(p, &corpus))
        .transpose()?;
    let mut g = OutputGuard::new(out)?;
    corpus.save_json(&g.track(files::CORPUS)?)?;
    if let Some(s) = &semantic {
        save_matrix(&mut g, files::SEMANTIC, s, &corpus)?;
    } else {
        log::warn!("data.semantic is not set; only collaborative_only runs will work");
    }
    write_json(&g.track(files::LOAD_STATS)?, &stats)?;
    log::info!(
        "prepared corpus: {} users, {} items, {} interactions",
        corpus.n_users(),
        corpus.n_items(),
        corpus.n_interactions()
    );
    g.commit("prepare-data", cfg)
}

/// Trains the Stage I model for the configured mode.
pub fn train_stage1_cmd(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let mut g = OutputGuard::new(out)?;
    let corpus = load_corpus(out)?;
    if !cfg.mode.trains_stage1() {
        log::info!("mode {} has no Stage I; nothing to train", cfg.mode);
        return g.commit("train-stage1", cfg);
    }
    let semantic = if cfg.mode.uses_alignment() {
        Some(load_semantic(out, &corpus)?)
    } else {
        None
    };
    let fc = cfg.fusion_config();
    let mut model = FusionModel::new(
        fc,
        corpus.n_items(),
        semantic.as_ref().map(EmbeddingMatrix::dim),
        cfg.seed_for(SeedUse::FusionInit),
    )?;
    let log = train_stage1(
        &mut model,
        &corpus,
        semantic.as_ref(),
        &cfg.stage_options(1),
    )?;
    model.save(&g.track(files::STAGE1)?)?;
    write_json(&g.track(files::STAGE1_LOG)?, &log)?;
    g.commit("train-stage1", cfg)
}

/// Writes the embedding the codes are built from (`integrated.unge`) and,
/// for collaborative-only Stage I modes, `collaborative.unge`.
pub fn export_embeddings(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let mut g = OutputGuard::new(out)?;
    let corpus = load_corpus(out)?;
    let semantic = match cfg.mode {
        Mode::CollaborativeOnly => None,
        _ => Some(load_semantic(out, &corpus)?),
    };
    let model = if cfg.mode.trains_stage1() {
        Some(FusionModel::load(&require(
            out,
            files::STAGE1,
            "train-stage1",
        )?)?)
    } else {
        None
    };
    let integrated = match (cfg.mode, &model, &semantic) {
        (Mode::SemanticOnly, _, Some(s)) => s.clone(),
        (Mode::Ours | Mode::RandomCodes, Some(m), s) => {
            export_integrated(m, cfg.fusion.integrated, s.as_ref())?
        }
        (Mode::CollaborativeOnly, Some(m), _) => {
            let c = m.item_embeddings();
            save_matrix(&mut g, files::COLLABORATIVE, &c, &corpus)?;
            c
        }
        (Mode::Concat, Some(m), Some(s)) => {
            let c = m.item_embeddings();
            save_matrix(&mut g, files::COLLABORATIVE, &c, &corpus)?;
            concat_baseline(s, &c)?
        }
        _ => return Err(invalid!("mode {} is missing an input", cfg.mode)),
    };
    save_matrix(&mut g, files::INTEGRATED, &integrated, &corpus)?;
    g.commit("export-embeddings", cfg)
}

#[derive(Serialize)]
struct QuantizeReport<'a> {
    mode: Mode,
    n_items: usize,
    levels: Vec<usize>,
    max_code_length: usize,
    n_disambiguated: usize,
    storage_bytes: usize,
    quantization_error: Option<f64>,
    fit: Option<&'a FitReport>,
}

/// Builds the item code table from `integrated.unge`.
pub fn quantize(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let mut g = OutputGuard::new(out)?;
    let corpus = load_corpus(out)?;
    let e = load_aligned(
        &require(out, files::INTEGRATED, "export-embeddings")?,
        &corpus,
    )?;
    let (k, depth, seed) = (
        cfg.quantizer.clusters,
        cfg.quantizer.depth,
        cfg.seed_for(SeedUse::Quantizer),
    );
    let (table, books, report) = if cfg.mode == Mode::RandomCodes {
        (
            random_assignment(corpus.n_items(), k, depth, seed, false)?,
            None,
            None,
        )
    } else {
        let q = fit(&e, k, depth, seed)?;
        (q.table, Some(q.codebooks), Some(q.report))
    };
    table.save(&g.track(files::CODES)?, corpus.item_tokens())?;
    let error = match &books {
        Some(b) => {
            b.save(&g.track(files::CODEBOOKS)?)?;
            Some(quantization_error(&e, b, &table)?)
        }
        None => None,
    };
    let summary = QuantizeReport {
        mode: cfg.mode,
        n_items: table.n_items(),
        levels: table.level_sizes(),
        max_code_length: table.max_len(),
        n_disambiguated: table.n_disambiguated(),
        storage_bytes: table.storage_bytes(),
        quantization_error: error,
        fit: report.as_ref(),
    };
    write_json(&g.track(files::QUANTIZE_REPORT)?, &summary)?;
    g.commit("quantize", cfg)
}

fn load_table(out: &Path, corpus: &InteractionCorpus) -> Result<UnicodeTable> {
    UnicodeTable::load_for(
        &require(out, files::CODES, "quantize")?,
        corpus.item_tokens(),
    )
}

/// Trains the code generator on the quantized table.
pub fn train_stage2_cmd(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let mut g = OutputGuard::new(out)?;
    let corpus = load_corpus(out)?;
    let table = load_table(out, &corpus)?;
    let e = load_aligned(
        &require(out, files::INTEGRATED, "export-embeddings")?,
        &corpus,
    )?;
    let mut model = GenModel::new(
        cfg.gen_config(),
        table.level_sizes(),
        e.dim(),
        cfg.seed_for(SeedUse::GeneratorInit),
    )?;
    let distill = (cfg.generator.beta > 0.0).then_some(&e);
    let log = train_stage2(&mut model, &corpus, &table, distill, &cfg.stage_options(2))?;
    model.save(&g.track(files::STAGE2)?)?;
    write_json(&g.track(files::STAGE2_LOG)?, &log)?;
    g.commit("train-stage2", cfg)
}

fn decode_all(cfg: &RunConfig, out: &Path, corpus: &InteractionCorpus) -> Result<Vec<RankedList>> {
    let table = load_table(out, corpus)?;
    let model = GenModel::load(&require(out, files::STAGE2, "train-stage2")?)?;
    batch_recommend(
        &model,
        &table,
        corpus,
        cfg.eval.split,
        cfg.eval.beam,
        cfg.max_k(),
        threads_from_env(),
    )
}

#[derive(Serialize)]
struct UserRecommendation<'a> {
    user: &'a str,
    items: Vec<&'a str>,
    scores: Vec<f64>,
}

/// Writes the top-K list of every user for the configured split.
pub fn recommend(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let mut g = OutputGuard::new(out)?;
    let corpus = load_corpus(out)?;
    let lists = decode_all(cfg, out, &corpus)?;
    let rows: Vec<UserRecommendation> = lists
        .iter()
        .enumerate()
        .map(|(u, r)| UserRecommendation {
            user: &corpus.user_tokens()[u],
            items: r
                .entries
                .iter()
                .map(|&(i, _)| corpus.item_tokens()[i].as_str())
                .collect(),
            scores: r.entries.iter().map(|&(_, s)| s).collect(),
        })
        .collect();
    write_json(&g.track(files::RECOMMENDATIONS)?, &rows)?;
    g.commit("recommend", cfg)
}

/// Metrics of the trained model and of the popularity ranking.
pub fn evaluate(cfg: &RunConfig, out: &Path) -> Result<(RunManifest, MetricReport)> {
    let mut g = OutputGuard::new(out)?;
    let corpus = load_corpus(out)?;
    let lists = decode_all(cfg, out, &corpus)?;
    let truth: Vec<usize> = (0..corpus.n_users())
        .map(|u| corpus.target_for(u, cfg.eval.split))
        .collect();
    let rankings: Vec<Option<Vec<usize>>> = lists.iter().map(|r| Some(r.items())).collect();
    let report = MetricReport::compute(&rankings, &truth, &cfg.eval.ks)?;
    let popular = Some(popularity_ranking(&corpus.train_item_counts(), cfg.max_k()));
    let pop = MetricReport::compute(&vec![popular; truth.len()], &truth, &cfg.eval.ks)?;
    write_text(&g.track(files::METRICS)?, &(report.to_json()? + "\n"))?;
    write_text(&g.track(files::METRICS_TEXT)?, &report.to_text())?;
    write_text(
        &g.track(files::POPULARITY_METRICS)?,
        &(pop.to_json()? + "\n"),
    )?;
    Ok((g.commit("evaluate", cfg)?, report))
}

/// Semantic/collaborative shares of `integrated.unge`.
pub fn dominance(cfg: &RunConfig, out: &Path) -> Result<(RunManifest, DominanceReport)> {
    let mut g = OutputGuard::new(out)?;
    let corpus = load_corpus(out)?;
    let s = load_semantic(out, &corpus)?;
    let c_path = match &cfg.data.collaborative {
        Some(p) => p.clone(),
        None => require(
            out,
            files::COLLABORATIVE,
            "export-embeddings` in collaborative_only mode, or set `data.collaborative",
        )?,
    };
    let c = load_aligned(&c_path, &corpus)?;
    let e = load_aligned(
        &require(out, files::INTEGRATED, "export-embeddings")?,
        &corpus,
    )?;
    let report = dominance_similarity(
        &s,
        &c,
        &e,
        cfg.eval.dominance_clusters,
        cfg.seed_for(SeedUse::Dominance),
    )?;
    write_text(&g.track(files::DOMINANCE)?, &(report.to_json()? + "\n"))?;
    Ok((g.commit("dominance", cfg)?, report))
}

/// Unified versus dual decoding cost.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct CostComparison {
    pub unified: CostReport,
    pub dual: CostReport,
    pub latency_ratio: f64,
}

/// Times unified decoding against a dual-stream setup built from two
/// copies of the trained stream.
pub fn bench(cfg: &RunConfig, out: &Path) -> Result<(RunManifest, CostComparison)> {
    let mut g = OutputGuard::new(out)?;
    let corpus = load_corpus(out)?;
    let table = load_table(out, &corpus)?;
    let model = GenModel::load(&require(out, files::STAGE2, "train-stage2")?)?;
    let n = cfg.bench.queries.min(corpus.n_users());
    let queries: Vec<Vec<usize>> = (0..n)
        .map(|u| {
            corpus
                .history_for(u, cfg.eval.split, cfg.data.max_history)
                .to_vec()
        })
        .collect();
    let stream = Stream {
        model: &model,
        table: &table,
    };
    let unified = bench_cost(&[stream], &queries, cfg.eval.beam, cfg.bench.k)?;
    let dual = bench_cost(&[stream, stream], &queries, cfg.eval.beam, cfg.bench.k)?;
    let latency_ratio = dual.mean_ms / unified.mean_ms.max(f64::MIN_POSITIVE);
    let cmp = CostComparison {
        unified,
        dual,
        latency_ratio,
    };
    write_json(&g.track(files::COST)?, &cmp)?;
    Ok((g.commit("bench-cost", cfg)?, cmp))
}
