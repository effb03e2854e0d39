use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Mode, RunConfig};
use super::manifest::{OutputGuard, RunManifest};
use super::{files, stages};
use crate::corpus::tokens_path;
use crate::error::{Error, Result};
use crate::evalkit::{DominanceReport, MetricReport};

/// One row of the ablation grid: a mode plus optional loss-weight overrides.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Variant {
    pub name: &'static str,
    pub mode: Mode,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

impl Variant {
    pub const BUILTIN_NAMES: [&'static str; 7] = [
        "semantic_only",
        "collaborative_only",
        "concat",
        "ours",
        "random_codes",
        "without_cka_ikd",
        "cka_only",
    ];

    pub fn builtin(name: &str) -> Result<Self> {
        let v = |name, mode, alpha, beta| Variant {
            name,
            mode,
            alpha,
            beta,
        };
        Ok(match name {
            "semantic_only" => v("semantic_only", Mode::SemanticOnly, None, None),
            "collaborative_only" => v("collaborative_only", Mode::CollaborativeOnly, None, None),
            "concat" => v("concat", Mode::Concat, None, None),
            "ours" => v("ours", Mode::Ours, None, None),
            "random_codes" => v("random_codes", Mode::RandomCodes, None, None),
            // neither alignment nor distillation
            "without_cka_ikd" => v("without_cka_ikd", Mode::CollaborativeOnly, None, Some(0.0)),
            // alignment without distillation
            "cka_only" => v("cka_only", Mode::Ours, None, Some(0.0)),
            other => return Err(Error::Config(format!("unknown ablation variant {other:?}"))),
        })
    }

    /// The run config of this variant at `seed`.
    pub fn config(&self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut c = base.clone();
        c.seed = seed;
        c.mode = self.mode;
        if let Some(a) = self.alpha {
            c.fusion.alpha = a;
        }
        if let Some(b) = self.beta {
            c.generator.beta = b;
        }
        c.data.collaborative = None;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mode: Mode,
    pub seed: u64,
    pub metrics: MetricReport,
    pub dominance: DominanceReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub popularity: MetricReport,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn rows_for<'a>(&'a self, variant: &'a str) -> impl Iterator<Item = &'a AblationRow> + 'a {
        self.rows.iter().filter(move |r| r.variant == variant)
    }

    pub fn row(&self, variant: &str, seed: u64) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.seed == seed)
    }

    /// Aligned comparison table: every (variant, seed) row, then per-variant
    /// means and the popularity baseline.
    pub fn to_text(&self) -> String {
        let ks: Vec<usize> = self.popularity.recall_at.keys().copied().collect();
        let mut header = vec!["variant".to_string(), "seed".to_string()];
        header.extend(ks.iter().map(|k| format!("R@{k}")));
        header.extend(ks.iter().map(|k| format!("N@{k}")));
        header.extend(["sem".to_string(), "collab".to_string()]);
        let metric_cells = |m: &MetricReport| -> Vec<String> {
            let mut v: Vec<String> = ks
                .iter()
                .map(|&k| format!("{:.4}", m.recall(k).unwrap_or(0.0)))
                .collect();
            v.extend(
                ks.iter()
                    .map(|&k| format!("{:.4}", m.ndcg(k).unwrap_or(0.0))),
            );
            v
        };
        let mut table = vec![header];
        for r in &self.rows {
            let mut line = vec![r.variant.clone(), r.seed.to_string()];
            line.extend(metric_cells(&r.metrics));
            line.push(format!("{:.4}", r.dominance.similarity_semantic));
            line.push(format!("{:.4}", r.dominance.similarity_collaborative));
            table.push(line);
        }
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.variant.as_str()) {
                names.push(&r.variant);
            }
        }
        for name in names {
            let rows: Vec<&AblationRow> = self.rows_for(name).collect();
            let n = rows.len() as f64;
            let mean = |f: &dyn Fn(&AblationRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            let mut line = vec![name.to_string(), "mean".to_string()];
            line.extend(
                ks.iter()
                    .map(|&k| format!("{:.4}", mean(&|r| r.metrics.recall(k).unwrap_or(0.0)))),
            );
            line.extend(
                ks.iter()
                    .map(|&k| format!("{:.4}", mean(&|r| r.metrics.ndcg(k).unwrap_or(0.0)))),
            );
            line.push(format!("{:.4}", mean(&|r| r.dominance.similarity_semantic)));
            line.push(format!(
                "{:.4}",
                mean(&|r| r.dominance.similarity_collaborative)
            ));
            table.push(line);
        }
        let mut pop = vec!["popularity".to_string(), "-".to_string()];
        pop.extend(metric_cells(&self.popularity));
        pop.extend(["-".to_string(), "-".to_string()]);
        table.push(pop);
        let cols = table[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &table {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    if c == 0 {
                        format!("{s:<w$}", w = widths[c])
                    } else {
                        format!("{s:>w$}", w = widths[c])
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

fn copy_data(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).map_err(|e| Error::io(to, e))?;
    let semantic_tokens = tokens_path(Path::new(files::SEMANTIC))
        .display()
        .to_string();
    for name in [files::CORPUS, files::SEMANTIC, semantic_tokens.as_str()] {
        let src = from.join(name);
        if src.exists() {
            fs::copy(&src, to.join(name)).map_err(|e| Error::io(&src, e))?;
        }
    }
    Ok(())
}

fn run_variant(cfg: &RunConfig, dir: &Path) -> Result<MetricReport> {
    stages::train_stage1_cmd(cfg, dir)?;
    stages::export_embeddings(cfg, dir)?;
    stages::quantize(cfg, dir)?;
    stages::train_stage2_cmd(cfg, dir)?;
    Ok(stages::evaluate(cfg, dir)?.1)
}

/// Runs every configured variant at every ablation seed and writes the
/// comparison table.
///
/// Data are prepared once. Per seed the collaborative-only Stage I runs
/// first so its embeddings can serve as the collaborative reference of the
/// dominance analysis for every variant; the rest of its pipeline only runs
/// when it is one of the listed variants.
pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<(RunManifest, AblationReport)> {
    let mut g = OutputGuard::new(out)?;
    let root = g.track(files::ABLATE_DIR)?;
    let data = root.join("data");
    if cfg.data.interactions.is_some() {
        stages::prepare_data(cfg, &data)?;
    } else {
        stages::synth_data(cfg, &data)?;
    }
    let mut variants: Vec<Variant> = cfg
        .ablate
        .variants
        .iter()
        .map(|v| Variant::builtin(v))
        .collect::<Result<_>>()?;
    let reference = Variant::builtin("collaborative_only")?;
    let listed_reference = variants.iter().any(|v| v.name == reference.name);
    variants.retain(|v| v.name != reference.name);
    let mut rows = Vec::new();
    let mut popularity = None;
    for &seed in &cfg.ablate.seeds {
        let seed_dir = root.join(format!("seed-{seed}"));
        let ref_dir = seed_dir.join(reference.name);
        copy_data(&data, &ref_dir)?;
        let ref_cfg = reference.config(cfg, seed);
        log::info!("ablation seed {seed}: {}", reference.name);
        let mut seed_rows = Vec::new();
        if listed_reference {
            let m = run_variant(&ref_cfg, &ref_dir)?;
            seed_rows.push((reference, ref_cfg, ref_dir.clone(), m));
        } else {
            stages::train_stage1_cmd(&ref_cfg, &ref_dir)?;
            stages::export_embeddings(&ref_cfg, &ref_dir)?;
        }
        let collaborative = ref_dir.join(files::COLLABORATIVE);
        for v in &variants {
            log::info!("ablation seed {seed}: {}", v.name);
            let dir = seed_dir.join(v.name);
            copy_data(&data, &dir)?;
            let vc = v.config(cfg, seed);
            let m = run_variant(&vc, &dir)?;
            seed_rows.push((*v, vc, dir, m));
        }
        for (v, mut vc, dir, metrics) in seed_rows {
            vc.data.collaborative = Some(collaborative.clone());
            let (_, dominance) = stages::dominance(&vc, &dir)?;
            if popularity.is_none() {
                let text = fs::read_to_string(dir.join(files::POPULARITY_METRICS))
                    .map_err(|e| Error::io(&dir, e))?;
                popularity = Some(serde_json::from_str(&text)?);
            }
            rows.push(AblationRow {
                variant: v.name.to_string(),
                mode: v.mode,
                seed,
                metrics,
                dominance,
            });
        }
    }
    let popularity = popularity.ok_or_else(|| Error::Config("ablation grid is empty".into()))?;
    let report = AblationReport { popularity, rows };
    let text = report.to_text();
    fs::write(g.track(files::ABLATION_TEXT)?, &text).map_err(|e| Error::io(out, e))?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(g.track(files::ABLATION)?, json).map_err(|e| Error::io(out, e))?;
    Ok((g.commit("ablate", cfg)?, report))
}
