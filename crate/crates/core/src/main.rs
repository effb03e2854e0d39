use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use unger::pipeline::{self, RunConfig};
use unger::{Error, Result};

#[derive(Parser)]
#[command(name = "unger", version = pipeline::version(), about = "Unified-code generative recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config (or a run manifest); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted config override, e.g. `--set model.dim=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory holding every artifact.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Filter a raw interaction log and align its semantic embeddings.
    PrepareData(Common),
    /// Generate the planted-structure synthetic corpus.
    SynthData(Common),
    /// Train the fusion model.
    TrainStage1(Common),
    /// Export the embeddings the codes are built from.
    ExportEmbeddings(Common),
    /// Build item codes by residual k-means (or at random).
    Quantize(Common),
    /// Train the code generator.
    TrainStage2(Common),
    /// Write top-K recommendations for every user.
    Recommend(Common),
    /// Recall@K / NDCG@K of the trained model.
    Evaluate(Common),
    /// Semantic/collaborative shares of the integrated embeddings.
    Dominance(Common),
    /// Unified versus dual decoding cost.
    BenchCost(Common),
    /// Run the variant grid and print a comparison table.
    Ablate(Common),
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &common.set {
        cfg.apply_override(s)?;
    }
    Ok(cfg)
}

fn run(command: Command) -> Result<()> {
    use Command::*;
    let common = match &command {
        PrepareData(c) | SynthData(c) | TrainStage1(c) | ExportEmbeddings(c) | Quantize(c)
        | TrainStage2(c) | Recommend(c) | Evaluate(c) | Dominance(c) | BenchCost(c) | Ablate(c) => {
            c
        }
    };
    let cfg = load_config(common)?;
    let out: &Path = &common.out;
    let manifest = match command {
        PrepareData(_) => pipeline::prepare_data(&cfg, out)?,
        SynthData(_) => pipeline::synth_data(&cfg, out)?,
        TrainStage1(_) => pipeline::train_stage1_cmd(&cfg, out)?,
        ExportEmbeddings(_) => pipeline::export_embeddings(&cfg, out)?,
        Quantize(_) => pipeline::quantize(&cfg, out)?,
        TrainStage2(_) => pipeline::train_stage2_cmd(&cfg, out)?,
        Recommend(_) => pipeline::recommend(&cfg, out)?,
        Evaluate(_) => {
            let (m, report) = pipeline::evaluate(&cfg, out)?;
            print!("{}", report.to_text());
            m
        }
        Dominance(_) => {
            let (m, report) = pipeline::dominance(&cfg, out)?;
            print!("{}", report.to_text());
            m
        }
        BenchCost(_) => {
            let (m, c) = pipeline::bench(&cfg, out)?;
            println!(
                "unified: {:.3} ms/query, {} forwards, {} table bytes",
                c.unified.mean_ms, c.unified.decoder_forwards, c.unified.table_bytes
            );
            println!(
                "dual:    {:.3} ms/query, {} forwards, {} table bytes",
                c.dual.mean_ms, c.dual.decoder_forwards, c.dual.table_bytes
            );
            println!("latency ratio: {:.2}", c.latency_ratio);
            m
        }
        Ablate(_) => {
            let (m, report) = pipeline::ablate(&cfg, out)?;
            print!("{}", report.to_text());
            m
        }
    };
    log::info!(
        "{} finished in {:.1}s; manifest at {}",
        manifest.command,
        manifest.wall_time_s,
        pipeline::manifest_path(out, &manifest.command).display()
    );
    Ok(())
}

fn error_line(e: &Error) -> String {
    let msg = e
        .to_string()
        .replace('\\', "\\\\")
        .replace('"', "\\\"")
        .replace('\n', " ");
    format!("error: kind={} msg=\"{msg}\"", e.kind())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
