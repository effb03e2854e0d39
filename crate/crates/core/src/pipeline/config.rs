use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::corpus::{SplitSelector, SyntheticSpec, DEFAULT_HISTORY};
use crate::error::{Error, Result};
use crate::fusion::{AlignDenominator, FusionConfig, IntegratedVariant};
use crate::generator::GenConfig;
use crate::numerics::{AdamConfig, TrainOptions};

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Which embedding the codes are built from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Jointly trained integrated embeddings.
    #[default]
    Ours,
    /// Raw semantic embeddings.
    SemanticOnly,
    /// Collaborative embeddings trained without the semantic branch.
    CollaborativeOnly,
    /// PCA-reduced semantic embeddings concatenated with collaborative ones.
    Concat,
    /// Integrated embeddings with randomly assigned codes.
    RandomCodes,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Ours,
        Mode::SemanticOnly,
        Mode::CollaborativeOnly,
        Mode::Concat,
        Mode::RandomCodes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Ours => "ours",
            Mode::SemanticOnly => "semantic_only",
            Mode::CollaborativeOnly => "collaborative_only",
            Mode::Concat => "concat",
            Mode::RandomCodes => "random_codes",
        }
    }

    /// Whether Stage I runs at all.
    pub fn trains_stage1(self) -> bool {
        self != Mode::SemanticOnly
    }

    /// Whether Stage I uses the semantic branch.
    pub fn uses_alignment(self) -> bool {
        matches!(self, Mode::Ours | Mode::RandomCodes)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| config_err(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Raw interaction log for `prepare-data`.
    pub interactions: Option<PathBuf>,
    /// Semantic embedding file for `prepare-data` (row order from its
    /// companion tokens file).
    pub semantic: Option<PathBuf>,
    /// Collaborative reference embeddings for `dominance`; defaults to the
    /// run's own `collaborative.unge`.
    pub collaborative: Option<PathBuf>,
    pub min_core: usize,
    pub max_history: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            interactions: None,
            semantic: None,
            collaborative: None,
            min_core: 5,
            max_history: DEFAULT_HISTORY,
        }
    }
}

/// Transformer sizes shared by both stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Only 0 is supported.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 96,
            heads: 6,
            hidden: 256,
            encoder_layers: 1,
            decoder_layers: 4,
            dropout: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSettings {
    pub alpha: f64,
    pub tau: f64,
    pub denominator: AlignDenominator,
    pub integrated: IntegratedVariant,
}

impl Default for FusionSettings {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            tau: 1.0,
            denominator: AlignDenominator::Inclusive,
            integrated: IntegratedVariant::Table,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    pub clusters: usize,
    pub depth: usize,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            clusters: 256,
            depth: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSettings {
    pub beta: f64,
    pub n_neg: usize,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        Self {
            beta: 1.0,
            n_neg: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub steps: u64,
    /// Stage-specific step budgets; `steps` when unset.
    pub stage1_steps: Option<u64>,
    pub stage2_steps: Option<u64>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub warmup_init_lr: f64,
    pub log_every: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            steps: 20_000,
            stage1_steps: None,
            stage2_steps: None,
            batch_size: 256,
            learning_rate: adam.learning_rate,
            weight_decay: adam.weight_decay,
            warmup_steps: adam.warmup_steps,
            warmup_init_lr: adam.warmup_init_lr,
            log_every: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub beam: usize,
    pub split: SplitSelector,
    pub dominance_clusters: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![10, 20],
            beam: crate::inference::DEFAULT_BEAM,
            split: SplitSelector::Test,
            dominance_clusters: crate::evalkit::DEFAULT_CLUSTERS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub queries: usize,
    pub k: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { queries: 64, k: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    /// Variant names; see [`super::Variant::builtin`].
    pub variants: Vec<String>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![2020, 2021, 2022, 2023, 2024],
            variants: super::Variant::BUILTIN_NAMES
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

/// Everything a pipeline run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
    pub model: ModelConfig,
    pub fusion: FusionSettings,
    pub quantizer: QuantizerConfig,
    pub generator: GeneratorSettings,
    pub train: TrainSettings,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            mode: Mode::Ours,
            data: DataConfig::default(),
            synthetic: SyntheticSpec::default(),
            model: ModelConfig::default(),
            fusion: FusionSettings::default(),
            quantizer: QuantizerConfig::default(),
            generator: GeneratorSettings::default(),
            train: TrainSettings::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

/// Offsets that give every seeded component its own stream.
#[derive(Clone, Copy, Debug)]
pub enum SeedUse {
    FusionInit = 0,
    Stage1Batches = 1,
    Quantizer = 2,
    GeneratorInit = 3,
    Stage2Batches = 4,
    Dominance = 5,
}

impl RunConfig {
    /// Parses a config document. A run manifest is accepted too, in which
    /// case its embedded config is used.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        if let Value::Object(map) = &mut value {
            if map.contains_key("command") && map.contains_key("config") {
                value = map.remove("config").unwrap_or(Value::Null);
            }
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Applies a dotted `key=value` override. The value is parsed as JSON
    /// and falls back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| config_err(format!("override {assignment:?} is not key=value")))?;
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| config_err(format!("unknown config key {key:?}")))?;
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let cfg: RunConfig =
            serde_json::from_value(root).map_err(|e| config_err(format!("{key}: {e}")))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| config_err(e.to_string());
        self.synthetic.validate().map_err(wrap)?;
        self.fusion_config().validate().map_err(wrap)?;
        self.gen_config().validate().map_err(wrap)?;
        self.stage_options(1).validate().map_err(wrap)?;
        if self.model.dropout != 0.0 {
            return Err(config_err("dropout is not supported; use 0"));
        }
        if self.data.min_core == 0 {
            return Err(config_err("data.min_core must be >= 1"));
        }
        if self.quantizer.clusters == 0 || self.quantizer.depth == 0 {
            return Err(config_err("quantizer clusters and depth must be >= 1"));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(config_err("eval.ks must be a non-empty list of K >= 1"));
        }
        let kmax = self.max_k();
        if self.eval.beam < kmax {
            return Err(config_err(format!(
                "eval.beam {} is below the largest K {kmax}",
                self.eval.beam
            )));
        }
        if self.eval.dominance_clusters < 2 {
            return Err(config_err("eval.dominance_clusters must be >= 2"));
        }
        if self.bench.queries == 0 || self.bench.k == 0 || self.bench.k > self.eval.beam {
            return Err(config_err(
                "bench.queries >= 1 and 1 <= bench.k <= eval.beam required",
            ));
        }
        if self.ablate.seeds.is_empty() {
            return Err(config_err("ablate.seeds must not be empty"));
        }
        for v in &self.ablate.variants {
            super::Variant::builtin(v)?;
        }
        Ok(())
    }

    pub fn seed_for(&self, use_: SeedUse) -> u64 {
        self.seed.wrapping_add(use_ as u64)
    }

    pub fn max_k(&self) -> usize {
        self.eval.ks.iter().copied().max().unwrap_or(1)
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            dim: self.model.dim,
            heads: self.model.heads,
            hidden: self.model.hidden,
            max_history: self.data.max_history,
            tau: self.fusion.tau,
            alpha: if self.mode.uses_alignment() {
                self.fusion.alpha
            } else {
                0.0
            },
            denominator: self.fusion.denominator,
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            dim: self.model.dim,
            heads: self.model.heads,
            hidden: self.model.hidden,
            encoder_layers: self.model.encoder_layers,
            decoder_layers: self.model.decoder_layers,
            max_history: self.data.max_history,
            beta: self.generator.beta,
            n_neg: self.generator.n_neg,
        }
    }

    /// Training options of stage 1 or 2.
    pub fn stage_options(&self, stage: u8) -> TrainOptions {
        let t = &self.train;
        let (steps, seed) = if stage == 1 {
            (
                t.stage1_steps.unwrap_or(t.steps),
                self.seed_for(SeedUse::Stage1Batches),
            )
        } else {
            (
                t.stage2_steps.unwrap_or(t.steps),
                self.seed_for(SeedUse::Stage2Batches),
            )
        };
        TrainOptions {
            steps,
            batch_size: t.batch_size,
            adam: AdamConfig {
                learning_rate: t.learning_rate,
                weight_decay: t.weight_decay,
                warmup_steps: t.warmup_steps,
                warmup_init_lr: t.warmup_init_lr,
                ..AdamConfig::default()
            },
            seed,
            log_every: t.log_every,
        }
    }
}
