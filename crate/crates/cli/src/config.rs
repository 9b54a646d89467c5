//! Experiment configuration: a sectioned TOML file plus `section.key=value`
//! overrides, resolved into typed sections with every default filled in.

use std::path::{Path, PathBuf};

use mmt_core::data::grounded::DEFAULT_MIN_COUNT;
use mmt_core::data::SynthConfig;
use mmt_core::model::{ModelConfig, ModelKind};
use mmt_core::probe::DEFAULT_TAU;
use mmt_core::retriever::{PretrainConfig, RetrieverConfig};
use mmt_core::train::{FeatureSource, TrainRunConfig};
use mmt_core::{MmtError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory holding `{train,valid,test}.{src,tgt,fid}`; unused in synthetic mode.
    pub corpus_dir: PathBuf,
    /// Feature store file; synthetic mode writes one into the work directory.
    pub feature_store: Option<PathBuf>,
    /// Prepared artifacts go here.
    pub work_dir: PathBuf,
    pub bpe_merges: usize,
    pub lowercase: bool,
    /// Stopword list, one per line; the built-in English list when absent.
    pub stopwords: Option<PathBuf>,
    pub min_count: usize,
    pub mask_grounded: bool,
    pub synthetic: bool,
    /// Pairs carved from the generated corpus for validation and test.
    pub valid_size: usize,
    pub test_size: usize,
    pub synth: SynthConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            corpus_dir: PathBuf::from("data"),
            feature_store: None,
            work_dir: PathBuf::from("work"),
            bpe_merges: 10_000,
            lowercase: false,
            stopwords: None,
            min_count: DEFAULT_MIN_COUNT,
            mask_grounded: false,
            synthetic: false,
            valid_size: 500,
            test_size: 500,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub positional_encoding: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self::from_preset(ModelKind::GatedFusion, &ModelConfig::tiny(0))
    }
}

impl ModelSection {
    fn from_preset(kind: ModelKind, m: &ModelConfig) -> Self {
        Self {
            kind,
            n_layers: m.n_layers,
            d_model: m.d_model,
            d_ffn: m.d_ffn,
            n_heads: m.n_heads,
            max_len: m.max_len,
            positional_encoding: m.positional_encoding,
        }
    }

    /// Model configuration for a vocabulary; dropout comes from training.
    pub fn model_config(&self, vocab_size: usize, dropout: f64) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            d_ffn: self.d_ffn,
            n_heads: self.n_heads,
            dropout,
            vocab_size,
            max_len: self.max_len,
            positional_encoding: self.positional_encoding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub warmup_steps: u64,
    pub lr_peak: f64,
    pub lr_init: f64,
    pub token_budget: usize,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub patience: usize,
    pub avg_last: usize,
    pub beam: usize,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub seed: u64,
    pub max_epochs: usize,
    pub max_len_margin: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let r = TrainRunConfig::default();
        Self {
            warmup_steps: r.warmup_steps,
            lr_peak: r.lr_peak,
            lr_init: r.lr_init,
            token_budget: r.token_budget,
            label_smoothing: r.label_smoothing,
            dropout: r.dropout,
            patience: r.patience,
            avg_last: r.avg_last,
            beam: r.beam,
            weight_decay: r.weight_decay,
            decoupled_weight_decay: r.decoupled_weight_decay,
            seed: r.seed,
            max_epochs: r.max_epochs,
            max_len_margin: r.max_len_margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub features: FeatureSource,
    /// Feature dimension when no store is available (noise features only).
    pub d_v: Option<usize>,
    pub retrieval_k: usize,
    pub gate_log_every: usize,
    pub gate_log_full: bool,
}

impl Default for FusionSection {
    fn default() -> Self {
        let r = TrainRunConfig::default();
        Self {
            features: r.feature_source,
            d_v: None,
            retrieval_k: r.retrieval_k,
            gate_log_every: r.gate_log_every,
            gate_log_full: r.gate_log_full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrieverSection {
    pub n_layers: usize,
    pub d_enc: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RetrieverSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            n_layers: 2,
            d_enc: 64,
            d_ffn: 128,
            n_heads: 4,
            max_len: 256,
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            seed: p.seed,
        }
    }
}

impl RetrieverSection {
    pub fn encoder(&self, vocab_size: usize, d_r: usize) -> RetrieverConfig {
        RetrieverConfig {
            n_layers: self.n_layers,
            d_enc: self.d_enc,
            d_ffn: self.d_ffn,
            n_heads: self.n_heads,
            vocab_size,
            max_len: self.max_len,
            d_r,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub tau: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub fusion: FusionSection,
    pub retriever: RetrieverSection,
    pub probe: ProbeSection,
}

fn config_err(e: impl std::fmt::Display) -> MmtError {
    MmtError::Config(e.to_string())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string (`kind=rmmt`).
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Sets a dotted key, creating intermediate tables.
pub fn set_path(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(MmtError::Config(format!("override key {key:?} must look like section.key")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| MmtError::Config(format!("{key:?}: {part:?} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Replaces `model.preset` by the preset's dimensions; explicit keys win.
fn expand_preset(root: &mut Table) -> Result<()> {
    let Some(model) = root.get_mut("model").and_then(Value::as_table_mut) else {
        return Ok(());
    };
    let Some(preset) = model.remove("preset") else {
        return Ok(());
    };
    let name = preset
        .as_str()
        .ok_or_else(|| MmtError::Config("model.preset must be a string".into()))?;
    let dims = ModelConfig::by_name(name, 0)?;
    let filled = Value::try_from(ModelSection::from_preset(ModelKind::TextOnly, &dims)).map_err(config_err)?;
    for (k, v) in filled.as_table().expect("section serializes to a table") {
        if k != "kind" && !model.contains_key(k) {
            model.insert(k.clone(), v.clone());
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// Builds a configuration from optional file text and `key=value`
    /// overrides applied in order.
    pub fn from_parts(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut root: Table = match text {
            Some(t) => t.parse().map_err(config_err)?,
            None => Table::new(),
        };
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| MmtError::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut root, key.trim(), parse_value(raw.trim()))?;
        }
        expand_preset(&mut root)?;
        let cfg: Self = Value::Table(root).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = path
            .map(|p| std::fs::read_to_string(p).map_err(|e| MmtError::io(p, e)))
            .transpose()?;
        Self::from_parts(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.run_config().validate()?;
        self.model.model_config(1, self.training.dropout).validate()?;
        self.data.synth.validate()?;
        if !(self.probe.tau >= 0.0) {
            return Err(MmtError::Config("probe.tau must be non-negative".into()));
        }
        Ok(())
    }

    /// Every setting, defaults included, as TOML.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// First eight bytes of the SHA-256 of the resolved text, little-endian.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.resolved().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn run_config(&self) -> TrainRunConfig {
        let t = &self.training;
        TrainRunConfig {
            model_kind: self.model.kind,
            feature_source: self.fusion.features,
            warmup_steps: t.warmup_steps,
            lr_peak: t.lr_peak,
            lr_init: t.lr_init,
            token_budget: t.token_budget,
            label_smoothing: t.label_smoothing,
            dropout: t.dropout,
            patience: t.patience,
            avg_last: t.avg_last,
            beam: t.beam,
            weight_decay: t.weight_decay,
            decoupled_weight_decay: t.decoupled_weight_decay,
            seed: t.seed,
            max_epochs: t.max_epochs,
            retrieval_k: self.fusion.retrieval_k,
            gate_log_every: self.fusion.gate_log_every,
            gate_log_full: self.fusion.gate_log_full,
            tau: self.probe.tau,
            max_len_margin: t.max_len_margin,
        }
    }

    /// Copies the sweepable fields of a run configuration back.
    pub fn with_run(&self, run: &TrainRunConfig) -> Self {
        let mut c = self.clone();
        c.training.weight_decay = run.weight_decay;
        c.fusion.features = run.feature_source;
        c
    }

    /// Feature store used by this configuration, if any.
    pub fn store_path(&self) -> Option<PathBuf> {
        match (&self.data.feature_store, self.data.synthetic) {
            (Some(p), _) => Some(p.clone()),
            (None, true) => Some(self.data.work_dir.join("features.store")),
            (None, false) => None,
        }
    }
}
