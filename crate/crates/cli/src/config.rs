//! The run configuration: one TOML file plus `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rta_core::aggregate::AggregatorConfig;
use rta_core::corpus::{SplitSpec, SyntheticSpec};
use rta_core::evalsuite::EvalConfig;
use rta_core::init::WrmfConfig;
use rta_core::model::{ModelConfig, ModelVariant};
use rta_core::represent::RepresenterConfig;
use rta_core::train::TrainConfig;
use rta_serve::ServeConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Parent of every run directory.
    pub out_root: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { out_root: PathBuf::from("runs") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory of MPD `mpd.slice.*.json` files (ingest).
    pub mpd_dir: Option<PathBuf>,
    /// Generate a synthetic corpus instead of reading the MPD (ingest).
    pub synthetic: Option<SyntheticSpec>,
    pub max_len: usize,
    pub alpha_pop: Option<f64>,
    /// Corpus written by `ingest` (every later verb).
    pub corpus: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            mpd_dir: None,
            synthetic: None,
            max_len: rta_core::corpus::DEFAULT_MAX_LEN,
            alpha_pop: None,
            corpus: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSection {
    /// Embedding store written by `wrmf-init`.
    pub embeddings: Option<PathBuf>,
}

/// Model choice. The representer and aggregator kinds come from `variant`;
/// the sub-tables only tune their sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: ModelVariant,
    pub dim: usize,
    pub freeze_song_embeddings: bool,
    pub representer: RepresenterConfig,
    pub aggregator: AggregatorConfig,
    /// Seed for the network weights (song tables come from the embedding store).
    pub rng_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: ModelVariant::MfTransformer,
            dim: 128,
            freeze_song_embeddings: false,
            representer: RepresenterConfig::default(),
            aggregator: AggregatorConfig::default(),
            rng_seed: 0,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        let (r, a) = self.variant.kinds();
        ModelConfig {
            dim: self.dim,
            representer: RepresenterConfig {
                kind: r,
                ..self.representer.clone()
            },
            aggregator: AggregatorConfig {
                kind: a,
                ..self.aggregator.clone()
            },
            freeze_song_embeddings: self.freeze_song_embeddings,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecommenderKind {
    /// An RTA model: `evaluate.checkpoint`, or the untrained init when absent.
    #[default]
    Model,
    Sknn,
    Vsknn,
    Random,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalRole {
    Validation,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub recommender: RecommenderKind,
    pub checkpoint: Option<PathBuf>,
    pub k_neighbors: usize,
    pub role: EvalRole,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            recommender: RecommenderKind::Model,
            checkpoint: None,
            k_neighbors: 100,
            role: EvalRole::Test,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrecomputeSection {
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub n_songs: usize,
    pub dim: usize,
    pub requests: usize,
    /// Worker-thread counts to measure.
    pub threads: Vec<usize>,
    /// p99 budget for each entry of `threads`.
    pub p99_budget_ms: Vec<f64>,
    pub seed_len: usize,
    pub n_reco: usize,
    pub variant: ModelVariant,
    pub rng_seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            n_songs: 2_000_000,
            dim: 128,
            requests: 1000,
            threads: vec![1, 8],
            p99_budget_ms: vec![100.0, 25.0],
            seed_len: 10,
            n_reco: 500,
            variant: ModelVariant::MfTransformer,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub split: SplitSpec,
    pub wrmf: WrmfConfig,
    pub init: InitSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub evaluate: EvaluateSection,
    pub precompute: PrecomputeSection,
    pub serve: ServeConfig,
    pub bench: BenchSection,
}

impl RunConfig {
    /// Reads `path`, applies the overrides in order and checks the result
    /// against the schema. Relative paths stay relative to the working directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: toml::Table = text
            .parse()
            .map_err(|e| CliError::Usage(format!("config {} is not valid TOML: {e}", path.display())))?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        RunConfig::deserialize(toml::Value::Table(value)).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// The resolved configuration as TOML, with every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short digest of the resolved configuration, used in run directory names.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))[..12].to_string()
    }
}

/// `a.b.c=value`: `value` is parsed as a TOML value, or taken as a string.
fn apply_override(table: &mut toml::Table, ov: &str) -> Result<(), CliError> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{ov}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("override `{ov}` has an empty key segment")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = table;
    for seg in &path[..path.len() - 1] {
        let entry = cur.entry(seg.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override `{ov}`: `{seg}` is not a table")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}
