use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use rta_core::model::RtaModel;
use rta_core::rank::{continue_playlist, RankRequest};
use rta_core::represent::{read_catalog_matrix, CatalogMatrix};
use rta_core::train::read_checkpoint;
use rta_core::RtaError;

use crate::ServeError;

pub const MODEL_FILE: &str = "model.rtak";
pub const CATALOG_FILE: &str = "catalog.rtap";
/// Optional external ids, one per line in song-id order.
pub const SONGS_FILE: &str = "songs.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub artifact_dir: PathBuf,
    pub bind_address: String,
    pub worker_threads: usize,
    pub default_n_reco: usize,
    /// Longest seed used; older songs are dropped. `None` keeps the model's `L`.
    pub max_seed_len: Option<usize>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            artifact_dir: PathBuf::from("artifacts"),
            bind_address: "127.0.0.1:8080".into(),
            worker_threads: 4,
            default_n_reco: 100,
            max_seed_len: None,
        }
    }
}

impl ServeConfig {
    pub fn validate(&self) -> Result<(), RtaError> {
        if self.worker_threads == 0 || self.default_n_reco == 0 || self.max_seed_len == Some(0) {
            return Err(RtaError::Config("worker_threads, default_n_reco and max_seed_len must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// A seed entry: an external id, or an integer song id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedId {
    Index(u64),
    Name(String),
}

impl std::fmt::Display for SeedId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SeedId::Index(i) => write!(f, "{i}"),
            SeedId::Name(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuationRequest {
    pub seed_tracks: Vec<SeedId>,
    #[serde(default)]
    pub n_reco: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyMs {
    pub embed: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationResponse {
    pub recommendations: Vec<String>,
    pub scores: Vec<f32>,
    pub latency_ms: LatencyMs,
    pub warnings: Vec<String>,
}

/// Loaded artifacts. Immutable once built; reloads build a new engine.
#[derive(Debug)]
pub struct Engine {
    pub model: RtaModel,
    pub catalog: CatalogMatrix,
    pub checkpoint_hash: String,
    ids: Vec<String>,
    by_id: HashMap<String, usize>,
    default_n_reco: usize,
    max_seed_len: usize,
}

impl Engine {
    /// Reads and cross-checks the artifacts in `config.artifact_dir`, then
    /// answers one warm-up request.
    pub fn load(config: &ServeConfig) -> Result<Engine, ServeError> {
        config.validate()?;
        let dir = &config.artifact_dir;
        let (checkpoint, hash) = read_checkpoint(&dir.join(MODEL_FILE))?;
        let catalog = read_catalog_matrix(&dir.join(CATALOG_FILE))?;
        if catalog.checkpoint_hash != hash {
            return Err(RtaError::StaleArtifact(format!(
                "{} was computed from checkpoint {} but {} has hash {}",
                dir.join(CATALOG_FILE).display(),
                catalog.checkpoint_hash,
                dir.join(MODEL_FILE).display(),
                hash
            ))
            .into());
        }
        let model = checkpoint.into_model()?;
        let ids = read_song_ids(&dir.join(SONGS_FILE), catalog.len())?;
        let engine = Engine::new(model, catalog, hash, ids, config)?;
        engine.warm_up()?;
        Ok(engine)
    }

    /// Builds an engine from in-memory parts. `ids` defaults to decimal song ids.
    pub fn new(model: RtaModel, catalog: CatalogMatrix, checkpoint_hash: String, ids: Option<Vec<String>>, config: &ServeConfig) -> Result<Engine, ServeError> {
        config.validate()?;
        if catalog.len() != model.n_songs() || catalog.dim() != model.config.dim {
            return Err(RtaError::StaleArtifact(format!(
                "catalog is {}×{} but the model has {} songs of dimension {}",
                catalog.len(),
                catalog.dim(),
                model.n_songs(),
                model.config.dim
            ))
            .into());
        }
        if catalog.is_empty() {
            return Err(RtaError::Config("empty catalog".into()).into());
        }
        let ids = ids.unwrap_or_else(|| (0..catalog.len()).map(|i| i.to_string()).collect());
        let by_id = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let max_seed_len = config.max_seed_len.unwrap_or(model.config.aggregator.max_len).min(model.config.aggregator.max_len);
        Ok(Engine {
            model,
            catalog,
            checkpoint_hash,
            ids,
            by_id,
            default_n_reco: config.default_n_reco,
            max_seed_len,
        })
    }

    pub fn catalog_size(&self) -> usize {
        self.catalog.len()
    }

    pub fn label(&self) -> String {
        self.model.config.label()
    }

    fn warm_up(&self) -> Result<(), ServeError> {
        let req = ContinuationRequest {
            seed_tracks: vec![SeedId::Index(0)],
            n_reco: Some(self.default_n_reco.min(self.catalog_size() - 1).max(1)),
        };
        if self.catalog_size() > 1 {
            self.handle(&req)?;
        }
        Ok(())
    }

    fn resolve(&self, seed: &SeedId) -> Option<usize> {
        match seed {
            SeedId::Index(i) => usize::try_from(*i).ok().filter(|&i| i < self.catalog_size()),
            SeedId::Name(s) => self
                .by_id
                .get(s)
                .copied()
                .or_else(|| s.parse::<usize>().ok().filter(|&i| i < self.catalog_size())),
        }
    }

    /// Resolves the seed, drops unknown ids with a warning, and ranks.
    pub fn handle(&self, request: &ContinuationRequest) -> Result<ContinuationResponse, ServeError> {
        let t0 = Instant::now();
        let mut warnings = Vec::new();
        let mut seed = Vec::with_capacity(request.seed_tracks.len());
        for s in &request.seed_tracks {
            match self.resolve(s) {
                Some(i) => seed.push(i),
                None => warnings.push(format!("unknown seed track `{s}` ignored")),
            }
        }
        if seed.is_empty() {
            return Err(ServeError::UnknownSeed(if request.seed_tracks.is_empty() {
                vec!["seed_tracks is empty".into()]
            } else {
                warnings
            }));
        }
        if seed.len() > self.max_seed_len {
            warnings.push(format!("seed truncated to its last {} tracks", self.max_seed_len));
            seed.drain(..seed.len() - self.max_seed_len);
        }
        let n_reco = request.n_reco.unwrap_or(self.default_n_reco);
        if n_reco == 0 {
            return Err(ServeError::BadRequest("n_reco must be ≥ 1".into()));
        }
        let mut distinct = seed.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let available = self.catalog_size() - distinct.len();
        if n_reco > available {
            warnings.push(format!("catalog exhausted: returning {available} of {n_reco} requested tracks"));
        }
        let resolve_ms = t0.elapsed().as_secs_f64() * 1e3;
        let req = RankRequest::new(seed, n_reco.min(available));
        let (list, timings) = continue_playlist(&req, &self.model.aggregator, &self.model.params, &self.catalog.vectors)?;
        Ok(ContinuationResponse {
            recommendations: list.song_ids.iter().map(|&i| self.ids[i].clone()).collect(),
            scores: list.scores,
            latency_ms: LatencyMs {
                embed: resolve_ms + timings.embed_ms,
                score: timings.score_ms,
            },
            warnings,
        })
    }
}

fn read_song_ids(path: &Path, n: usize) -> Result<Option<Vec<String>>, RtaError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| RtaError::io(path, e))?;
    let ids: Vec<String> = text.lines().map(str::to_owned).collect();
    if ids.len() != n {
        return Err(RtaError::format(path, format!("{} ids for a catalog of {n} songs", ids.len())));
    }
    Ok(Some(ids))
}
