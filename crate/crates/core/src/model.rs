//! A full RTA model: representer `φ` and aggregator `g` sharing one
//! parameter store, scored by `f(p, s) = ⟨g(h_p1, …, h_pl), h_s⟩`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::aggregate::{Aggregator, AggregatorConfig, AggregatorKind};
use crate::corpus::SongId;
use crate::error::{Result, RtaError};
use crate::init::EmbeddingStore;
use crate::numerics::{ParamStore, Rng, Tensor};
use crate::represent::{precompute_catalog, CatalogMatrix, Representer, RepresenterConfig, RepresenterKind, SongMeta};

/// The six named configurations compared in the evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    MfAvg,
    MfCnn,
    MfGru,
    MfTransformer,
    FmTransformer,
    NnTransformer,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 6] = [
        ModelVariant::MfAvg,
        ModelVariant::MfCnn,
        ModelVariant::MfGru,
        ModelVariant::MfTransformer,
        ModelVariant::FmTransformer,
        ModelVariant::NnTransformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::MfAvg => "mf-avg",
            ModelVariant::MfCnn => "mf-cnn",
            ModelVariant::MfGru => "mf-gru",
            ModelVariant::MfTransformer => "mf-transformer",
            ModelVariant::FmTransformer => "fm-transformer",
            ModelVariant::NnTransformer => "nn-transformer",
        }
    }

    pub fn kinds(self) -> (RepresenterKind, AggregatorKind) {
        use AggregatorKind as A;
        use RepresenterKind as R;
        match self {
            ModelVariant::MfAvg => (R::Direct, A::Avg),
            ModelVariant::MfCnn => (R::Direct, A::Cnn),
            ModelVariant::MfGru => (R::Direct, A::Gru),
            ModelVariant::MfTransformer => (R::Direct, A::Transformer),
            ModelVariant::FmTransformer => (R::Fm, A::Transformer),
            ModelVariant::NnTransformer => (R::Nn, A::Transformer),
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = RtaError;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| RtaError::Config(format!("unknown model `{s}`; expected one of mf-avg, mf-cnn, mf-gru, mf-transformer, fm-transformer, nn-transformer")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub representer: RepresenterConfig,
    pub aggregator: AggregatorConfig,
    /// Keep `e_s` fixed at its initial value.
    #[serde(default)]
    pub freeze_song_embeddings: bool,
}

impl ModelConfig {
    pub fn variant(variant: ModelVariant, dim: usize) -> Self {
        let (r, a) = variant.kinds();
        ModelConfig {
            dim,
            representer: RepresenterConfig {
                kind: r,
                ..Default::default()
            },
            aggregator: AggregatorConfig {
                kind: a,
                ..Default::default()
            },
            freeze_song_embeddings: false,
        }
    }

    /// Short identifier such as `fm-transformer`, or `direct+gru` for
    /// combinations outside the named six.
    pub fn label(&self) -> String {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.kinds() == (self.representer.kind, self.aggregator.kind))
            .map(|v| v.name().to_string())
            .unwrap_or_else(|| format!("{:?}+{:?}", self.representer.kind, self.aggregator.kind).to_lowercase())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(RtaError::Config("dim must be ≥ 1".into()));
        }
        self.representer.validate(self.dim)?;
        self.aggregator.validate(self.dim)
    }
}

#[derive(Debug, Clone)]
pub struct RtaModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub representer: Representer,
    pub aggregator: Aggregator,
}

impl RtaModel {
    /// Fresh model: tables from `store`, network weights from `rng`.
    pub fn init(config: &ModelConfig, store: &EmbeddingStore, meta: Arc<SongMeta>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if store.dim != config.dim {
            return Err(RtaError::Config(format!("embedding store has D = {} but the model expects {}", store.dim, config.dim)));
        }
        let mut params = ParamStore::new();
        let representer = Representer::init(&mut params, &config.representer, store, meta, rng)?;
        let aggregator = Aggregator::init(&mut params, &config.aggregator, config.dim, rng)?;
        Self::finish(config, params, representer, aggregator)
    }

    /// Rebuilds a model around existing parameters.
    pub fn from_params(config: &ModelConfig, params: ParamStore, meta: Arc<SongMeta>) -> Result<Self> {
        config.validate()?;
        let representer = Representer::attach(&params, &config.representer, config.dim, meta)?;
        let aggregator = Aggregator::attach(&params, &config.aggregator, config.dim)?;
        Self::finish(config, params, representer, aggregator)
    }

    fn finish(config: &ModelConfig, mut params: ParamStore, representer: Representer, aggregator: Aggregator) -> Result<Self> {
        if let Some(id) = representer.song_table() {
            params.set_frozen(id, config.freeze_song_embeddings);
        }
        Ok(RtaModel {
            config: config.clone(),
            params,
            representer,
            aggregator,
        })
    }

    pub fn n_songs(&self) -> usize {
        self.representer.n_songs()
    }

    /// `h_s` for every catalog song.
    pub fn catalog(&self, checkpoint_hash: &str) -> Result<CatalogMatrix> {
        precompute_catalog(&self.representer, &self.params, checkpoint_hash, true)
    }

    /// `f(p, s)` evaluated directly, for checks and small callers.
    pub fn score(&self, playlist: &[SongId], song: SongId) -> Result<f32> {
        let seq = self.representer.represent_many(&self.params, playlist)?;
        let hp = self.aggregator.apply(&self.params, &seq)?;
        let hs = self.representer.represent(&self.params, song)?;
        Ok(crate::numerics::dot(&hp, &hs))
    }

    /// Prefix states of a playlist's representations, outside training.
    pub fn prefix_states(&self, playlist: &[SongId]) -> Result<Tensor> {
        let seq = self.representer.represent_many(&self.params, playlist)?;
        self.aggregator.prefix_states(&self.params, &seq)
    }
}
