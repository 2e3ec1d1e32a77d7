//! Song representations `h_s = φ(s)`.
//!
//! A representer reads only a song id and its metadata tuple, never a
//! playlist, so the whole catalog can be represented offline.

mod catalog;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, MetaField, SongId};
use crate::error::{Result, RtaError};
use crate::init::EmbeddingStore;
use crate::numerics::{AttentionSpec, ParamId, ParamStore, Rng, Tape, Tensor, Var};

pub use catalog::{precompute_catalog, read_catalog_matrix, write_catalog_matrix, CatalogMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepresenterKind {
    /// `φ(s) = e_s`
    Direct,
    /// Mean of the four metadata vectors.
    Fm,
    /// Self-attention over the song and metadata tokens.
    #[serde(alias = "attention")]
    Nn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepresenterConfig {
    pub kind: RepresenterKind,
    pub nn_layers: usize,
    pub nn_heads: usize,
    /// Feed `e_s` itself as a token to the attention representer.
    pub song_token: bool,
}

impl Default for RepresenterConfig {
    fn default() -> Self {
        RepresenterConfig {
            kind: RepresenterKind::Direct,
            nn_layers: 1,
            nn_heads: 4,
            song_token: true,
        }
    }
}

impl RepresenterConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.kind == RepresenterKind::Nn {
            if self.nn_layers == 0 {
                return Err(RtaError::Config("nn_layers must be ≥ 1".into()));
            }
            if self.nn_heads == 0 || dim % self.nn_heads != 0 {
                return Err(RtaError::Config(format!("nn_heads = {} does not divide D = {dim}", self.nn_heads)));
            }
        }
        Ok(())
    }
}

/// Metadata rows of every song plus which table rows were observed in
/// training. Rows that were never observed are cold and are skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct SongMeta {
    pub index: Vec<[u32; 4]>,
    pub present: [Vec<bool>; 4],
}

impl SongMeta {
    pub fn new(catalog: &Catalog, store: &EmbeddingStore) -> Self {
        let index = catalog
            .songs
            .iter()
            .map(|s| MetaField::ALL.map(|f| Catalog::meta_index(s, f) as u32))
            .collect();
        SongMeta {
            index,
            present: MetaField::ALL.map(|f| store.table(f).present.clone()),
        }
    }

    pub fn n_songs(&self) -> usize {
        self.index.len()
    }

    pub fn table_size(&self, field: usize) -> usize {
        self.present[field].len()
    }

    /// Whether field `f` of `song` has a warm embedding.
    pub fn is_warm(&self, song: SongId, f: usize) -> bool {
        self.present[f][self.index[song][f] as usize]
    }

    pub fn validate(&self) -> Result<()> {
        for (s, idx) in self.index.iter().enumerate() {
            for f in 0..4 {
                if idx[f] as usize >= self.present[f].len() {
                    return Err(RtaError::Domain(format!(
                        "song {s}: {} row {} outside table of {}",
                        MetaField::ALL[f].name(),
                        idx[f],
                        self.present[f].len()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct AttnLayer {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

/// Parameter handles of one representer inside a model's [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Representer {
    pub config: RepresenterConfig,
    pub dim: usize,
    meta: Arc<SongMeta>,
    song: Option<ParamId>,
    tables: Option<[ParamId; 4]>,
    layers: Vec<AttnLayer>,
}

pub const SONG_TABLE: &str = "phi.song";

fn table_name(f: usize) -> String {
    format!("phi.meta.{}", MetaField::ALL[f].name())
}

fn layer_names(i: usize) -> [String; 6] {
    ["wq", "wk", "wv", "wo", "ln_gain", "ln_bias"].map(|p| format!("phi.nn{i}.{p}"))
}

impl Representer {
    /// Adds freshly initialized parameters for this representer to `params`.
    ///
    /// Song and metadata tables start from `store`; attention projections are
    /// drawn from `N(0, 1/D)`.
    pub fn init(
        params: &mut ParamStore,
        config: &RepresenterConfig,
        store: &EmbeddingStore,
        meta: Arc<SongMeta>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let dim = store.dim;
        config.validate(dim)?;
        if store.song_vectors.rows() != meta.n_songs() {
            return Err(RtaError::Shape {
                op: "Representer::init",
                left: store.song_vectors.shape().to_vec(),
                right: vec![meta.n_songs()],
            });
        }
        if config.kind == RepresenterKind::Direct || (config.kind == RepresenterKind::Nn && config.song_token) {
            params.add(SONG_TABLE, store.song_vectors.clone(), false)?;
        }
        if config.kind != RepresenterKind::Direct {
            for (f, field) in MetaField::ALL.into_iter().enumerate() {
                params.add(table_name(f), store.table(field).vectors.clone(), false)?;
            }
        }
        if config.kind == RepresenterKind::Nn {
            let std = 1.0 / (dim as f32).sqrt();
            for i in 0..config.nn_layers {
                let [wq, wk, wv, wo, g, b] = layer_names(i);
                params.add(wq, rng.normal_matrix(dim, dim, std), false)?;
                params.add(wk, rng.normal_matrix(dim, dim, std), false)?;
                params.add(wv, rng.normal_matrix(dim, dim, std), false)?;
                params.add(wo, rng.normal_matrix(dim, dim, std), false)?;
                params.add(g, Tensor::filled(&[1, dim], 1.0), true)?;
                params.add(b, Tensor::zeros(&[1, dim]), true)?;
            }
        }
        Self::attach(params, config, dim, meta)
    }

    /// Looks up an existing representer's parameters by name.
    pub fn attach(params: &ParamStore, config: &RepresenterConfig, dim: usize, meta: Arc<SongMeta>) -> Result<Self> {
        config.validate(dim)?;
        meta.validate()?;
        let need = |name: &str, rows: usize| -> Result<ParamId> {
            let id = params
                .id(name)
                .ok_or_else(|| RtaError::Config(format!("missing parameter `{name}`")))?;
            let t = params.tensor(id);
            if t.rows() != rows || t.cols() != dim {
                return Err(RtaError::Shape {
                    op: "Representer::attach",
                    left: t.shape().to_vec(),
                    right: vec![rows, dim],
                });
            }
            Ok(id)
        };
        let song = match config.kind {
            RepresenterKind::Direct => Some(need(SONG_TABLE, meta.n_songs())?),
            RepresenterKind::Nn if config.song_token => Some(need(SONG_TABLE, meta.n_songs())?),
            _ => None,
        };
        let tables = if config.kind == RepresenterKind::Direct {
            None
        } else {
            let mut ids = [ParamId(0); 4];
            for (f, id) in ids.iter_mut().enumerate() {
                *id = need(&table_name(f), meta.table_size(f))?;
            }
            Some(ids)
        };
        let mut layers = Vec::new();
        if config.kind == RepresenterKind::Nn {
            for i in 0..config.nn_layers {
                let [wq, wk, wv, wo, g, b] = layer_names(i);
                layers.push(AttnLayer {
                    wq: need(&wq, dim)?,
                    wk: need(&wk, dim)?,
                    wv: need(&wv, dim)?,
                    wo: need(&wo, dim)?,
                    ln_gain: need(&g, 1)?,
                    ln_bias: need(&b, 1)?,
                });
            }
        }
        Ok(Representer {
            config: config.clone(),
            dim,
            meta,
            song,
            tables,
            layers,
        })
    }

    pub fn meta(&self) -> &Arc<SongMeta> {
        &self.meta
    }

    pub fn n_songs(&self) -> usize {
        self.meta.n_songs()
    }

    /// Id of the song embedding table, if this representer has one.
    pub fn song_table(&self) -> Option<ParamId> {
        self.song
    }

    fn check_ids(&self, songs: &[SongId]) -> Result<()> {
        match songs.iter().find(|&&s| s >= self.n_songs()) {
            Some(&s) => Err(RtaError::UnknownSong(s)),
            None => Ok(()),
        }
    }

    /// `|songs| × D` representations, recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, songs: &[SongId], dropout: f32, rng: &mut Rng) -> Result<Var> {
        self.check_ids(songs)?;
        match self.config.kind {
            RepresenterKind::Direct => tape.gather(self.song.expect("direct has a song table"), songs),
            RepresenterKind::Fm => self.forward_fm(tape, songs),
            RepresenterKind::Nn => self.forward_nn(tape, songs, dropout, rng),
        }
    }

    fn metadata_tokens(&self, tape: &mut Tape, songs: &[SongId]) -> Result<Vec<Var>> {
        let tables = self.tables.expect("metadata representer");
        (0..4)
            .map(|f| {
                let rows: Vec<usize> = songs.iter().map(|&s| self.meta.index[s][f] as usize).collect();
                tape.gather(tables[f], &rows)
            })
            .collect()
    }

    fn forward_fm(&self, tape: &mut Tape, songs: &[SongId]) -> Result<Var> {
        let tokens = self.metadata_tokens(tape, songs)?;
        let stacked = tape.interleave_rows(&tokens)?;
        let mut weights = Vec::with_capacity(songs.len() * 4);
        for &s in songs {
            let warm: Vec<bool> = (0..4).map(|f| self.meta.is_warm(s, f)).collect();
            let n = warm.iter().filter(|&&w| w).count();
            // cold fields drop out of the mean; no warm field gives the zero vector
            weights.extend(warm.iter().map(|&w| if w { 1.0 / n as f32 } else { 0.0 }));
        }
        tape.group_sum(stacked, 4, weights)
    }

    fn forward_nn(&self, tape: &mut Tape, songs: &[SongId], dropout: f32, rng: &mut Rng) -> Result<Var> {
        let mut tokens = Vec::with_capacity(5);
        if let Some(song) = self.song {
            tokens.push(tape.gather(song, songs)?);
        }
        tokens.extend(self.metadata_tokens(tape, songs)?);
        let t = tokens.len();
        let mut x = tape.interleave_rows(&tokens)?;
        let mut valid = Vec::with_capacity(songs.len() * t);
        for &s in songs {
            if self.song.is_some() {
                valid.push(true);
            }
            valid.extend((0..4).map(|f| self.meta.is_warm(s, f)));
        }
        for layer in &self.layers {
            let a = self.attention_sublayer(tape, layer, x, t, &valid)?;
            let a = tape.dropout(a, dropout, rng)?;
            let r = tape.add(x, a)?;
            let (g, b) = (tape.param(layer.ln_gain), tape.param(layer.ln_bias));
            x = tape.layer_norm(r, g, b)?;
        }
        let mut weights = Vec::with_capacity(valid.len());
        for chunk in valid.chunks(t) {
            let n = chunk.iter().filter(|&&v| v).count();
            weights.extend(chunk.iter().map(|&v| if v { 1.0 / n as f32 } else { 0.0 }));
        }
        tape.group_sum(x, t, weights)
    }

    /// Multi-head self-attention within each song's token group, projected
    /// by `W_o`. Masked tokens are never attended to.
    fn attention_sublayer(&self, tape: &mut Tape, layer: &AttnLayer, x: Var, t: usize, valid: &[bool]) -> Result<Var> {
        let (wq, wk, wv, wo) = (tape.param(layer.wq), tape.param(layer.wk), tape.param(layer.wv), tape.param(layer.wo));
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let spec = AttentionSpec {
            group_len: t,
            heads: self.config.nn_heads,
            causal: false,
            key_mask: Some(valid.to_vec()),
        };
        let a = tape.attention(q, k, v, spec)?;
        tape.matmul(a, wo)
    }

    /// `φ(song)` evaluated outside training.
    pub fn represent(&self, params: &ParamStore, song: SongId) -> Result<Vec<f32>> {
        Ok(self.represent_many(params, &[song])?.into_data())
    }

    pub fn represent_many(&self, params: &ParamStore, songs: &[SongId]) -> Result<Tensor> {
        let mut tape = Tape::new(params);
        let mut rng = Rng::seed_from(0);
        let h = self.forward(&mut tape, songs, 0.0, &mut rng)?;
        Ok(tape.value(h).clone())
    }
}

#[cfg(test)]
mod tests;
