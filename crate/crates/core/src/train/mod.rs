//! Joint training of `φ` and `g` over all playlist prefixes with sampled
//! negatives, halving the learning rate each epoch and early-stopping on
//! validation NDCG.

mod checkpoint;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, sha256_hex, write_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};

use crate::corpus::{Corpus, Role, SongId};
use crate::error::{Result, RtaError};
use crate::evalsuite::{evaluate_assignments, mean_ndcg, validation_assignments, NdcgVariant, RtaRecommender};
use crate::model::RtaModel;
use crate::numerics::{sample_negatives, sgd_step, Gradients, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeSampling {
    #[default]
    Uniform,
    /// Proportional to `1 + training popularity`.
    Popularity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_playlists: usize,
    pub n_negatives: usize,
    pub lr0: f32,
    pub weight_decay: f32,
    pub dropout: f32,
    pub max_epochs: usize,
    pub patience: usize,
    pub rng_seed: u64,
    pub negative_sampling: NegativeSampling,
    /// List length used for validation NDCG.
    pub val_n_reco: usize,
    /// Cap on validation playlists per evaluation; 0 keeps all.
    pub val_playlists: usize,
    /// Rescales the batch gradient to at most this global norm; 0 disables.
    pub clip_grad_norm: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_playlists: 128,
            n_negatives: 100,
            lr0: 0.05,
            weight_decay: 1e-6,
            dropout: 0.1,
            max_epochs: 20,
            patience: 2,
            rng_seed: 0,
            negative_sampling: NegativeSampling::Uniform,
            val_n_reco: 500,
            val_playlists: 0,
            clip_grad_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_playlists == 0 || self.n_negatives == 0 {
            return Err(RtaError::Config("batch_playlists and n_negatives must be ≥ 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(RtaError::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..=0.5).contains(&self.dropout) {
            return Err(RtaError::Config(format!("dropout must lie in [0, 0.5], got {}", self.dropout)));
        }
        if !(self.clip_grad_norm >= 0.0) {
            return Err(RtaError::Config(format!("clip_grad_norm must be ≥ 0, got {}", self.clip_grad_norm)));
        }
        if self.weight_decay < 0.0 || self.patience == 0 || self.val_n_reco == 0 {
            return Err(RtaError::Config("weight_decay must be ≥ 0, patience and val_n_reco ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_ndcg: f64,
    pub lr: f32,
}

/// Everything needed to continue a run. Per-playlist random streams are
/// derived from `(rng_seed, epoch, playlist)`, so the seed and the epoch
/// counter are the whole generator state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Learning rate of the next epoch.
    pub lr: f32,
    pub rng_seed: u64,
    /// Validation NDCG before any training.
    pub initial_ndcg: f64,
    pub best_ndcg: Option<f64>,
    pub best_epoch: usize,
    pub epochs_without_improvement: usize,
    pub finished: bool,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(config: &TrainConfig, initial_ndcg: f64) -> Self {
        TrainState {
            epoch: 0,
            lr: config.lr0,
            rng_seed: config.rng_seed,
            initial_ndcg,
            best_ndcg: None,
            best_epoch: 0,
            epochs_without_improvement: 0,
            finished: false,
            history: Vec::new(),
        }
    }

    /// Closes epoch `epoch + 1` with validation score `ndcg`: halves the
    /// learning rate and applies the early-stopping rule. Returns whether
    /// the score is a new best.
    pub fn record(&mut self, ndcg: f64, patience: usize, max_epochs: usize) -> bool {
        self.epoch += 1;
        self.lr /= 2.0;
        let improved = self.best_ndcg.is_none_or(|b| ndcg > b);
        if improved {
            self.best_ndcg = Some(ndcg);
            self.best_epoch = self.epoch;
            self.epochs_without_improvement = 0;
        } else {
            self.epochs_without_improvement += 1;
        }
        self.finished = self.epochs_without_improvement >= patience || self.epoch >= max_epochs;
        improved
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub n_playlists: usize,
    pub seconds: f64,
}

/// Loss of one playlist over all its prefixes:
/// `−Σ_i log σ(⟨h_p:i, h_s(i+1)⟩) − Σ_i Σ_s⁻ log σ(−⟨h_p:i, h_s⁻⟩)`.
///
/// The prefix vectors come from one causal pass of the aggregator.
pub fn playlist_loss(model: &RtaModel, tape: &mut Tape, songs: &[SongId], negatives: &[SongId], dropout: f32, rng: &mut Rng) -> Result<Var> {
    let l = songs.len();
    if l < 2 {
        return Err(RtaError::Domain(format!("a playlist needs at least 2 songs to train on, got {l}")));
    }
    let n = negatives.len();
    let mut ids = songs.to_vec();
    ids.extend_from_slice(negatives);
    let h = model.representer.forward(tape, &ids, 0.0, rng)?;
    let seq = tape.slice_rows(h, 0, l)?;
    let x = tape.dropout(seq, dropout, rng)?;
    let states = model.aggregator.states(tape, x, dropout, rng)?;
    let prefix = tape.slice_rows(states, 0, l - 1)?;
    let targets = tape.slice_rows(seq, 1, l)?;

    let prod = tape.mul(prefix, targets)?;
    let ones = tape.constant(Tensor::filled(&[model.config.dim, 1], 1.0));
    let pos = tape.matmul(prod, ones)?;
    let pos = tape.log_sigmoid(pos);
    let mut total = tape.sum(pos);
    if n > 0 {
        let hn = tape.slice_rows(h, l, l + n)?;
        let neg = tape.matmul_nt(prefix, hn)?;
        let neg = tape.scale(neg, -1.0);
        let neg = tape.log_sigmoid(neg);
        let neg = tape.sum(neg);
        total = tape.add(total, neg)?;
    }
    Ok(tape.scale(total, -1.0))
}

/// [`playlist_loss`] in evaluation mode.
pub fn playlist_loss_value(model: &RtaModel, songs: &[SongId], negatives: &[SongId]) -> Result<f64> {
    let mut tape = Tape::new(&model.params);
    let loss = playlist_loss(model, &mut tape, songs, negatives, 0.0, &mut Rng::seed_from(0))?;
    Ok(tape.value(loss).item() as f64)
}

/// Cumulative `1 + popularity` weights for popularity-based negatives.
fn popularity_cdf(corpus: &Corpus) -> Vec<f64> {
    let mut acc = 0.0;
    corpus
        .catalog
        .popularity()
        .iter()
        .map(|&p| {
            acc += 1.0 + p as f64;
            acc
        })
        .collect()
}

fn sample_popular(cdf: &[f64], exclude: &[SongId], count: usize, rng: &mut Rng) -> Result<Vec<SongId>> {
    let n = cdf.len();
    let mut excl = exclude.to_vec();
    excl.sort_unstable();
    excl.dedup();
    if count + excl.len() > n {
        return Err(RtaError::Domain(format!("cannot sample {count} negatives from {} eligible songs", n - excl.len())));
    }
    let total = cdf[n - 1];
    let mut out: Vec<SongId> = Vec::with_capacity(count);
    let mut tries = 0usize;
    while out.len() < count && tries < 64 * count + 1024 {
        tries += 1;
        let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * total;
        let s = cdf.partition_point(|&c| c <= u).min(n - 1);
        if excl.binary_search(&s).is_err() && !out.contains(&s) {
            out.push(s);
        }
    }
    if out.len() < count {
        // heavily excluded catalogs: top up uniformly
        excl.extend_from_slice(&out);
        out.extend(sample_negatives(n, &excl, count - out.len(), rng)?);
    }
    Ok(out)
}

fn playlist_key(epoch: usize, idx: usize) -> u64 {
    ((epoch as u64) << 32) | idx as u64
}

/// One pass over `train` in shuffled batches with one SGD step per batch.
pub fn train_epoch(model: &mut RtaModel, corpus: &Corpus, train: &[usize], config: &TrainConfig, epoch: usize, lr: f32) -> Result<EpochStats> {
    let t0 = Instant::now();
    let max_len = model.config.aggregator.max_len;
    let mut order: Vec<usize> = train.iter().copied().filter(|&i| corpus.playlists[i].len() >= 2).collect();
    Rng::derive(config.rng_seed, u64::MAX - epoch as u64).shuffle(&mut order);
    let cdf = (config.negative_sampling == NegativeSampling::Popularity).then(|| popularity_cdf(corpus));
    let n_songs = model.n_songs();

    let mut loss_sum = 0.0f64;
    for (step, batch) in order.chunks(config.batch_playlists).enumerate() {
        let model_ref = &*model;
        let results: Vec<(usize, f64, Gradients)> = batch
            .par_iter()
            .map(|&idx| -> Result<(usize, f64, Gradients)> {
                let songs = &corpus.playlists[idx].songs;
                let songs = &songs[..songs.len().min(max_len)];
                let mut rng = Rng::derive(config.rng_seed, playlist_key(epoch, idx));
                let mut distinct = songs.to_vec();
                distinct.sort_unstable();
                distinct.dedup();
                let count = config.n_negatives.min(n_songs - distinct.len());
                let negatives = match &cdf {
                    Some(cdf) => sample_popular(cdf, songs, count, &mut rng)?,
                    None => sample_negatives(n_songs, songs, count, &mut rng)?,
                };
                if negatives.iter().any(|s| distinct.binary_search(s).is_ok()) {
                    return Err(RtaError::Internal(format!("negative sample intersects playlist {idx}")));
                }
                let mut tape = Tape::training(&model_ref.params);
                let loss = playlist_loss(model_ref, &mut tape, songs, &negatives, config.dropout, &mut rng)?;
                let value = tape.value(loss).item() as f64;
                let mut grads = Gradients::new();
                if value.is_finite() {
                    tape.backward(loss, &mut grads)?;
                }
                Ok((idx, value, grads))
            })
            .collect::<Result<_>>()?;

        let mut merged = Gradients::new();
        for (idx, value, grads) in results {
            if !value.is_finite() {
                return Err(RtaError::NonFiniteLoss {
                    playlist: corpus.playlists[idx].playlist_id as usize,
                    step,
                    value,
                });
            }
            loss_sum += value;
            merged.merge(grads);
        }
        merged.scale(1.0 / batch.len() as f32);
        if config.clip_grad_norm > 0.0 {
            let norm = merged.global_norm(&model.params);
            if norm > config.clip_grad_norm as f64 {
                merged.scale((config.clip_grad_norm as f64 / norm) as f32);
            }
        }
        sgd_step(&mut model.params, &merged, lr, config.weight_decay)?;
    }
    Ok(EpochStats {
        epoch,
        mean_loss: if order.is_empty() { 0.0 } else { loss_sum / order.len() as f64 },
        n_playlists: order.len(),
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Mean NDCG over the fixed validation protocol.
pub fn validation_ndcg(model: &RtaModel, corpus: &Corpus, config: &TrainConfig) -> Result<f64> {
    let mut val = corpus.indices_with_role(Role::Validation);
    if config.val_playlists > 0 {
        val.truncate(config.val_playlists);
    }
    let assignments = validation_assignments(corpus, &val, config.rng_seed);
    if assignments.is_empty() {
        return Err(RtaError::Config("validation set is empty".into()));
    }
    let catalog = model.catalog("")?;
    let rec = RtaRecommender {
        name: model.config.label(),
        aggregator: &model.aggregator,
        params: &model.params,
        catalog: &catalog.vectors,
    };
    let (outcomes, _) = evaluate_assignments(&rec, corpus, &assignments, config.val_n_reco, NdcgVariant::Standard)?;
    Ok(mean_ndcg(&outcomes))
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Where `last.rtak`, `best.rtak` and `train_log.jsonl` go.
    pub out_dir: Option<PathBuf>,
    /// Return after this epoch as if interrupted.
    pub stop_after_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: RtaModel,
    pub last: RtaModel,
    pub state: TrainState,
    /// sha256 of `best.rtak` when written.
    pub best_hash: Option<String>,
}

pub const LAST_CHECKPOINT: &str = "last.rtak";
pub const BEST_CHECKPOINT: &str = "best.rtak";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Trains from scratch (after the init module has produced `model`).
pub fn fit(model: RtaModel, corpus: &Corpus, config: &TrainConfig, options: &FitOptions) -> Result<FitOutcome> {
    config.validate()?;
    let initial = validation_ndcg(&model, corpus, config)?;
    let state = TrainState::new(config, initial);
    run(model.clone(), model, state, None, corpus, config, options)
}

/// Continues the run saved in `dir`.
pub fn resume(dir: &Path, corpus: &Corpus, config: &TrainConfig, options: &FitOptions) -> Result<FitOutcome> {
    config.validate()?;
    let (last, _) = read_checkpoint(&dir.join(LAST_CHECKPOINT))?;
    let state = last.state.clone();
    if state.rng_seed != config.rng_seed {
        return Err(RtaError::Config(format!("checkpoint was trained with rng_seed {} but the config says {}", state.rng_seed, config.rng_seed)));
    }
    let best_path = dir.join(BEST_CHECKPOINT);
    let (best, best_hash) = if best_path.exists() {
        let (b, h) = read_checkpoint(&best_path)?;
        (b.into_model()?, Some(h))
    } else {
        (last.clone().into_model()?, None)
    };
    run(last.into_model()?, best, state, best_hash, corpus, config, options)
}

fn run(
    mut model: RtaModel,
    mut best: RtaModel,
    mut state: TrainState,
    mut best_hash: Option<String>,
    corpus: &Corpus,
    config: &TrainConfig,
    options: &FitOptions,
) -> Result<FitOutcome> {
    let train = corpus.indices_with_role(Role::Train);
    if let Some(dir) = &options.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| RtaError::io(dir, e))?;
    }
    while !state.finished && state.epoch < config.max_epochs {
        let epoch = state.epoch + 1;
        let lr = state.lr;
        let stats = train_epoch(&mut model, corpus, &train, config, epoch, lr)?;
        let ndcg = validation_ndcg(&model, corpus, config)?;
        state.history.push(EpochRecord {
            epoch,
            mean_loss: stats.mean_loss,
            val_ndcg: ndcg,
            lr,
        });
        let improved = state.record(ndcg, config.patience, config.max_epochs);
        if improved {
            best = model.clone();
        }
        tracing::info!(epoch, mean_loss = stats.mean_loss, val_ndcg = ndcg, lr, seconds = stats.seconds, "epoch done");

        if let Some(dir) = &options.out_dir {
            if improved {
                best_hash = Some(write_checkpoint(&dir.join(BEST_CHECKPOINT), &Checkpoint::of(&best, &state))?);
            }
            write_checkpoint(&dir.join(LAST_CHECKPOINT), &Checkpoint::of(&model, &state))?;
            let line = serde_json::json!({
                "epoch": epoch,
                "mean_loss": stats.mean_loss,
                "val_ndcg": ndcg,
                "lr": lr,
                "wall_seconds": stats.seconds,
            });
            let path = dir.join(TRAIN_LOG);
            let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| RtaError::io(&path, e))?;
            writeln!(f, "{line}").map_err(|e| RtaError::io(&path, e))?;
        }
        if options.stop_after_epoch == Some(epoch) {
            break;
        }
    }
    Ok(FitOutcome {
        best,
        last: model,
        state,
        best_hash,
    })
}

#[cfg(test)]
mod tests;
