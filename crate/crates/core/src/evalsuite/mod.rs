//! Masked-continuation evaluation: metrics per `n_seed` bucket with 95%
//! normal-approximation intervals, plus nearest-neighbour baselines.

mod knn;
mod metrics;
mod report;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use knn::{knn_recommend, sknn_recommend, vsknn_recommend, KnnIndex, KnnOutput, KnnScheme};
pub use metrics::{clicks, coverage_popularity, ndcg, precision_recall, r_precision, NdcgVariant};
pub use report::{write_report, BucketReport, EvalReport, MetricSummary, Stat, TimingStats};

use crate::aggregate::Aggregator;
use crate::corpus::{assign_n_seed, mask_playlist, Corpus, GroundTruth, Role, SongId};
use crate::error::{Result, RtaError};
use crate::numerics::{sample_negatives, ParamStore, Rng, Tensor};
use crate::rank::{continue_playlist, RankRequest, RankedList};

/// Anything that continues a seed with a ranked list excluding the seed.
pub trait Recommender: Sync {
    fn name(&self) -> String;
    fn recommend(&self, seed: &[SongId], n_reco: usize) -> Result<RankedList>;
}

/// An RTA model reduced to its serving parts.
pub struct RtaRecommender<'a> {
    pub name: String,
    pub aggregator: &'a Aggregator,
    pub params: &'a ParamStore,
    pub catalog: &'a Tensor,
}

impl Recommender for RtaRecommender<'_> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn recommend(&self, seed: &[SongId], n_reco: usize) -> Result<RankedList> {
        let req = RankRequest::new(seed.to_vec(), n_reco);
        Ok(continue_playlist(&req, self.aggregator, self.params, self.catalog)?.0)
    }
}

pub struct SknnRecommender<'a> {
    pub index: &'a KnnIndex,
    pub k_neighbors: usize,
    pub scheme: KnnScheme,
}

impl Recommender for SknnRecommender<'_> {
    fn name(&self) -> String {
        match self.scheme {
            KnnScheme::Sknn => "sknn".into(),
            KnnScheme::Vsknn => "vsknn".into(),
        }
    }

    fn recommend(&self, seed: &[SongId], n_reco: usize) -> Result<RankedList> {
        Ok(knn_recommend(self.index, seed, self.k_neighbors, n_reco, self.scheme)?.list)
    }
}

/// Uniformly random lists, seeded by the request so repeated calls agree.
pub struct RandomRecommender {
    pub n_songs: usize,
    pub seed: u64,
}

impl Recommender for RandomRecommender {
    fn name(&self) -> String {
        "random".into()
    }

    fn recommend(&self, seed: &[SongId], n_reco: usize) -> Result<RankedList> {
        let key = seed.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &s| (h ^ s as u64).wrapping_mul(0x100_0000_01b3));
        let ids = sample_negatives(self.n_songs, seed, n_reco, &mut Rng::derive(self.seed, key))?;
        Ok(RankedList {
            scores: vec![0.0; ids.len()],
            song_ids: ids,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_seed_values: Vec<usize>,
    /// Upper bound per bucket; shrunk so every test playlist is used at most once.
    pub playlists_per_bucket: usize,
    pub n_reco: usize,
    pub rng_seed: u64,
    pub ndcg: NdcgVariant,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_seed_values: (1..=10).collect(),
            playlists_per_bucket: 1000,
            n_reco: 500,
            rng_seed: 0,
            ndcg: NdcgVariant::Standard,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_seed_values.is_empty() || self.n_seed_values.contains(&0) {
            return Err(RtaError::Config("n_seed_values must be a nonempty list of positive counts".into()));
        }
        if self.n_reco == 0 || self.playlists_per_bucket == 0 {
            return Err(RtaError::Config("n_reco and playlists_per_bucket must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Metrics of one evaluated playlist.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaylistOutcome {
    pub playlist: usize,
    pub n_seed: usize,
    pub precision: f64,
    pub recall: f64,
    pub r_precision: f64,
    pub ndcg: f64,
    pub clicks: f64,
    pub ranked: Vec<SongId>,
    pub millis: f64,
}

/// Evaluates `(playlist index, n_seed)` pairs. Playlists whose masked part
/// is empty are skipped and counted in the second return value.
pub fn evaluate_assignments(
    recommender: &dyn Recommender,
    corpus: &Corpus,
    assignments: &[(usize, usize)],
    n_reco: usize,
    variant: NdcgVariant,
) -> Result<(Vec<PlaylistOutcome>, usize)> {
    let n = corpus.n_songs();
    let artist_of: Vec<usize> = corpus.catalog.songs.iter().map(|s| s.artist_id).collect();
    let results: Vec<Option<PlaylistOutcome>> = assignments
        .par_iter()
        .map(|&(idx, n_seed)| -> Result<Option<PlaylistOutcome>> {
            let (seed, truth) = mask_playlist(&corpus.playlists[idx].songs, n_seed)?;
            if truth.is_empty() {
                return Ok(None);
            }
            let mut distinct = seed.clone();
            distinct.sort_unstable();
            distinct.dedup();
            // small catalogs cannot fill n_reco once the seed is excluded
            let k = n_reco.min(n - distinct.len());
            let t0 = Instant::now();
            let list = recommender.recommend(&seed, k)?;
            let millis = t0.elapsed().as_secs_f64() * 1e3;
            let gt = GroundTruth::new(truth, &corpus.catalog)?;
            let (precision, recall) = precision_recall(&list.song_ids, &gt.songs, k);
            Ok(Some(PlaylistOutcome {
                playlist: idx,
                n_seed,
                precision,
                recall,
                r_precision: r_precision(&list.song_ids, &gt, &artist_of),
                ndcg: ndcg(&list.song_ids, &gt.songs, variant),
                clicks: clicks(&list.song_ids, &gt.songs, k),
                ranked: list.song_ids,
                millis,
            }))
        })
        .collect::<Result<_>>()?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    Ok((results.into_iter().flatten().collect(), skipped))
}

/// Test-protocol buckets: each bucket draws up to `playlists_per_bucket`
/// distinct playlists, scaled down so the buckets share the pool evenly.
pub fn test_assignments(corpus: &Corpus, role: Role, config: &EvalConfig) -> Vec<(usize, usize)> {
    let pool = corpus.indices_with_role(role);
    let per = config.playlists_per_bucket.min(pool.len() / config.n_seed_values.len()).max(1);
    let buckets: Vec<(usize, usize)> = config.n_seed_values.iter().map(|&s| (s, per)).collect();
    assign_n_seed(corpus, &pool, &buckets, config.rng_seed)
}

/// Validation protocol: each playlist gets an `n_seed` in `1..=10` (capped
/// below its length) from a fixed per-playlist stream.
pub fn validation_assignments(corpus: &Corpus, playlists: &[usize], seed: u64) -> Vec<(usize, usize)> {
    playlists
        .iter()
        .filter(|&&i| corpus.playlists[i].len() >= 2)
        .map(|&i| {
            let top = 10.min(corpus.playlists[i].len() - 1);
            (i, 1 + Rng::derive(seed, i as u64).below(top))
        })
        .collect()
}

pub fn mean_ndcg(outcomes: &[PlaylistOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().map(|o| o.ndcg).sum::<f64>() / outcomes.len() as f64
}

/// Runs the full protocol on playlists with `role` and summarizes it.
pub fn evaluate_model(recommender: &dyn Recommender, corpus: &Corpus, role: Role, config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    let assignments = test_assignments(corpus, role, config);
    if assignments.is_empty() {
        return Err(RtaError::Config(format!("no {role:?} playlists are long enough to evaluate")));
    }
    let (outcomes, skipped) = evaluate_assignments(recommender, corpus, &assignments, config.n_reco, config.ndcg)?;
    Ok(EvalReport::build(recommender.name(), config, corpus, &outcomes, skipped))
}

#[cfg(test)]
mod tests;
