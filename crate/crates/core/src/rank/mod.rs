//! Online scoring: playlist vector from seed rows, then exact top-k by inner
//! product over the whole catalog matrix.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::Aggregator;
use crate::corpus::SongId;
use crate::error::{Result, RtaError};
use crate::numerics::{dot, ParamStore, Tensor};

/// Rows per scoring shard.
pub const SHARD_ROWS: usize = 1 << 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRequest {
    pub seed_song_ids: Vec<SongId>,
    pub n_reco: usize,
    pub exclude_seed: bool,
}

impl RankRequest {
    pub fn new(seed_song_ids: Vec<SongId>, n_reco: usize) -> Self {
        RankRequest {
            seed_song_ids,
            n_reco,
            exclude_seed: true,
        }
    }
}

/// Songs by nonincreasing score, ties by ascending id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub song_ids: Vec<SongId>,
    pub scores: Vec<f32>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.song_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.song_ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub embed_ms: f64,
    pub score_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.embed_ms + self.score_ms
    }
}

/// Heap entry whose ordering puts the worse-ranked candidate on top.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f32,
    id: usize,
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

/// `h_p`: gathers the seed rows of the catalog matrix and applies `g`.
/// Seeds longer than the aggregator's `max_len` keep their most recent part.
pub fn playlist_embedding(aggregator: &Aggregator, params: &ParamStore, catalog: &Tensor, seeds: &[SongId]) -> Result<Vec<f32>> {
    if seeds.is_empty() {
        return Err(RtaError::Domain("empty seed".into()));
    }
    if let Some(&bad) = seeds.iter().find(|&&s| s >= catalog.rows()) {
        return Err(RtaError::UnknownSong(bad));
    }
    let seeds = &seeds[seeds.len().saturating_sub(aggregator.config.max_len)..];
    let d = catalog.cols();
    let mut rows = Vec::with_capacity(seeds.len() * d);
    for &s in seeds {
        rows.extend_from_slice(catalog.row(s));
    }
    aggregator.apply(params, &Tensor::matrix(seeds.len(), d, rows)?)
}

fn top_k_range(h: &[f32], catalog: &Tensor, start: usize, end: usize, k: usize, exclude: &[usize]) -> BinaryHeap<Candidate> {
    let mut heap = BinaryHeap::with_capacity(k + 1);
    // score of the current worst kept candidate; a strictly lower score can never enter
    let mut worst = f32::NEG_INFINITY;
    let d = catalog.cols();
    let rows = &catalog.data()[start * d..end * d];
    for (id, row) in (start..end).zip(rows.chunks_exact(d)) {
        let score = dot(h, row);
        if score < worst {
            continue;
        }
        let c = Candidate { score, id };
        if heap.len() == k {
            if c >= *heap.peek().expect("k ≥ 1") {
                continue;
            }
            if exclude.binary_search(&id).is_ok() {
                continue;
            }
            heap.pop();
            heap.push(c);
            worst = heap.peek().expect("k ≥ 1").score;
        } else if exclude.binary_search(&id).is_err() {
            heap.push(c);
            if heap.len() == k {
                worst = heap.peek().expect("k ≥ 1").score;
            }
        }
    }
    heap
}

/// Exact top-`n_reco` of `⟨h, row⟩` over all rows not in `exclude`. Shards
/// are scored in parallel and merged in shard order.
pub fn score_and_top_k(h: &[f32], catalog: &Tensor, n_reco: usize, exclude: &[SongId]) -> Result<RankedList> {
    let n = catalog.rows();
    if h.len() != catalog.cols() {
        return Err(RtaError::Shape {
            op: "score_and_top_k",
            left: vec![1, h.len()],
            right: catalog.shape().to_vec(),
        });
    }
    let mut excl: Vec<usize> = exclude.iter().copied().filter(|&s| s < n).collect();
    excl.sort_unstable();
    excl.dedup();
    if n_reco > n - excl.len() {
        return Err(RtaError::Domain(format!(
            "n_reco = {n_reco} exceeds the {} songs left after {} exclusions",
            n - excl.len(),
            excl.len()
        )));
    }
    if n_reco == 0 {
        return Ok(RankedList::default());
    }
    let shards: Vec<(usize, usize)> = (0..n).step_by(SHARD_ROWS).map(|s| (s, (s + SHARD_ROWS).min(n))).collect();
    let partial: Vec<BinaryHeap<Candidate>> = if shards.len() > 1 {
        shards.par_iter().map(|&(s, e)| top_k_range(h, catalog, s, e, n_reco, &excl)).collect()
    } else {
        shards.iter().map(|&(s, e)| top_k_range(h, catalog, s, e, n_reco, &excl)).collect()
    };
    let mut all: Vec<Candidate> = Vec::with_capacity(partial.len() * n_reco);
    for heap in partial {
        all.extend(heap.into_vec());
    }
    all.sort_unstable();
    all.truncate(n_reco);
    Ok(RankedList {
        song_ids: all.iter().map(|c| c.id).collect(),
        scores: all.iter().map(|c| c.score).collect(),
    })
}

/// `playlist_embedding` then `score_and_top_k`, timing each stage.
pub fn continue_playlist(
    request: &RankRequest,
    aggregator: &Aggregator,
    params: &ParamStore,
    catalog: &Tensor,
) -> Result<(RankedList, StageTimings)> {
    let t0 = Instant::now();
    let h = playlist_embedding(aggregator, params, catalog, &request.seed_song_ids)?;
    let t1 = Instant::now();
    let exclude: &[SongId] = if request.exclude_seed { &request.seed_song_ids } else { &[] };
    let list = score_and_top_k(&h, catalog, request.n_reco, exclude)?;
    let t2 = Instant::now();
    Ok((
        list,
        StageTimings {
            embed_ms: (t1 - t0).as_secs_f64() * 1e3,
            score_ms: (t2 - t1).as_secs_f64() * 1e3,
        },
    ))
}
