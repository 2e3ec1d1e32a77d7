use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rta_core::aggregate::{Aggregator, AggregatorConfig};
use rta_core::numerics::{ParamStore, Rng, Tensor};
use rta_core::rank::{continue_playlist, RankRequest};
use rta_core::RtaError;

use crate::alloc_probe;
use crate::config::BenchSection;
use crate::CliError;

const GEN_ROWS: usize = 16_384;
const WARM_UP: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreadReport {
    pub threads: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    pub mean_embed_ms: f64,
    pub mean_score_ms: f64,
    pub budget_ms: f64,
    pub within_budget: bool,
    /// Largest single allocation made while answering the requests.
    pub largest_alloc_bytes: usize,
    pub allocs_per_request: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub n_songs: usize,
    pub dim: usize,
    pub requests: usize,
    pub seed_len: usize,
    pub n_reco: usize,
    /// Cores the OS reports; thread counts above this cannot speed anything up.
    pub available_parallelism: usize,
    /// Fastest of three plain reads of the whole catalog on one thread: the
    /// memory-bandwidth floor for any exact single-threaded scan.
    pub stream_floor_ms: f64,
    /// Bytes of one per-song f32 score buffer, the smallest "catalog-sized" allocation.
    pub catalog_sized_bytes: usize,
    pub no_catalog_sized_alloc: bool,
    /// Every thread count returned the same lists.
    pub lists_agree: bool,
    pub runs: Vec<ThreadReport>,
}

pub(crate) fn validate(b: &BenchSection) -> Result<(), CliError> {
    if b.n_songs < 2 || b.dim == 0 || b.requests == 0 || b.seed_len == 0 || b.n_reco == 0 {
        return Err(CliError::Usage("bench: n_songs ≥ 2 and dim, requests, seed_len, n_reco ≥ 1".into()));
    }
    if b.threads.is_empty() || b.threads.contains(&0) || b.threads.len() != b.p99_budget_ms.len() {
        return Err(CliError::Usage("bench: threads must be positive and match p99_budget_ms one to one".into()));
    }
    if b.n_reco + b.seed_len > b.n_songs {
        return Err(CliError::Usage("bench: n_reco + seed_len exceeds n_songs".into()));
    }
    Ok(())
}

/// Uniform rows in [-1, 1)/√D, generated in parallel from per-chunk streams.
fn synthetic_catalog(n: usize, dim: usize, seed: u64) -> Result<Tensor, RtaError> {
    let mut data = vec![0f32; n * dim];
    let scale = 1.0 / (dim as f32).sqrt();
    data.par_chunks_mut(GEN_ROWS * dim).enumerate().for_each(|(c, chunk)| {
        let mut rng = Rng::derive(seed, c as u64);
        for v in chunk {
            *v = rng.uniform_range(-scale, scale);
        }
    });
    Tensor::matrix(n, dim, data)
}

fn stream_floor_ms(catalog: &Tensor) -> f64 {
    (0..3)
        .map(|_| {
            let t = Instant::now();
            let mut lanes = [0f32; 16];
            for c in catalog.data().chunks_exact(16) {
                for j in 0..16 {
                    lanes[j] += c[j];
                }
            }
            std::hint::black_box(lanes);
            t.elapsed().as_secs_f64() * 1e3
        })
        .fold(f64::INFINITY, f64::min)
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Times `continue_playlist` on a synthetic catalog for each thread count.
/// Latency is the embed plus score time of each request.
pub fn bench_latency(b: &BenchSection) -> Result<BenchReport, CliError> {
    validate(b)?;
    tracing::info!(n_songs = b.n_songs, dim = b.dim, "generating catalog");
    let catalog = synthetic_catalog(b.n_songs, b.dim, b.rng_seed)?;
    let (_, kind) = b.variant.kinds();
    let agg_cfg = AggregatorConfig { kind, ..Default::default() };
    let mut params = ParamStore::new();
    let aggregator = Aggregator::init(&mut params, &agg_cfg, b.dim, &mut Rng::derive(b.rng_seed, u64::MAX))?;
    let requests: Vec<RankRequest> = (0..b.requests)
        .map(|i| {
            let mut rng = Rng::derive(b.rng_seed ^ 0x5eed, i as u64);
            RankRequest::new((0..b.seed_len).map(|_| rng.below(b.n_songs)).collect(), b.n_reco)
        })
        .collect();

    let floor = stream_floor_ms(&catalog);
    let catalog_sized_bytes = b.n_songs * std::mem::size_of::<f32>();
    let mut runs = Vec::new();
    let mut first_lists: Option<Vec<Vec<usize>>> = None;
    let mut lists_agree = true;
    for (&threads, &budget_ms) in b.threads.iter().zip(&b.p99_budget_ms) {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| RtaError::Internal(format!("thread pool: {e}")))?;
        let (mut millis, stages, lists, largest, count) = pool.install(|| -> Result<_, RtaError> {
            for r in requests.iter().take(WARM_UP) {
                continue_playlist(r, &aggregator, &params, &catalog)?;
            }
            let mut millis = Vec::with_capacity(requests.len());
            let mut lists = Vec::with_capacity(requests.len());
            let mut stages = (0.0, 0.0);
            alloc_probe::arm();
            for r in &requests {
                let (list, t) = continue_playlist(r, &aggregator, &params, &catalog)?;
                millis.push(t.total_ms());
                stages.0 += t.embed_ms;
                stages.1 += t.score_ms;
                lists.push(list.song_ids);
            }
            let (largest, count) = alloc_probe::disarm();
            Ok((millis, stages, lists, largest, count))
        })?;
        match &first_lists {
            None => first_lists = Some(lists),
            Some(f) => lists_agree &= *f == lists,
        }
        millis.sort_by(f64::total_cmp);
        let p99 = percentile(&millis, 0.99);
        let run = ThreadReport {
            threads,
            mean_ms: millis.iter().sum::<f64>() / millis.len() as f64,
            p50_ms: percentile(&millis, 0.50),
            p99_ms: p99,
            max_ms: *millis.last().expect("requests ≥ 1"),
            mean_embed_ms: stages.0 / millis.len() as f64,
            mean_score_ms: stages.1 / millis.len() as f64,
            budget_ms,
            within_budget: p99 <= budget_ms,
            largest_alloc_bytes: largest,
            allocs_per_request: count as f64 / requests.len() as f64,
        };
        tracing::info!(threads, p50 = run.p50_ms, p99 = run.p99_ms, budget_ms, "latency measured");
        runs.push(run);
    }
    Ok(BenchReport {
        model: b.variant.name().to_string(),
        n_songs: b.n_songs,
        dim: b.dim,
        requests: b.requests,
        seed_len: b.seed_len,
        n_reco: b.n_reco,
        available_parallelism: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        stream_floor_ms: floor,
        catalog_sized_bytes,
        no_catalog_sized_alloc: runs.iter().all(|r| r.largest_alloc_bytes < catalog_sized_bytes),
        lists_agree,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.99), 99.0);
        assert_eq!(percentile(&v, 0.50), 50.0);
        assert_eq!(percentile(&[3.0], 0.99), 3.0);
    }

    #[test]
    fn catalog_does_not_depend_on_thread_count() {
        let a = synthetic_catalog(40_000, 4, 7).unwrap();
        let b = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| synthetic_catalog(40_000, 4, 7).unwrap());
        assert_eq!(a, b);
    }
}
