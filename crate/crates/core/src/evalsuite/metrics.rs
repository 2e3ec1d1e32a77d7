//! Per-playlist ranking metrics, as fractions in `[0, 1]` (clicks excepted).

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{GroundTruth, SongId};

/// Discount used by NDCG.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NdcgVariant {
    /// `1 / log2(i + 1)` at 1-based rank `i`.
    #[default]
    Standard,
    /// Rank 1 undiscounted, then `1 / log2(i)`, as in the 2018 challenge.
    Challenge,
}

fn truth_set(truth: &[SongId]) -> HashSet<SongId> {
    truth.iter().copied().collect()
}

/// `(|hits| / n_reco, |hits| / |truth|)`.
pub fn precision_recall(ranked: &[SongId], truth: &[SongId], n_reco: usize) -> (f64, f64) {
    let t = truth_set(truth);
    if t.is_empty() || n_reco == 0 {
        return (0.0, 0.0);
    }
    let hits = ranked.iter().take(n_reco).filter(|s| t.contains(s)).count() as f64;
    (hits / n_reco as f64, hits / t.len() as f64)
}

/// Song matches plus quarter credit for artist-only matches among the first
/// `G` entries. Each ground-truth artist is credited at most as often as it
/// occurs in the ground truth.
pub fn r_precision(ranked: &[SongId], truth: &GroundTruth, artist_of: &[usize]) -> f64 {
    let g = truth.songs.len();
    if g == 0 {
        return 0.0;
    }
    let songs = truth_set(&truth.songs);
    let mut budget: HashMap<usize, usize> = HashMap::new();
    for &a in &truth.artists {
        *budget.entry(a).or_default() += 1;
    }
    let (mut exact, mut artist) = (0usize, 0usize);
    for s in ranked.iter().take(g) {
        if songs.contains(s) {
            exact += 1;
        } else if let Some(left) = artist_of.get(*s).and_then(|a| budget.get_mut(a)) {
            if *left > 0 {
                *left -= 1;
                artist += 1;
            }
        }
    }
    (exact as f64 + 0.25 * artist as f64) / g as f64
}

fn discount(rank: usize, variant: NdcgVariant) -> f64 {
    match variant {
        NdcgVariant::Standard => 1.0 / ((rank + 1) as f64).log2(),
        NdcgVariant::Challenge if rank == 1 => 1.0,
        NdcgVariant::Challenge => 1.0 / (rank as f64).log2(),
    }
}

/// Binary-relevance NDCG over the whole list.
pub fn ndcg(ranked: &[SongId], truth: &[SongId], variant: NdcgVariant) -> f64 {
    let t = truth_set(truth);
    if t.is_empty() {
        return 0.0;
    }
    let dcg: f64 = ranked
        .iter()
        .enumerate()
        .filter(|(_, s)| t.contains(s))
        .map(|(i, _)| discount(i + 1, variant))
        .sum();
    let idcg: f64 = (1..=t.len().min(ranked.len().max(1))).map(|i| discount(i, variant)).sum();
    dcg / idcg
}

/// Batches of ten shown before the first hit; `n_reco / 10 + 1` if none.
pub fn clicks(ranked: &[SongId], truth: &[SongId], n_reco: usize) -> f64 {
    let t = truth_set(truth);
    match ranked.iter().take(n_reco).position(|s| t.contains(s)) {
        Some(i) => (i / 10) as f64,
        None => (n_reco / 10 + 1) as f64,
    }
}

/// `(coverage, popularity)` in percent: share of the catalog recommended at
/// least once, and the mean min-max normalized popularity per recommended slot.
pub fn coverage_popularity<'a>(lists: impl IntoIterator<Item = &'a [SongId]>, n_songs: usize, popularity: &[u32]) -> (f64, f64) {
    let lo = popularity.iter().copied().min().unwrap_or(0) as f64;
    let hi = popularity.iter().copied().max().unwrap_or(0) as f64;
    let mut seen = vec![false; n_songs];
    let (mut slots, mut pop_sum) = (0usize, 0.0f64);
    for list in lists {
        for &s in list {
            if s < n_songs {
                seen[s] = true;
            }
            slots += 1;
            if hi > lo {
                pop_sum += (popularity[s] as f64 - lo) / (hi - lo);
            }
        }
    }
    let covered = seen.iter().filter(|&&b| b).count();
    let coverage = if n_songs == 0 { 0.0 } else { 100.0 * covered as f64 / n_songs as f64 };
    let popularity = if slots == 0 { 0.0 } else { 100.0 * pop_sum / slots as f64 };
    (coverage, popularity)
}

/// Normalized popularity of one list, in percent.
pub(crate) fn list_popularity(list: &[SongId], popularity: &[u32]) -> f64 {
    let lo = popularity.iter().copied().min().unwrap_or(0) as f64;
    let hi = popularity.iter().copied().max().unwrap_or(0) as f64;
    if hi <= lo || list.is_empty() {
        return 0.0;
    }
    100.0 * list.iter().map(|&s| (popularity[s] as f64 - lo) / (hi - lo)).sum::<f64>() / list.len() as f64
}
