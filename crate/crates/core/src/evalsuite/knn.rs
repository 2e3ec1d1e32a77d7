//! Session-based nearest-neighbour baselines over training playlists.

use std::collections::HashMap;

use crate::corpus::{Corpus, Role, SongId};
use crate::error::{Result, RtaError};
use crate::rank::RankedList;

/// Inverted index from songs to the training playlists containing them.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    /// Distinct songs of each training playlist.
    playlists: Vec<Vec<SongId>>,
    song_to_playlists: Vec<Vec<u32>>,
    popularity: Vec<u32>,
    /// All songs by training popularity, most popular first, ties by id.
    by_popularity: Vec<SongId>,
}

impl KnnIndex {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let playlists = corpus.playlists_with_role(Role::Train).into_iter().map(|p| p.songs.clone()).collect();
        Self::new(playlists, corpus.catalog.popularity())
    }

    pub fn new(playlists: Vec<Vec<SongId>>, popularity: Vec<u32>) -> Self {
        let n = popularity.len();
        let playlists: Vec<Vec<SongId>> = playlists
            .into_iter()
            .map(|mut p| {
                p.sort_unstable();
                p.dedup();
                p
            })
            .collect();
        let mut song_to_playlists = vec![Vec::new(); n];
        for (q, p) in playlists.iter().enumerate() {
            for &s in p {
                song_to_playlists[s].push(q as u32);
            }
        }
        let mut by_popularity: Vec<SongId> = (0..n).collect();
        by_popularity.sort_by(|&a, &b| popularity[b].cmp(&popularity[a]).then(a.cmp(&b)));
        KnnIndex {
            playlists,
            song_to_playlists,
            popularity,
            by_popularity,
        }
    }

    pub fn n_songs(&self) -> usize {
        self.popularity.len()
    }

    pub fn n_playlists(&self) -> usize {
        self.playlists.len()
    }

    pub fn playlist(&self, q: usize) -> &[SongId] {
        &self.playlists[q]
    }

    pub fn popularity(&self) -> &[u32] {
        &self.popularity
    }
}

/// Neighbour scoring scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnnScheme {
    /// Binary cosine, candidate score = sum of neighbour similarities.
    Sknn,
    /// Seed positions weighted `i / |seed|` toward the most recent song;
    /// candidate scores divided by `ln(1 + popularity)`.
    Vsknn,
}

/// A ranked list plus whether it came entirely from the popularity fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnOutput {
    pub list: RankedList,
    pub fallback: bool,
}

/// Per-seed-song weights: 1 for SKNN, the last position's `i / l` for VSKNN.
fn seed_weights(seed: &[SongId], scheme: KnnScheme) -> HashMap<SongId, f64> {
    let l = seed.len() as f64;
    let mut w = HashMap::new();
    for (i, &s) in seed.iter().enumerate() {
        let v = match scheme {
            KnnScheme::Sknn => 1.0,
            KnnScheme::Vsknn => (i + 1) as f64 / l,
        };
        w.insert(s, v);
    }
    w
}

/// Similarity of the seed to every training playlist that shares a song.
pub(crate) fn similarities(index: &KnnIndex, seed: &[SongId], scheme: KnnScheme) -> Vec<(usize, f64)> {
    let weights = seed_weights(seed, scheme);
    let n_seed = weights.len() as f64;
    let mut overlap: HashMap<u32, f64> = HashMap::new();
    let mut songs: Vec<_> = weights.iter().collect();
    songs.sort_unstable_by_key(|(s, _)| **s);
    for (&s, &w) in songs {
        for &q in &index.song_to_playlists[s] {
            *overlap.entry(q).or_default() += w;
        }
    }
    let mut sims: Vec<(usize, f64)> = overlap
        .into_iter()
        .map(|(q, o)| (q as usize, o / (n_seed * index.playlists[q as usize].len() as f64).sqrt()))
        .collect();
    sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sims
}

pub fn knn_recommend(index: &KnnIndex, seed: &[SongId], k_neighbors: usize, n_reco: usize, scheme: KnnScheme) -> Result<KnnOutput> {
    if k_neighbors == 0 {
        return Err(RtaError::Config("k_neighbors must be ≥ 1".into()));
    }
    if let Some(&bad) = seed.iter().find(|&&s| s >= index.n_songs()) {
        return Err(RtaError::UnknownSong(bad));
    }
    let mut sims = similarities(index, seed, scheme);
    sims.truncate(k_neighbors);
    let mut excluded: Vec<SongId> = seed.to_vec();
    excluded.sort_unstable();
    excluded.dedup();
    if n_reco > index.n_songs() - excluded.len() {
        return Err(RtaError::Domain(format!("n_reco = {n_reco} exceeds the {} recommendable songs", index.n_songs() - excluded.len())));
    }

    let mut scores: HashMap<SongId, f64> = HashMap::new();
    for &(q, sim) in &sims {
        for &s in &index.playlists[q] {
            if excluded.binary_search(&s).is_err() {
                *scores.entry(s).or_default() += sim;
            }
        }
    }
    let mut ranked: Vec<(SongId, f64)> = scores
        .into_iter()
        .map(|(s, v)| match scheme {
            KnnScheme::Sknn => (s, v),
            KnnScheme::Vsknn => (s, v / (1.0 + index.popularity[s] as f64).ln().max(f64::MIN_POSITIVE)),
        })
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(n_reco);

    let fallback = ranked.is_empty();
    let mut song_ids: Vec<SongId> = ranked.iter().map(|r| r.0).collect();
    let mut scores: Vec<f32> = ranked.iter().map(|r| r.1 as f32).collect();
    if song_ids.len() < n_reco {
        // pad with the most popular songs not yet listed
        let mut listed = song_ids.clone();
        listed.sort_unstable();
        for &s in &index.by_popularity {
            if song_ids.len() == n_reco {
                break;
            }
            if excluded.binary_search(&s).is_err() && listed.binary_search(&s).is_err() {
                song_ids.push(s);
                scores.push(0.0);
            }
        }
    }
    Ok(KnnOutput {
        list: RankedList { song_ids, scores },
        fallback,
    })
}

pub fn sknn_recommend(index: &KnnIndex, seed: &[SongId], k_neighbors: usize, n_reco: usize) -> Result<KnnOutput> {
    knn_recommend(index, seed, k_neighbors, n_reco, KnnScheme::Sknn)
}

pub fn vsknn_recommend(index: &KnnIndex, seed: &[SongId], k_neighbors: usize, n_reco: usize) -> Result<KnnOutput> {
    knn_recommend(index, seed, k_neighbors, n_reco, KnnScheme::Vsknn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn index(playlists: &[&[usize]], n: usize) -> KnnIndex {
        let mut pop = vec![0u32; n];
        for p in playlists {
            for &s in *p {
                pop[s] += 1;
            }
        }
        KnnIndex::new(playlists.iter().map(|p| p.to_vec()).collect(), pop)
    }

    #[test]
    fn single_overlapping_neighbour() {
        let idx = index(&[&[0, 1], &[2, 3]], 4);
        let out = sknn_recommend(&idx, &[0], 1, 1).unwrap();
        assert_eq!(out.list.song_ids, vec![1]);
        assert!(!out.fallback);
    }

    #[test]
    fn identical_playlist_dominates() {
        let idx = index(&[&[0, 1, 2, 3], &[0, 9, 8], &[5, 6, 7]], 10);
        let out = sknn_recommend(&idx, &[0, 1, 2], 5, 3).unwrap();
        assert_eq!(out.list.song_ids[0], 3);
    }

    #[test]
    fn no_neighbour_falls_back_to_popularity() {
        let idx = index(&[&[0, 1], &[0, 2], &[0, 3]], 5);
        let out = sknn_recommend(&idx, &[4], 3, 3).unwrap();
        assert!(out.fallback);
        assert_eq!(out.list.song_ids, vec![0, 1, 2]);
    }

    #[test]
    fn vsknn_damps_popular_candidates() {
        // both 1 and 2 co-occur once with the seed; 2 is far more popular
        let mut lists: Vec<Vec<usize>> = vec![vec![0, 1], vec![0, 2]];
        for _ in 0..99 {
            lists.push(vec![2, 3]);
        }
        let mut pop = vec![0u32; 4];
        for l in &lists {
            for &s in l {
                pop[s] += 1;
            }
        }
        let idx = KnnIndex::new(lists, pop);
        assert_eq!(idx.popularity()[1], 1);
        assert_eq!(idx.popularity()[2], 100);
        let out = vsknn_recommend(&idx, &[0], 10, 2).unwrap();
        assert_eq!(out.list.song_ids, vec![1, 2]);
        let s = sknn_recommend(&idx, &[0], 10, 2).unwrap();
        assert_eq!(s.list.scores[0], s.list.scores[1]);
    }

    #[test]
    fn vsknn_is_order_sensitive() {
        let idx = index(&[&[0, 5], &[1, 6], &[0, 1, 7]], 8);
        let a = similarities(&idx, &[0, 1], KnnScheme::Vsknn);
        let b = similarities(&idx, &[1, 0], KnnScheme::Vsknn);
        assert_ne!(a, b);
        assert_eq!(similarities(&idx, &[0, 1], KnnScheme::Sknn), similarities(&idx, &[1, 0], KnnScheme::Sknn));
    }

    #[test]
    fn single_seed_vsknn_matches_sknn_up_to_damp() {
        let idx = index(&[&[0, 1, 2], &[0, 3], &[4, 5]], 6);
        let a = sknn_recommend(&idx, &[0], 5, 3).unwrap().list;
        let b = vsknn_recommend(&idx, &[0], 5, 3).unwrap().list;
        for (s, x) in a.song_ids.iter().zip(&a.scores) {
            let j = b.song_ids.iter().position(|t| t == s).unwrap();
            let damp = (1.0 + idx.popularity()[*s] as f64).ln();
            assert!(((*x as f64) / damp - b.scores[j] as f64).abs() < 1e-6);
        }
    }

    /// Exhaustive SKNN: similarity against every training playlist.
    fn brute(lists: &[Vec<usize>], n: usize, seed: &[usize], k: usize, n_reco: usize) -> Vec<usize> {
        let s: std::collections::BTreeSet<usize> = seed.iter().copied().collect();
        let mut sims: Vec<(usize, f64)> = lists
            .iter()
            .enumerate()
            .map(|(q, p)| {
                let p: std::collections::BTreeSet<usize> = p.iter().copied().collect();
                let inter = p.intersection(&s).count() as f64;
                (q, inter / ((s.len() * p.len()) as f64).sqrt())
            })
            .filter(|x| x.1 > 0.0)
            .collect();
        sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        sims.truncate(k);
        let mut score = vec![0.0f64; n];
        let mut hit = vec![false; n];
        for &(q, sim) in &sims {
            let p: std::collections::BTreeSet<usize> = lists[q].iter().copied().collect();
            for &x in &p {
                if !s.contains(&x) {
                    score[x] += sim;
                    hit[x] = true;
                }
            }
        }
        let mut cands: Vec<usize> = (0..n).filter(|&x| hit[x]).collect();
        cands.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
        cands.truncate(n_reco);
        cands
    }

    #[test]
    fn sknn_matches_exhaustive_similarity() {
        let mut rng = Rng::seed_from(17);
        let n = 60;
        let lists: Vec<Vec<usize>> = (0..50).map(|_| (0..2 + rng.below(8)).map(|_| rng.below(n)).collect()).collect();
        let mut pop = vec![0u32; n];
        for l in &lists {
            for &s in l {
                pop[s] += 1;
            }
        }
        let idx = KnnIndex::new(lists.clone(), pop);
        for trial in 0..40 {
            let seed: Vec<usize> = (0..1 + trial % 5).map(|_| rng.below(n)).collect();
            let k = 1 + trial % 7;
            let got = sknn_recommend(&idx, &seed, k, 10).unwrap();
            let expect = brute(&lists, n, &seed, k, 10);
            assert_eq!(&got.list.song_ids[..expect.len()], &expect[..], "trial {trial}");
        }
    }
}
