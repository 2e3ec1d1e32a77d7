use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{Catalog, Corpus, SongId};
use crate::error::{Result, RtaError};
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub rng_seed: u64,
    pub n_val: usize,
    pub n_test: usize,
    /// Minimum length of playlists eligible for validation and test.
    pub min_len: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            rng_seed: 0,
            n_val: 10_000,
            n_test: 10_000,
            min_len: 20,
        }
    }
}

/// Playlist indices (positions in `Corpus::playlists`) per role, each sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Samples validation and test playlists uniformly among those of length
/// `≥ min_len`; everything else is training data.
pub fn split_dataset(corpus: &Corpus, spec: &SplitSpec) -> Result<Split> {
    let mut eligible: Vec<usize> = (0..corpus.playlists.len())
        .filter(|&i| corpus.playlists[i].len() >= spec.min_len)
        .collect();
    let needed = spec.n_val + spec.n_test;
    if eligible.len() < needed {
        return Err(RtaError::Config(format!(
            "split needs {needed} playlists of length ≥ {} ({} validation + {} test) but only {} are eligible",
            spec.min_len,
            spec.n_val,
            spec.n_test,
            eligible.len()
        )));
    }
    let mut rng = Rng::seed_from(spec.rng_seed);
    // partial Fisher-Yates: the first `needed` slots are a uniform sample
    for i in 0..needed {
        let j = i + rng.below(eligible.len() - i);
        eligible.swap(i, j);
    }
    let mut validation = eligible[..spec.n_val].to_vec();
    let mut test = eligible[spec.n_val..needed].to_vec();
    validation.sort_unstable();
    test.sort_unstable();
    let held: HashSet<usize> = validation.iter().chain(&test).copied().collect();
    let train = (0..corpus.playlists.len()).filter(|i| !held.contains(i)).collect();
    Ok(Split {
        seed: spec.rng_seed,
        train,
        validation,
        test,
    })
}

/// Splits a playlist into its first `n_seed` songs and the masked remainder.
///
/// The remainder is returned as a set in first-occurrence order; songs that
/// already occur in the seed are not continuation targets and are dropped.
pub fn mask_playlist(songs: &[SongId], n_seed: usize) -> Result<(Vec<SongId>, Vec<SongId>)> {
    if n_seed == 0 || n_seed >= songs.len() {
        return Err(RtaError::Domain(format!(
            "n_seed must be in [1, {}) for a playlist of length {}, got {n_seed}",
            songs.len(),
            songs.len()
        )));
    }
    let seed = songs[..n_seed].to_vec();
    let mut seen: HashSet<SongId> = seed.iter().copied().collect();
    let truth = songs[n_seed..].iter().copied().filter(|s| seen.insert(*s)).collect();
    Ok((seed, truth))
}

/// Masked songs of one evaluation playlist with their artists.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub songs: Vec<SongId>,
    /// Artist of each ground-truth song (a multiset, aligned with `songs`).
    pub artists: Vec<usize>,
}

impl GroundTruth {
    pub fn new(songs: Vec<SongId>, catalog: &Catalog) -> Result<Self> {
        let artists = songs
            .iter()
            .map(|&s| catalog.song(s).map(|x| x.artist_id))
            .collect::<Result<_>>()?;
        Ok(GroundTruth { songs, artists })
    }
}

/// Assigns each of `playlists` (in a seeded random order) to an `n_seed`
/// bucket, filling `(n_seed, count)` buckets in order. Playlists too short
/// for their bucket are skipped. Returns `(playlist index, n_seed)` pairs.
pub fn assign_n_seed(
    corpus: &Corpus,
    playlists: &[usize],
    buckets: &[(usize, usize)],
    seed: u64,
) -> Vec<(usize, usize)> {
    let mut order = playlists.to_vec();
    Rng::seed_from(seed).shuffle(&mut order);
    let mut out = Vec::new();
    let mut cursor = order.into_iter();
    for &(n_seed, count) in buckets {
        let mut taken = 0;
        while taken < count {
            let Some(idx) = cursor.next() else { break };
            if corpus.playlists[idx].len() > n_seed {
                out.push((idx, n_seed));
                taken += 1;
            }
        }
    }
    out
}
