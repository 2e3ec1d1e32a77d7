//! Clustered synthetic playlists with sequential structure.
//!
//! Songs belong to latent clusters, and each cluster has a fixed successor.
//! A playlist starts in a random cluster and moves to the successor every
//! `segment_len` songs, so recent songs predict the continuation better than
//! the playlist as a whole.

use serde::{Deserialize, Serialize};

use super::{Corpus, Playlist, RawSong};
use crate::error::{Result, RtaError};
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_songs: usize,
    pub n_clusters: usize,
    pub n_playlists: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub segment_len: usize,
    pub artists_per_cluster: usize,
    /// Probability that a slot holds a uniformly random song.
    pub noise: f64,
    pub rng_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_songs: 500,
            n_clusters: 20,
            n_playlists: 2000,
            min_len: 12,
            max_len: 30,
            segment_len: 4,
            artists_per_cluster: 5,
            noise: 0.05,
            rng_seed: 0,
        }
    }
}

/// A generated corpus (all playlists in the training role) and each song's cluster.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub cluster_of: Vec<usize>,
    pub successor: Vec<usize>,
}

pub fn synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    let SyntheticSpec {
        n_songs,
        n_clusters,
        n_playlists,
        min_len,
        max_len,
        segment_len,
        artists_per_cluster,
        noise,
        rng_seed,
    } = *spec;
    if n_clusters < 2 || n_songs < 2 * n_clusters || min_len < 2 || min_len > max_len || segment_len == 0 || artists_per_cluster == 0 {
        return Err(RtaError::Config(format!("inconsistent synthetic corpus spec: {spec:?}")));
    }
    let mut rng = Rng::seed_from(rng_seed);
    let cluster_of: Vec<usize> = (0..n_songs).map(|i| i * n_clusters / n_songs).collect();
    let mut members = vec![Vec::new(); n_clusters];
    for (s, &c) in cluster_of.iter().enumerate() {
        members[c].push(s);
    }
    let mut order: Vec<usize> = (0..n_clusters).collect();
    rng.shuffle(&mut order);
    let mut successor = vec![0; n_clusters];
    for j in 0..n_clusters {
        successor[order[j]] = order[(j + 1) % n_clusters];
    }

    let raw: Vec<RawSong> = (0..n_songs)
        .map(|s| {
            let artist = cluster_of[s] * artists_per_cluster + s % artists_per_cluster;
            RawSong {
                uri: format!("synthetic:track:{s}"),
                artist_id: artist,
                album_id: 2 * artist + (s / artists_per_cluster) % 2,
                duration_s: 90.0 + 240.0 * rng.uniform(),
            }
        })
        .collect();

    let playlists = (0..n_playlists)
        .map(|pid| {
            let len = min_len + rng.below(max_len - min_len + 1);
            let mut c = rng.below(n_clusters);
            let mut songs = Vec::with_capacity(len);
            for t in 0..len {
                if t > 0 && t % segment_len == 0 {
                    c = successor[c];
                }
                let pick = |rng: &mut Rng| {
                    if rng.uniform() < noise as f32 {
                        rng.below(n_songs)
                    } else {
                        members[c][rng.below(members[c].len())]
                    }
                };
                let mut s = pick(&mut rng);
                for _ in 0..4 {
                    if !songs.contains(&s) {
                        break;
                    }
                    s = pick(&mut rng);
                }
                songs.push(s);
            }
            Playlist {
                playlist_id: pid as u64,
                songs,
            }
        })
        .collect();
    let corpus = Corpus::from_parts(raw, n_clusters * artists_per_cluster, 2 * n_clusters * artists_per_cluster, playlists, max_len, None)?;
    Ok(SyntheticCorpus {
        corpus,
        cluster_of,
        successor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_well_formed() {
        let spec = SyntheticSpec {
            n_playlists: 100,
            ..Default::default()
        };
        let a = synthetic_corpus(&spec).unwrap();
        let b = synthetic_corpus(&spec).unwrap();
        assert_eq!(a.corpus.playlists, b.corpus.playlists);
        assert_eq!(a.corpus.n_songs(), 500);
        for p in &a.corpus.playlists {
            assert!((12..=30).contains(&p.len()));
        }
        // successor is a single cycle with no fixed point
        let mut c = 0;
        for step in 1..=20 {
            c = a.successor[c];
            assert_eq!(c == 0, step == 20);
        }
    }

    #[test]
    fn segments_follow_the_successor() {
        let spec = SyntheticSpec {
            n_playlists: 200,
            noise: 0.0,
            ..Default::default()
        };
        let s = synthetic_corpus(&spec).unwrap();
        for p in &s.corpus.playlists {
            for t in 1..p.len() {
                let (a, b) = (s.cluster_of[p.songs[t - 1]], s.cluster_of[p.songs[t]]);
                if t % spec.segment_len == 0 {
                    assert_eq!(b, s.successor[a]);
                } else {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_spec() {
        let spec = SyntheticSpec {
            min_len: 40,
            ..Default::default()
        };
        assert!(matches!(synthetic_corpus(&spec), Err(RtaError::Config(_))));
    }
}
