//! Song catalog, playlists, metadata buckets and train/validation/test roles.

mod io;
mod mpd;
mod split;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RtaError};

pub use io::{read_corpus, write_corpus, CorpusManifest, CORPUS_FORMAT_VERSION};
pub use mpd::{load_mpd_slices, IngestDiagnostics};
pub use split::{assign_n_seed, mask_playlist, split_dataset, GroundTruth, Split, SplitSpec};
pub use synthetic::{synthetic_corpus, SyntheticCorpus, SyntheticSpec};

pub type SongId = usize;

pub const DUR_BUCKETS: usize = 40;
pub const POP_BUCKETS: usize = 100;
pub const DEFAULT_MAX_LEN: usize = 250;

/// Duration bucket in `[1, 40]`: 30-second linear buckets, everything past
/// 20 minutes in the last one, zero-length songs in the first.
pub fn bucket_duration(duration_s: f64) -> Result<u8> {
    if !(duration_s >= 0.0) || !duration_s.is_finite() {
        return Err(RtaError::Domain(format!("duration must be finite and ≥ 0, got {duration_s}")));
    }
    let b = (duration_s / 30.0).ceil().min(DUR_BUCKETS as f64).max(1.0);
    Ok(b as u8)
}

/// Popularity bucket in `[1, 100]`: `min(100, 1 + 100·⌊ln(pop)/ln(α)⌋)`,
/// with unseen songs (popularity 0) in bucket 1.
pub fn bucket_popularity(popularity: u64, alpha: f64) -> Result<u8> {
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(RtaError::Domain(format!("popularity normalizer must be > 1, got {alpha}")));
    }
    if popularity == 0 {
        return Ok(1);
    }
    let ratio = (popularity as f64).ln() / alpha.ln();
    let b = (1.0 + 100.0 * ratio.floor()).min(POP_BUCKETS as f64);
    Ok(b as u8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Song {
    pub song_id: SongId,
    pub artist_id: usize,
    pub album_id: usize,
    pub duration_s: f32,
    /// Occurrences across training playlists.
    pub popularity: u32,
    pub dur_bucket: u8,
    pub pop_bucket: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Playlist {
    pub playlist_id: u64,
    pub songs: Vec<SongId>,
}

impl Playlist {
    pub fn len(&self) -> usize {
        self.songs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.songs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Train,
    Validation,
    Test,
}

impl Role {
    pub(crate) fn code(self) -> u8 {
        match self {
            Role::Train => 0,
            Role::Validation => 1,
            Role::Test => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Role> {
        match c {
            0 => Some(Role::Train),
            1 => Some(Role::Validation),
            2 => Some(Role::Test),
            _ => None,
        }
    }
}

/// Song input before popularity and buckets are derived.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSong {
    pub uri: String,
    pub artist_id: usize,
    pub album_id: usize,
    pub duration_s: f32,
}

/// The four metadata families a song is described by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetaField {
    Artist,
    Album,
    Duration,
    Popularity,
}

impl MetaField {
    pub const ALL: [MetaField; 4] = [MetaField::Artist, MetaField::Album, MetaField::Duration, MetaField::Popularity];

    pub fn name(self) -> &'static str {
        match self {
            MetaField::Artist => "artist",
            MetaField::Album => "album",
            MetaField::Duration => "duration",
            MetaField::Popularity => "popularity",
        }
    }
}

/// The song side of a corpus: everything a song representation may read.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub songs: Vec<Song>,
    pub uris: Vec<String>,
    pub n_artists: usize,
    pub n_albums: usize,
    pub alpha_pop: f64,
}

impl Catalog {
    pub fn len(&self) -> usize {
        self.songs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.songs.is_empty()
    }

    pub fn song(&self, id: SongId) -> Result<&Song> {
        self.songs.get(id).ok_or(RtaError::UnknownSong(id))
    }

    /// Number of rows in the metadata table of `field`.
    pub fn table_size(&self, field: MetaField) -> usize {
        match field {
            MetaField::Artist => self.n_artists,
            MetaField::Album => self.n_albums,
            MetaField::Duration => DUR_BUCKETS,
            MetaField::Popularity => POP_BUCKETS,
        }
    }

    /// Zero-based table row of `field` for a song.
    pub fn meta_index(song: &Song, field: MetaField) -> usize {
        match field {
            MetaField::Artist => song.artist_id,
            MetaField::Album => song.album_id,
            MetaField::Duration => song.dur_bucket as usize - 1,
            MetaField::Popularity => song.pop_bucket as usize - 1,
        }
    }

    /// Metadata values carried by at least one song seen in training.
    pub fn observed_values(&self, field: MetaField) -> Vec<bool> {
        let mut seen = vec![false; self.table_size(field)];
        for s in self.songs.iter().filter(|s| s.popularity > 0) {
            seen[Self::meta_index(s, field)] = true;
        }
        seen
    }

    pub fn popularity(&self) -> Vec<u32> {
        self.songs.iter().map(|s| s.popularity).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub catalog: Catalog,
    pub playlists: Vec<Playlist>,
    pub roles: Vec<Role>,
    /// Maximum playlist length `L`.
    pub max_len: usize,
    /// Seed of the split that produced `roles`, if any.
    pub split_seed: Option<u64>,
    /// Explicit popularity normalizer; `None` uses the max train popularity.
    pub alpha_override: Option<f64>,
}

impl Corpus {
    /// Builds a corpus with every playlist in the training role.
    ///
    /// Playlists must be nonempty, at most `max_len` long and reference only
    /// catalog songs.
    pub fn from_parts(
        raw_songs: Vec<RawSong>,
        n_artists: usize,
        n_albums: usize,
        playlists: Vec<Playlist>,
        max_len: usize,
        alpha_override: Option<f64>,
    ) -> Result<Self> {
        let n = raw_songs.len();
        for p in &playlists {
            if p.is_empty() || p.len() > max_len {
                return Err(RtaError::Domain(format!(
                    "playlist {} has length {}, allowed range is [1, {max_len}]",
                    p.playlist_id,
                    p.len()
                )));
            }
            if let Some(&s) = p.songs.iter().find(|&&s| s >= n) {
                return Err(RtaError::UnknownSong(s));
            }
        }
        let mut uris = Vec::with_capacity(n);
        let mut songs = Vec::with_capacity(n);
        for (i, raw) in raw_songs.into_iter().enumerate() {
            if raw.artist_id >= n_artists || raw.album_id >= n_albums {
                return Err(RtaError::Domain(format!("song {i} references metadata outside the tables")));
            }
            songs.push(Song {
                song_id: i,
                artist_id: raw.artist_id,
                album_id: raw.album_id,
                duration_s: raw.duration_s,
                popularity: 0,
                dur_bucket: bucket_duration(raw.duration_s as f64)?,
                pop_bucket: 1,
            });
            uris.push(raw.uri);
        }
        let roles = vec![Role::Train; playlists.len()];
        let mut corpus = Corpus {
            catalog: Catalog {
                songs,
                uris,
                n_artists,
                n_albums,
                alpha_pop: 2.0,
            },
            playlists,
            roles,
            max_len,
            split_seed: None,
            alpha_override,
        };
        corpus.refresh_popularity()?;
        Ok(corpus)
    }

    /// Recomputes popularity from training playlists, then α and both buckets.
    pub fn refresh_popularity(&mut self) -> Result<()> {
        let mut counts = vec![0u32; self.catalog.len()];
        for (p, role) in self.playlists.iter().zip(&self.roles) {
            if *role == Role::Train {
                for &s in &p.songs {
                    counts[s] += 1;
                }
            }
        }
        let max_pop = counts.iter().copied().max().unwrap_or(0) as f64;
        let alpha = match self.alpha_override {
            Some(a) => a,
            // α must exceed 1 for the log scale to be defined
            None => max_pop.max(2.0),
        };
        for (song, &c) in self.catalog.songs.iter_mut().zip(&counts) {
            song.popularity = c;
            song.pop_bucket = bucket_popularity(c as u64, alpha)?;
        }
        self.catalog.alpha_pop = alpha;
        Ok(())
    }

    pub fn n_songs(&self) -> usize {
        self.catalog.len()
    }

    pub fn n_playlists(&self) -> usize {
        self.playlists.len()
    }

    pub fn indices_with_role(&self, role: Role) -> Vec<usize> {
        self.roles.iter().enumerate().filter(|(_, r)| **r == role).map(|(i, _)| i).collect()
    }

    pub fn playlists_with_role(&self, role: Role) -> Vec<&Playlist> {
        self.playlists.iter().zip(&self.roles).filter(|(_, r)| **r == role).map(|(p, _)| p).collect()
    }

    /// Assigns roles from `split` and recomputes train popularity.
    pub fn apply_split(&mut self, split: &Split) -> Result<()> {
        let mut roles = vec![Role::Train; self.playlists.len()];
        for &i in &split.validation {
            roles[i] = Role::Validation;
        }
        for &i in &split.test {
            roles[i] = Role::Test;
        }
        self.roles = roles;
        self.split_seed = Some(split.seed);
        self.refresh_popularity()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duration_examples() {
        assert_eq!(bucket_duration(60.0).unwrap(), 2);
        assert_eq!(bucket_duration(1250.0).unwrap(), 40);
        assert_eq!(bucket_duration(0.0).unwrap(), 1);
        assert_eq!(bucket_duration(30.0).unwrap(), 1);
        assert_eq!(bucket_duration(30.5).unwrap(), 2);
        assert!(bucket_duration(-1.0).is_err());
        assert!(bucket_duration(f64::NAN).is_err());
    }

    #[test]
    fn popularity_examples() {
        assert_eq!(bucket_popularity(1, 45_000.0).unwrap(), 1);
        assert_eq!(bucket_popularity(45_000, 45_000.0).unwrap(), 100);
        assert_eq!(bucket_popularity(0, 45_000.0).unwrap(), 1);
        assert_eq!(bucket_popularity(90_000, 45_000.0).unwrap(), 100);
        assert!(bucket_popularity(3, 1.0).is_err());
        assert!(bucket_popularity(3, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn duration_bucket_is_monotone_and_bounded(a in 0.0f64..5000.0, b in 0.0f64..5000.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (x, y) = (bucket_duration(lo).unwrap(), bucket_duration(hi).unwrap());
            prop_assert!(x <= y);
            prop_assert!((1..=40).contains(&x) && (1..=40).contains(&y));
        }

        #[test]
        fn popularity_bucket_is_monotone_and_bounded(a in 0u64..200_000, b in 0u64..200_000, alpha in 1.5f64..100_000.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (x, y) = (bucket_popularity(lo, alpha).unwrap(), bucket_popularity(hi, alpha).unwrap());
            prop_assert!(x <= y);
            prop_assert!((1..=100).contains(&x) && (1..=100).contains(&y));
        }
    }

    fn tiny() -> Corpus {
        let raw = (0..4)
            .map(|i| RawSong {
                uri: format!("t{i}"),
                artist_id: i % 2,
                album_id: i,
                duration_s: 200.0,
            })
            .collect();
        let playlists = vec![
            Playlist { playlist_id: 0, songs: vec![0, 1, 2] },
            Playlist { playlist_id: 1, songs: vec![2, 3] },
            Playlist { playlist_id: 2, songs: vec![3, 0] },
        ];
        Corpus::from_parts(raw, 2, 4, playlists, 10, None).unwrap()
    }

    #[test]
    fn popularity_counts_training_occurrences() {
        let mut c = tiny();
        assert_eq!(c.catalog.popularity(), vec![2, 1, 2, 2]);
        let total: u32 = c.catalog.popularity().iter().sum();
        assert_eq!(total as usize, c.playlists.iter().map(Playlist::len).sum::<usize>());

        let split = Split {
            seed: 1,
            train: vec![0, 1],
            validation: vec![2],
            test: vec![],
        };
        c.apply_split(&split).unwrap();
        assert_eq!(c.catalog.popularity(), vec![1, 1, 2, 1]);
        assert_eq!(c.catalog.alpha_pop, 2.0);
    }

    #[test]
    fn rejects_overlong_and_unknown() {
        let raw = vec![RawSong {
            uri: "a".into(),
            artist_id: 0,
            album_id: 0,
            duration_s: 1.0,
        }];
        let long = vec![Playlist { playlist_id: 0, songs: vec![0; 3] }];
        assert!(Corpus::from_parts(raw.clone(), 1, 1, long, 2, None).is_err());
        let unknown = vec![Playlist { playlist_id: 0, songs: vec![1] }];
        assert!(matches!(
            Corpus::from_parts(raw, 1, 1, unknown, 2, None),
            Err(RtaError::UnknownSong(1))
        ));
    }

    #[test]
    fn observed_values_follow_training_popularity() {
        let mut c = tiny();
        c.apply_split(&Split {
            seed: 0,
            train: vec![0],
            validation: vec![1, 2],
            test: vec![],
        })
        .unwrap();
        // song 3 (artist 1, album 3) never appears in training
        assert_eq!(c.catalog.observed_values(MetaField::Album), vec![true, true, true, false]);
        assert_eq!(c.catalog.observed_values(MetaField::Artist), vec![true, true]);
    }
}
