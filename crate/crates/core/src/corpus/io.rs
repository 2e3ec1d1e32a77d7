//! `RTAC` binary corpus format.
//!
//! ```text
//! "RTAC" | version u32 | N u64 | K u64 | L u32
//! alpha_pop f64 | alpha_override f64 (NaN = none) | n_artists u32 | n_albums u32 | split_seed u64 | has_split u8
//! N × (artist u32, album u32, duration f32, popularity u32, dur_bucket u8, pop_bucket u8)
//! N × (uri: len u32, utf-8 bytes)
//! (K+1) × offset u64 | K × pid u64 | K × role u8 | Σ lengths × song u32
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Catalog, Corpus, Playlist, Role, Song};
use crate::binio::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::error::Result;

pub const CORPUS_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"RTAC";

/// Human-readable summary written next to a corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub version: u32,
    pub songs: usize,
    pub playlists: usize,
    pub max_len: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub artists: usize,
    pub albums: usize,
    pub alpha_pop: f64,
    pub rng_seed: Option<u64>,
}

impl CorpusManifest {
    pub fn of(corpus: &Corpus) -> Self {
        CorpusManifest {
            format: "RTAC".into(),
            version: CORPUS_FORMAT_VERSION,
            songs: corpus.n_songs(),
            playlists: corpus.n_playlists(),
            max_len: corpus.max_len,
            train: corpus.indices_with_role(Role::Train).len(),
            validation: corpus.indices_with_role(Role::Validation).len(),
            test: corpus.indices_with_role(Role::Test).len(),
            artists: corpus.catalog.n_artists,
            albums: corpus.catalog.n_albums,
            alpha_pop: corpus.catalog.alpha_pop,
            rng_seed: corpus.split_seed,
        }
    }
}

pub(crate) fn encode(corpus: &Corpus) -> Vec<u8> {
    let c = &corpus.catalog;
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(CORPUS_FORMAT_VERSION);
    w.u64(c.len() as u64);
    w.u64(corpus.playlists.len() as u64);
    w.u32(corpus.max_len as u32);
    w.f64(c.alpha_pop);
    w.f64(corpus.alpha_override.unwrap_or(f64::NAN));
    w.u32(c.n_artists as u32);
    w.u32(c.n_albums as u32);
    w.u64(corpus.split_seed.unwrap_or(0));
    w.u8(corpus.split_seed.is_some() as u8);
    for s in &c.songs {
        w.u32(s.artist_id as u32);
        w.u32(s.album_id as u32);
        w.f32(s.duration_s);
        w.u32(s.popularity);
        w.u8(s.dur_bucket);
        w.u8(s.pop_bucket);
    }
    for u in &c.uris {
        w.str(u);
    }
    let mut offset = 0u64;
    w.u64(0);
    for p in &corpus.playlists {
        offset += p.songs.len() as u64;
        w.u64(offset);
    }
    for p in &corpus.playlists {
        w.u64(p.playlist_id);
    }
    for r in &corpus.roles {
        w.u8(r.code());
    }
    for p in &corpus.playlists {
        for &s in &p.songs {
            w.u32(s as u32);
        }
    }
    w.into_inner()
}

/// Writes the corpus and a `<path>.manifest.json` sidecar.
pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    write_atomic(path, &encode(corpus))?;
    let manifest = serde_json::to_vec_pretty(&CorpusManifest::of(corpus)).expect("manifest serializes");
    let mut side = path.as_os_str().to_owned();
    side.push(".manifest.json");
    write_atomic(Path::new(&side), &manifest)
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let bytes = read_file(path)?;
    let mut r = ByteReader::new(&bytes, path);
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != CORPUS_FORMAT_VERSION {
        return Err(r.err(format!("unsupported corpus version {version}")));
    }
    let n = r.u64()? as usize;
    let k = r.u64()? as usize;
    let max_len = r.u32()? as usize;
    let alpha_pop = r.f64()?;
    let alpha_override = Some(r.f64()?).filter(|a| !a.is_nan());
    let n_artists = r.u32()? as usize;
    let n_albums = r.u32()? as usize;
    let seed = r.u64()?;
    let split_seed = (r.u8()? == 1).then_some(seed);
    let mut songs = Vec::with_capacity(n);
    for i in 0..n {
        let song = Song {
            song_id: i,
            artist_id: r.u32()? as usize,
            album_id: r.u32()? as usize,
            duration_s: r.f32()?,
            popularity: r.u32()?,
            dur_bucket: r.u8()?,
            pop_bucket: r.u8()?,
        };
        if song.artist_id >= n_artists || song.album_id >= n_albums || !(1..=40).contains(&song.dur_bucket) || !(1..=100).contains(&song.pop_bucket) {
            return Err(r.err(format!("song {i} has out-of-range metadata")));
        }
        songs.push(song);
    }
    let uris = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let offsets = (0..=k).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let pids = (0..k).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let mut roles = Vec::with_capacity(k);
    for _ in 0..k {
        let code = r.u8()?;
        roles.push(Role::from_code(code).ok_or_else(|| r.err(format!("bad role code {code}")))?);
    }
    let mut playlists = Vec::with_capacity(k);
    for i in 0..k {
        if offsets[i + 1] < offsets[i] {
            return Err(r.err("playlist offsets are not monotone"));
        }
        let len = offsets[i + 1] - offsets[i];
        let mut ids = Vec::with_capacity(len);
        for _ in 0..len {
            let s = r.u32()? as usize;
            if s >= n {
                return Err(r.err(format!("playlist {} references song {s} of {n}", pids[i])));
            }
            ids.push(s);
        }
        playlists.push(Playlist {
            playlist_id: pids[i],
            songs: ids,
        });
    }
    r.finish()?;
    Ok(Corpus {
        catalog: Catalog {
            songs,
            uris,
            n_artists,
            n_albums,
            alpha_pop,
        },
        playlists,
        roles,
        max_len,
        split_seed,
        alpha_override,
    })
}
