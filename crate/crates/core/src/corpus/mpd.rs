//! Million Playlist Dataset slice ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Corpus, Playlist, RawSong};
use crate::error::{Result, RtaError};

#[derive(Deserialize)]
struct Slice {
    playlists: Vec<MpdPlaylist>,
}

#[derive(Deserialize)]
struct MpdPlaylist {
    pid: u64,
    #[serde(default)]
    tracks: Vec<MpdTrack>,
}

#[derive(Deserialize)]
struct MpdTrack {
    track_uri: String,
    artist_uri: Option<String>,
    album_uri: Option<String>,
    duration_ms: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestDiagnostics {
    pub files: usize,
    pub playlists_read: usize,
    pub tracks_read: usize,
    pub rejected_missing_artist: usize,
    pub rejected_missing_album: usize,
    pub missing_duration: usize,
    pub truncated_playlists: usize,
    pub dropped_empty_playlists: usize,
}

fn slice_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| RtaError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| RtaError::io(dir, e))?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if name.starts_with("mpd.slice.") && name.ends_with(".json") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(RtaError::Ingest {
            path: dir.to_path_buf(),
            reason: "no mpd.slice.*.json files found".into(),
        });
    }
    Ok(files)
}

fn parse_slice(path: &Path) -> Result<Slice> {
    let text = fs::read_to_string(path).map_err(|e| RtaError::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| RtaError::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Reads every `mpd.slice.*.json` under `dir` into a corpus with all
/// playlists in the training role.
///
/// Songs, artists and albums get dense ids in lexicographic URI order, so the
/// result does not depend on file order or parse parallelism. Playlists are
/// ordered by `pid` and truncated to `max_len`.
pub fn load_mpd_slices(dir: &Path, max_len: usize, alpha_override: Option<f64>) -> Result<(Corpus, IngestDiagnostics)> {
    let files = slice_files(dir)?;
    let slices: Vec<Slice> = files.par_iter().map(|f| parse_slice(f)).collect::<Result<_>>()?;

    let mut diag = IngestDiagnostics {
        files: files.len(),
        ..Default::default()
    };
    // first occurrence (file order, then playlist order) defines a track's metadata
    let mut tracks: BTreeMap<&str, (&str, &str, f64)> = BTreeMap::new();
    let mut artists = BTreeSet::new();
    let mut albums = BTreeSet::new();
    let mut kept: Vec<(u64, Vec<&str>)> = Vec::new();
    for slice in &slices {
        for p in &slice.playlists {
            diag.playlists_read += 1;
            let mut uris = Vec::with_capacity(p.tracks.len());
            for t in &p.tracks {
                diag.tracks_read += 1;
                let Some(artist) = t.artist_uri.as_deref() else {
                    diag.rejected_missing_artist += 1;
                    continue;
                };
                let Some(album) = t.album_uri.as_deref() else {
                    diag.rejected_missing_album += 1;
                    continue;
                };
                let duration_s = match t.duration_ms {
                    Some(ms) if ms.is_finite() && ms >= 0.0 => ms / 1000.0,
                    _ => {
                        diag.missing_duration += 1;
                        0.0
                    }
                };
                tracks.entry(t.track_uri.as_str()).or_insert((artist, album, duration_s));
                artists.insert(artist);
                albums.insert(album);
                uris.push(t.track_uri.as_str());
            }
            if uris.is_empty() {
                diag.dropped_empty_playlists += 1;
                continue;
            }
            if uris.len() > max_len {
                diag.truncated_playlists += 1;
                uris.truncate(max_len);
            }
            kept.push((p.pid, uris));
        }
    }

    let artist_ids: BTreeMap<&str, usize> = artists.iter().enumerate().map(|(i, a)| (*a, i)).collect();
    let album_ids: BTreeMap<&str, usize> = albums.iter().enumerate().map(|(i, a)| (*a, i)).collect();
    let song_ids: BTreeMap<&str, usize> = tracks.keys().enumerate().map(|(i, t)| (*t, i)).collect();
    let raw_songs = tracks
        .iter()
        .map(|(uri, (artist, album, dur))| RawSong {
            uri: uri.to_string(),
            artist_id: artist_ids[artist],
            album_id: album_ids[album],
            duration_s: *dur as f32,
        })
        .collect();

    kept.sort_by_key(|(pid, _)| *pid);
    let playlists = kept
        .into_iter()
        .map(|(pid, uris)| Playlist {
            playlist_id: pid,
            songs: uris.iter().map(|u| song_ids[u]).collect(),
        })
        .collect();

    let corpus = Corpus::from_parts(raw_songs, artists.len(), albums.len(), playlists, max_len, alpha_override)?;
    Ok((corpus, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::collections::HashSet;

    fn track(t: &str, artist: &str, album: &str, ms: u64) -> serde_json::Value {
        json!({"track_uri": t, "artist_uri": artist, "album_uri": album, "duration_ms": ms, "pos": 0})
    }

    fn write_slice(dir: &Path, name: &str, playlists: serde_json::Value) {
        let body = json!({"info": {"slice": name}, "playlists": playlists});
        fs::write(dir.join(name), serde_json::to_string(&body).unwrap()).unwrap();
    }

    #[test]
    fn shared_song_popularity() {
        let dir = tempfile::tempdir().unwrap();
        write_slice(
            dir.path(),
            "mpd.slice.0-999.json",
            json!([
                {"pid": 0, "name": "a", "tracks": [track("t:1", "ar:1", "al:1", 60_000), track("t:2", "ar:1", "al:1", 1_250_000)]},
                {"pid": 1, "name": "b", "tracks": [track("t:1", "ar:1", "al:1", 60_000)]},
            ]),
        );
        let (c, diag) = load_mpd_slices(dir.path(), 250, None).unwrap();
        assert_eq!(c.n_songs(), 2);
        assert_eq!(c.catalog.songs[0].popularity, 2);
        assert_eq!(c.catalog.songs[0].dur_bucket, 2);
        assert_eq!(c.catalog.songs[1].dur_bucket, 40);
        assert_eq!(diag.tracks_read, 3);
    }

    #[test]
    fn empty_slice() {
        let dir = tempfile::tempdir().unwrap();
        write_slice(dir.path(), "mpd.slice.0-999.json", json!([]));
        let (c, _) = load_mpd_slices(dir.path(), 250, None).unwrap();
        assert_eq!((c.n_songs(), c.n_playlists()), (0, 0));
    }

    #[test]
    fn dedup_across_slices_matches_brute_force() {
        let dir = tempfile::tempdir().unwrap();
        let mut all_uris = Vec::new();
        for f in 0..2 {
            let mut pls = Vec::new();
            for p in 0..5 {
                let pid = f * 5 + p;
                let ts: Vec<_> = (0..4)
                    .map(|j| {
                        let t = format!("spotify:track:{}", (pid * 3 + j * 7) % 13);
                        all_uris.push(t.clone());
                        track(&t, &format!("ar:{}", (pid + j) % 3), "al:x", 100_000)
                    })
                    .collect();
                pls.push(json!({"pid": pid, "tracks": ts}));
            }
            write_slice(dir.path(), &format!("mpd.slice.{f}.json"), json!(pls));
        }
        let (c, _) = load_mpd_slices(dir.path(), 250, None).unwrap();
        let mut expected: Vec<String> = all_uris.iter().cloned().collect::<HashSet<_>>().into_iter().collect();
        expected.sort();
        assert_eq!(c.catalog.uris, expected);
        assert_eq!(c.n_playlists(), 10);
        // each playlist maps back to its URIs
        for p in &c.playlists {
            let pid = p.playlist_id as usize;
            for (j, &s) in p.songs.iter().enumerate() {
                assert_eq!(c.catalog.uris[s], format!("spotify:track:{}", (pid * 3 + j * 7) % 13));
            }
        }
    }

    #[test]
    fn rejects_tracks_without_artist_or_album() {
        let dir = tempfile::tempdir().unwrap();
        write_slice(
            dir.path(),
            "mpd.slice.0.json",
            json!([{"pid": 0, "tracks": [
                track("t:1", "ar:1", "al:1", 1000),
                {"track_uri": "t:2", "album_uri": "al:1", "duration_ms": 1000},
                {"track_uri": "t:3", "artist_uri": "ar:1", "duration_ms": 1000},
            ]}]),
        );
        let (c, diag) = load_mpd_slices(dir.path(), 250, None).unwrap();
        assert_eq!(c.n_songs(), 1);
        assert_eq!(diag.rejected_missing_artist, 1);
        assert_eq!(diag.rejected_missing_album, 1);
    }

    #[test]
    fn malformed_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("mpd.slice.bad.json"), "{not json").unwrap();
        match load_mpd_slices(dir.path(), 250, None) {
            Err(RtaError::Ingest { path, .. }) => assert!(path.ends_with("mpd.slice.bad.json")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_directory_is_an_error() {
        assert!(load_mpd_slices(Path::new("/nonexistent/mpd"), 250, None).is_err());
    }
}
