use std::sync::Arc;

use super::*;
use crate::corpus::{Corpus, Playlist, RawSong};
use crate::numerics::grad_check;

fn corpus(n: usize, in_playlists: usize) -> Corpus {
    let raw = (0..n)
        .map(|i| RawSong {
            uri: format!("s{i:05}"),
            artist_id: i % 7,
            album_id: i % 13,
            duration_s: (30 * (i % 9) + 1) as f32,
        })
        .collect();
    let playlists = (0..in_playlists)
        .collect::<Vec<_>>()
        .chunks(10)
        .enumerate()
        .map(|(p, c)| Playlist {
            playlist_id: p as u64,
            songs: c.to_vec(),
        })
        .collect();
    Corpus::from_parts(raw, 7, 13, playlists, 10, None).unwrap()
}

fn model(kind: RepresenterKind, n: usize, dim: usize, seed: u64) -> (ParamStore, Representer) {
    let c = corpus(n, n);
    let mut rng = Rng::seed_from(seed);
    let store = EmbeddingStore::from_song_vectors(rng.normal_matrix(n, dim, 1.0), &c.catalog).unwrap();
    let meta = Arc::new(SongMeta::new(&c.catalog, &store));
    let cfg = RepresenterConfig {
        kind,
        nn_heads: 2,
        ..Default::default()
    };
    let mut params = ParamStore::new();
    let r = Representer::init(&mut params, &cfg, &store, meta, &mut rng).unwrap();
    (params, r)
}

#[test]
fn direct_is_row_lookup() {
    let (params, r) = model(RepresenterKind::Direct, 20, 4, 1);
    let table = params.tensor(params.id(SONG_TABLE).unwrap());
    assert_eq!(r.represent(&params, 3).unwrap(), table.row(3));
    assert_eq!(r.represent(&params, 3).unwrap(), r.represent(&params, 3).unwrap());
    assert!(matches!(r.represent(&params, 20), Err(RtaError::UnknownSong(20))));
}

fn set_rows(params: &mut ParamStore, name: &str, rows: &[(usize, &[f32])]) {
    let id = params.id(name).unwrap();
    for (i, v) in rows {
        params.tensor_mut(id).row_mut(*i).copy_from_slice(v);
    }
}

#[test]
fn fm_is_mean_of_metadata_vectors() {
    let (mut params, r) = model(RepresenterKind::Fm, 20, 2, 2);
    let m = r.meta().index[5];
    let rows: [&[f32]; 4] = [&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]];
    for f in 0..4 {
        set_rows(&mut params, &table_name(f), &[(m[f] as usize, rows[f])]);
    }
    assert_eq!(r.represent(&params, 5).unwrap(), vec![0.5, 0.5]);

    for f in 0..4 {
        set_rows(&mut params, &table_name(f), &[(m[f] as usize, &[0.25, -3.0])]);
    }
    assert_eq!(r.represent(&params, 5).unwrap(), vec![0.25, -3.0]);
}

/// Song 0 is in a training playlist; song 1 is not and is the only song of
/// artist 1, so its artist is cold while album and buckets are shared.
fn cold_fixture() -> (Catalog, EmbeddingStore) {
    let raw = vec![
        RawSong {
            uri: "a".into(),
            artist_id: 0,
            album_id: 0,
            duration_s: 200.0,
        },
        RawSong {
            uri: "b".into(),
            artist_id: 1,
            album_id: 0,
            duration_s: 200.0,
        },
    ];
    let c = Corpus::from_parts(raw, 2, 1, vec![Playlist { playlist_id: 0, songs: vec![0] }], 5, None).unwrap();
    let songs = Tensor::from_rows(&[vec![1.0, 2.0], vec![7.0, 7.0]]).unwrap();
    let store = EmbeddingStore::from_song_vectors(songs, &c.catalog).unwrap();
    (c.catalog, store)
}

#[test]
fn fm_falls_back_to_warm_fields() {
    let (catalog, store) = cold_fixture();
    assert_eq!(store.table(MetaField::Artist).present, vec![true, false]);
    let meta = Arc::new(SongMeta::new(&catalog, &store));
    let mut params = ParamStore::new();
    let cfg = RepresenterConfig {
        kind: RepresenterKind::Fm,
        ..Default::default()
    };
    let r = Representer::init(&mut params, &cfg, &store, meta.clone(), &mut Rng::seed_from(0)).unwrap();
    let [_, album, dur, pop] = meta.index[1];
    set_rows(&mut params, "phi.meta.album", &[(album as usize, &[3.0, 0.0])]);
    set_rows(&mut params, "phi.meta.duration", &[(dur as usize, &[0.0, 3.0])]);
    set_rows(&mut params, "phi.meta.popularity", &[(pop as usize, &[3.0, 3.0])]);
    // the artist row is cold and must not contribute even if nonzero
    set_rows(&mut params, "phi.meta.artist", &[(1, &[100.0, 100.0])]);
    assert_eq!(r.represent(&params, 1).unwrap(), vec![2.0, 2.0]);
}

#[test]
fn fm_with_no_warm_field_is_zero() {
    let (catalog, mut store) = cold_fixture();
    for t in &mut store.metadata {
        t.present.iter_mut().for_each(|p| *p = false);
    }
    let meta = Arc::new(SongMeta::new(&catalog, &store));
    let mut params = ParamStore::new();
    let cfg = RepresenterConfig {
        kind: RepresenterKind::Fm,
        ..Default::default()
    };
    let r = Representer::init(&mut params, &cfg, &store, meta, &mut Rng::seed_from(0)).unwrap();
    assert_eq!(r.represent(&params, 0).unwrap(), vec![0.0, 0.0]);
}

fn identity(d: usize) -> Vec<f32> {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    v
}

fn layer_norm_ref(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

#[test]
fn uniform_identity_attention_mixes_in_token_mean() {
    let (mut params, r) = model(RepresenterKind::Nn, 30, 4, 3);
    for name in ["phi.nn0.wq", "phi.nn0.wk"] {
        let id = params.id(name).unwrap();
        params.tensor_mut(id).data_mut().fill(0.0);
    }
    for name in ["phi.nn0.wv", "phi.nn0.wo"] {
        let id = params.id(name).unwrap();
        params.tensor_mut(id).data_mut().copy_from_slice(&identity(4));
    }
    let song = 11;
    let mut tokens: Vec<Vec<f64>> = vec![params.tensor(params.id(SONG_TABLE).unwrap()).row(song).iter().map(|&v| v as f64).collect()];
    for f in 0..4 {
        let t = params.tensor(params.id(&table_name(f)).unwrap());
        tokens.push(t.row(r.meta().index[song][f] as usize).iter().map(|&v| v as f64).collect());
    }
    let mean: Vec<f64> = (0..4).map(|j| tokens.iter().map(|t| t[j]).sum::<f64>() / 5.0).collect();

    // the attention sublayer alone returns the token mean on every row
    let mut tape = Tape::new(&params);
    let rows: Vec<Var> = (0..5)
        .map(|i| {
            let row: Vec<f32> = tokens[i].iter().map(|&v| v as f32).collect();
            tape.constant(Tensor::row_vector(row))
        })
        .collect();
    let x = tape.concat_rows(&rows).unwrap();
    let a = r.attention_sublayer(&mut tape, &r.layers[0], x, 5, &[true; 5]).unwrap();
    for i in 0..5 {
        for j in 0..4 {
            assert!((tape.value(a).row(i)[j] as f64 - mean[j]).abs() < 1e-5);
        }
    }

    // full representer: post-norm residual, then mean pooling
    let mut expect = vec![0.0f64; 4];
    for t in &tokens {
        let z: Vec<f64> = t.iter().zip(&mean).map(|(a, b)| a + b).collect();
        for (e, v) in expect.iter_mut().zip(layer_norm_ref(&z)) {
            *e += v / 5.0;
        }
    }
    let got = r.represent(&params, song).unwrap();
    for j in 0..4 {
        assert!((got[j] as f64 - expect[j]).abs() < 1e-4, "{got:?} vs {expect:?}");
    }
}

#[test]
fn single_token_attention_is_projected_token() {
    let (catalog, mut store) = cold_fixture();
    for t in &mut store.metadata {
        t.present.iter_mut().for_each(|p| *p = false);
    }
    let meta = Arc::new(SongMeta::new(&catalog, &store));
    let mut params = ParamStore::new();
    let cfg = RepresenterConfig {
        kind: RepresenterKind::Nn,
        nn_heads: 1,
        ..Default::default()
    };
    let r = Representer::init(&mut params, &cfg, &store, meta, &mut Rng::seed_from(5)).unwrap();
    let x = store.song_vectors.row(0).to_vec();
    let wv = params.tensor(params.id("phi.nn0.wv").unwrap()).clone();
    let wo = params.tensor(params.id("phi.nn0.wo").unwrap()).clone();
    let mut tape = Tape::new(&params);
    let xv = tape.constant(Tensor::row_vector(x.clone()));
    let a = r.attention_sublayer(&mut tape, &r.layers[0], xv, 1, &[true]).unwrap();
    let (wvv, wov) = (tape.constant(wv), tape.constant(wo));
    let p1 = tape.matmul(xv, wvv).unwrap();
    let p2 = tape.matmul(p1, wov).unwrap();
    assert!(tape.value(a).max_abs_diff(tape.value(p2)) < 1e-6);

    // with only the song token, the pooled output is that token's row
    let z: Vec<f64> = x.iter().zip(tape.value(a).data()).map(|(a, b)| (*a + *b) as f64).collect();
    let expect = layer_norm_ref(&z);
    let got = r.represent(&params, 0).unwrap();
    for j in 0..2 {
        assert!((got[j] as f64 - expect[j]).abs() < 1e-4);
    }
}

#[test]
fn heads_must_divide_dim() {
    let c = corpus(5, 5);
    let store = EmbeddingStore::from_song_vectors(Tensor::zeros(&[5, 6]), &c.catalog).unwrap();
    let meta = Arc::new(SongMeta::new(&c.catalog, &store));
    let cfg = RepresenterConfig {
        kind: RepresenterKind::Nn,
        nn_heads: 4,
        ..Default::default()
    };
    let err = Representer::init(&mut ParamStore::new(), &cfg, &store, meta, &mut Rng::seed_from(0)).unwrap_err();
    assert!(matches!(err, RtaError::Config(_)));
}

#[test]
fn nn_gradient_check() {
    let (mut params, r) = model(RepresenterKind::Nn, 12, 8, 4);
    let songs = [0usize, 3, 7];
    let target = Rng::seed_from(9).normal_matrix(3, 8, 1.0);
    let report = grad_check(
        &mut params,
        |tape| {
            let h = r.forward(tape, &songs, 0.0, &mut Rng::seed_from(0))?;
            let t = tape.constant(target.clone());
            let p = tape.mul(h, t)?;
            Ok(tape.sum(p))
        },
        1e-2,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-2, "{report:?}");
}

#[test]
fn precompute_is_order_and_thread_invariant() {
    let (params, r) = model(RepresenterKind::Nn, 1000, 8, 6);
    let a = precompute_catalog(&r, &params, "h", true).unwrap();
    let b = precompute_catalog(&r, &params, "h", false).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, precompute_catalog(&r, &params, "h", true).unwrap());
    // a row does not depend on which other songs share its batch
    let single = r.represent(&params, 777).unwrap();
    assert_eq!(a.vectors.row(777), &single[..]);
}

#[test]
fn direct_precompute_equals_song_table() {
    let (params, r) = model(RepresenterKind::Direct, 50, 4, 7);
    let m = precompute_catalog(&r, &params, "x", true).unwrap();
    assert_eq!(&m.vectors, params.tensor(params.id(SONG_TABLE).unwrap()));
}

#[test]
fn catalog_file_round_trip() {
    let (params, r) = model(RepresenterKind::Fm, 40, 4, 8);
    let m = precompute_catalog(&r, &params, "abc123", true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.rtap");
    write_catalog_matrix(&path, &m).unwrap();
    assert_eq!(read_catalog_matrix(&path).unwrap(), m);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    match read_catalog_matrix(&path) {
        Err(RtaError::Format { path: p, .. }) => assert_eq!(p, path),
        other => panic!("{other:?}"),
    }
}
