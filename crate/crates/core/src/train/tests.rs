use std::sync::Arc;

use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};

use super::*;
use crate::corpus::{split_dataset, synthetic_corpus, SplitSpec, SyntheticSpec};
use crate::init::EmbeddingStore;
use crate::model::{ModelConfig, ModelVariant};
use crate::represent::SongMeta;

fn corpus(n_clusters: usize, segment_len: usize, noise: f64) -> Corpus {
    let spec = SyntheticSpec {
        n_songs: 60,
        n_clusters,
        n_playlists: 120,
        min_len: 6,
        max_len: 12,
        segment_len,
        artists_per_cluster: 3,
        noise,
        rng_seed: 5,
    };
    let mut c = synthetic_corpus(&spec).unwrap().corpus;
    let split = split_dataset(
        &c,
        &SplitSpec {
            rng_seed: 1,
            n_val: 15,
            n_test: 15,
            min_len: 6,
        },
    )
    .unwrap();
    c.apply_split(&split).unwrap();
    c
}

fn model_with(corpus: &Corpus, variant: ModelVariant, dim: usize, vectors: Tensor) -> RtaModel {
    let mut cfg = ModelConfig::variant(variant, dim);
    cfg.aggregator.tf_heads = 2;
    cfg.representer.nn_heads = 2;
    let store = EmbeddingStore::from_song_vectors(vectors, &corpus.catalog).unwrap();
    let meta = Arc::new(SongMeta::new(&corpus.catalog, &store));
    RtaModel::init(&cfg, &store, meta, &mut Rng::seed_from(11)).unwrap()
}

fn model(corpus: &Corpus, variant: ModelVariant, dim: usize) -> RtaModel {
    let v = Rng::seed_from(3).normal_matrix(corpus.n_songs(), dim, 0.3);
    model_with(corpus, variant, dim, v)
}

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_playlists: 16,
        n_negatives: 10,
        lr0: 0.05,
        dropout: 0.1,
        max_epochs: 3,
        patience: 5,
        val_n_reco: 20,
        ..Default::default()
    }
}

fn log_sigmoid(x: f64) -> f64 {
    -(1.0 + (-x).exp()).ln()
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[test]
fn zero_scores_give_log_two_per_term() {
    let c = corpus(4, 3, 0.0);
    let m = model_with(&c, ModelVariant::MfAvg, 4, Tensor::zeros(&[c.n_songs(), 4]));
    let v = playlist_loss_value(&m, &[0, 1, 2, 3, 4], &[10, 11, 12]).unwrap();
    let expected = 4.0 * 4.0 * std::f64::consts::LN_2;
    assert!((v - expected).abs() < 1e-5, "{v} vs {expected}");
}

#[test]
fn loss_matches_scalar_reevaluation() {
    let c = corpus(4, 3, 0.0);
    let mut rng = Rng::seed_from(99);
    for case in 0..20 {
        let variant = ModelVariant::ALL[case % ModelVariant::ALL.len()];
        let m = model(&c, variant, 8);
        let l = 2 + rng.below(5);
        let n = rng.below(5);
        let picks = sample_negatives(c.n_songs(), &[], l + n, &mut rng).unwrap();
        let (songs, negatives) = picks.split_at(l);

        let h = m.representer.represent_many(&m.params, songs).unwrap();
        let hn = m.representer.represent_many(&m.params, negatives).unwrap();
        let states = m.prefix_states(songs).unwrap();
        let mut oracle = 0.0f64;
        for i in 0..l - 1 {
            oracle -= log_sigmoid(dot64(states.row(i), h.row(i + 1)));
            for j in 0..n {
                oracle -= log_sigmoid(-dot64(states.row(i), hn.row(j)));
            }
        }
        let got = playlist_loss_value(&m, songs, negatives).unwrap();
        assert!((got - oracle).abs() <= 1e-6 * oracle.abs().max(1.0), "case {case} ({variant}): {got} vs {oracle}");
    }
}

/// The same loss built prefix by prefix, each prefix aggregated from scratch.
fn explicit_prefix_loss(m: &RtaModel, tape: &mut Tape, songs: &[SongId], negatives: &[SongId]) -> Var {
    let (l, n) = (songs.len(), negatives.len());
    let mut ids = songs.to_vec();
    ids.extend_from_slice(negatives);
    let h = m.representer.forward(tape, &ids, 0.0, &mut Rng::seed_from(0)).unwrap();
    let hn = tape.slice_rows(h, l, l + n).unwrap();
    let mut total = None;
    for i in 1..l {
        let seq = tape.slice_rows(h, 0, i).unwrap();
        let a = m.aggregator.aggregate(tape, seq).unwrap();
        let target = tape.slice_rows(h, i, i + 1).unwrap();
        let pos = tape.matmul_nt(a, target).unwrap();
        let pos = tape.log_sigmoid(pos);
        let mut term = tape.sum(pos);
        let neg = tape.matmul_nt(a, hn).unwrap();
        let neg = tape.scale(neg, -1.0);
        let neg = tape.log_sigmoid(neg);
        let neg = tape.sum(neg);
        term = tape.add(term, neg).unwrap();
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term).unwrap(),
        });
    }
    tape.scale(total.unwrap(), -1.0)
}

#[test]
fn one_pass_gradients_equal_per_prefix_gradients() {
    let c = corpus(4, 3, 0.0);
    let songs = [3, 17, 5, 40, 22, 9];
    let negatives = [1, 30, 55];
    for variant in ModelVariant::ALL {
        let m = model(&c, variant, 8);

        let mut tape = Tape::new(&m.params);
        let fast = playlist_loss(&m, &mut tape, &songs, &negatives, 0.0, &mut Rng::seed_from(0)).unwrap();
        let mut g_fast = Gradients::new();
        tape.backward(fast, &mut g_fast).unwrap();
        let fast_value = tape.value(fast).item();

        let mut tape = Tape::new(&m.params);
        let slow = explicit_prefix_loss(&m, &mut tape, &songs, &negatives);
        let mut g_slow = Gradients::new();
        tape.backward(slow, &mut g_slow).unwrap();
        let slow_value = tape.value(slow).item();

        assert!((fast_value - slow_value).abs() < 1e-4, "{variant}: {fast_value} vs {slow_value}");
        for (id, p) in m.params.iter() {
            let a = g_fast.dense(&m.params, id);
            let b = g_slow.dense(&m.params, id);
            let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
            assert!(diff < 1e-4, "{variant}: gradient of {} differs by {diff}", p.name);
        }
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let c = corpus(4, 3, 0.05);
    let mut m = model(&c, ModelVariant::MfTransformer, 8);
    let before = m.params.clone();
    let train = c.indices_with_role(Role::Train);
    let stats = train_epoch(&mut m, &c, &train, &small_config(), 1, 0.0).unwrap();
    assert!(stats.mean_loss > 0.0);
    for ((_, a), (_, b)) in before.iter().zip(m.params.iter()) {
        assert_eq!(a.tensor, b.tensor, "{}", a.name);
    }
}

#[test]
fn epochs_are_deterministic() {
    let c = corpus(4, 3, 0.05);
    let train = c.indices_with_role(Role::Train);
    let run = || {
        let mut m = model(&c, ModelVariant::MfGru, 8);
        let s = train_epoch(&mut m, &c, &train, &small_config(), 1, 0.05).unwrap();
        (m.params, s.mean_loss)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la.to_bits(), lb.to_bits());
    for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
        assert_eq!(x.tensor, y.tensor, "{}", x.name);
    }
}

#[test]
fn loss_falls_on_two_disjoint_clusters() {
    let c = corpus(2, 100, 0.0);
    let train: Vec<usize> = c.indices_with_role(Role::Train).into_iter().take(20).collect();
    let cfg = TrainConfig {
        batch_playlists: 4,
        lr0: 0.5,
        ..small_config()
    };
    for variant in [ModelVariant::MfAvg, ModelVariant::MfTransformer] {
        let mut m = model(&c, variant, 8);
        let mut lr = cfg.lr0;
        let mut losses = Vec::new();
        for epoch in 1..=5 {
            losses.push(train_epoch(&mut m, &c, &train, &cfg, epoch, lr).unwrap().mean_loss);
            lr /= 2.0;
        }
        assert!(losses[4] < losses[0], "{variant}: {losses:?}");
    }
}

#[test]
fn non_finite_loss_is_reported() {
    let c = corpus(4, 3, 0.0);
    let mut m = model(&c, ModelVariant::MfAvg, 4);
    let id = m.representer.song_table().unwrap();
    m.params.tensor_mut(id).data_mut().fill(f32::NAN);
    let train = c.indices_with_role(Role::Train);
    let err = train_epoch(&mut m, &c, &train, &small_config(), 1, 0.1).unwrap_err();
    assert!(matches!(err, RtaError::NonFiniteLoss { step: 0, .. }), "{err}");
}

#[test]
fn clipping_bounds_the_update() {
    let c = corpus(4, 3, 0.0);
    let train = c.indices_with_role(Role::Train);
    let mut m = model(&c, ModelVariant::MfTransformer, 8);
    let before = m.params.clone();
    let cfg = TrainConfig {
        batch_playlists: train.len(),
        weight_decay: 0.0,
        dropout: 0.0,
        clip_grad_norm: 0.5,
        ..small_config()
    };
    train_epoch(&mut m, &c, &train, &cfg, 1, 1.0).unwrap();
    let moved: f64 = before
        .iter()
        .zip(m.params.iter())
        .flat_map(|((_, a), (_, b))| a.tensor.data().iter().zip(b.tensor.data()).map(|(x, y)| ((x - y) as f64).powi(2)))
        .sum::<f64>()
        .sqrt();
    assert!(moved <= 0.5 + 1e-4 && moved > 0.4, "{moved}");
}

#[test]
fn learning_rate_halves_and_patience_stops() {
    let cfg = TrainConfig {
        lr0: 0.08,
        patience: 2,
        max_epochs: 10,
        ..Default::default()
    };
    let mut s = TrainState::new(&cfg, 0.0);
    assert!(s.record(0.10, cfg.patience, cfg.max_epochs));
    assert!(s.record(0.20, cfg.patience, cfg.max_epochs));
    assert!(!s.record(0.15, cfg.patience, cfg.max_epochs));
    assert!(!s.finished);
    assert!(!s.record(0.20, cfg.patience, cfg.max_epochs));
    assert!(s.finished);
    assert_eq!((s.epoch, s.best_epoch, s.best_ndcg), (4, 2, Some(0.20)));
    assert_eq!(s.lr, 0.08 / 16.0);

    let mut s = TrainState::new(&cfg, 0.0);
    assert!(s.record(0.3, 1, 10));
    assert!(!s.record(0.2, 1, 10));
    assert!(s.finished && s.best_epoch == 1 && s.epoch == 2);

    let mut s = TrainState::new(&cfg, 0.0);
    for e in 1..=10 {
        s.record(e as f64, cfg.patience, cfg.max_epochs);
    }
    assert!(s.finished && s.epochs_without_improvement == 0);
}

#[test]
fn fit_follows_the_schedule() {
    let c = corpus(4, 3, 0.05);
    let out = fit(model(&c, ModelVariant::MfAvg, 8), &c, &small_config(), &FitOptions::default()).unwrap();
    let lrs: Vec<f32> = out.state.history.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, vec![0.05, 0.025, 0.0125]);
    assert_eq!(out.state.epoch, 3);
    assert!(out.state.finished);
    let best = out.state.history[out.state.best_epoch - 1].val_ndcg;
    assert_eq!(Some(best), out.state.best_ndcg);
    assert!(out.state.history.iter().all(|r| r.val_ndcg <= best));
    assert_eq!(validation_ndcg(&out.best, &c, &small_config()).unwrap(), best);
}

#[test]
fn checkpoints_round_trip_byte_for_byte() {
    let c = corpus(4, 3, 0.0);
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    for variant in ModelVariant::ALL {
        let m = model(&c, variant, 8);
        let state = TrainState::new(&cfg, 0.25);
        let path = dir.path().join(format!("{variant}.rtak"));
        let hash = write_checkpoint(&path, &Checkpoint::of(&m, &state)).unwrap();
        let (ck, hash2) = read_checkpoint(&path).unwrap();
        assert_eq!(hash, hash2);
        assert_eq!(ck.state, state);
        let again = ck.into_model().unwrap();
        let path2 = dir.path().join(format!("{variant}-again.rtak"));
        write_checkpoint(&path2, &Checkpoint::of(&again, &state)).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap(), "{variant}");
        assert_eq!(
            validation_ndcg(&m, &c, &cfg).unwrap().to_bits(),
            validation_ndcg(&again, &c, &cfg).unwrap().to_bits()
        );
        let sidecar: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join(format!("{variant}.rtak.json"))).unwrap()).unwrap();
        assert_eq!(sidecar["sha256"], hash);
        assert_eq!(sidecar["label"], variant.name());
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let c = corpus(4, 3, 0.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rtak");
    write_checkpoint(&path, &Checkpoint::of(&model(&c, ModelVariant::MfGru, 8), &TrainState::new(&small_config(), 0.0))).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        match read_checkpoint(&path) {
            Err(RtaError::Format { path: p, .. }) => assert_eq!(p, path),
            other => panic!("cut at {cut}: {other:?}"),
        }
    }
    let mut extra = bytes.clone();
    extra.push(0);
    std::fs::write(&path, &extra).unwrap();
    assert!(matches!(read_checkpoint(&path), Err(RtaError::Format { .. })));
    let mut bad = bytes;
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(read_checkpoint(&path), Err(RtaError::Format { .. })));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let c = corpus(4, 3, 0.05);
    let cfg = small_config();
    let whole = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let opts = |d: &tempfile::TempDir, stop| FitOptions {
        out_dir: Some(d.path().to_path_buf()),
        stop_after_epoch: stop,
    };

    let a = fit(model(&c, ModelVariant::MfTransformer, 8), &c, &cfg, &opts(&whole, None)).unwrap();
    let first = fit(model(&c, ModelVariant::MfTransformer, 8), &c, &cfg, &opts(&split, Some(1))).unwrap();
    assert_eq!(first.state.epoch, 1);
    let b = resume(split.path(), &c, &cfg, &opts(&split, None)).unwrap();

    assert_eq!(a.state, b.state);
    assert_eq!(a.best_hash, b.best_hash);
    for name in [LAST_CHECKPOINT, BEST_CHECKPOINT] {
        assert_eq!(std::fs::read(whole.path().join(name)).unwrap(), std::fs::read(split.path().join(name)).unwrap(), "{name}");
    }
    let log = std::fs::read_to_string(split.path().join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 3);

    let other_seed = TrainConfig {
        rng_seed: 1,
        ..cfg
    };
    assert!(matches!(resume(split.path(), &c, &other_seed, &opts(&split, None)), Err(RtaError::Config(_))));
}

#[test]
fn popularity_negatives_favour_popular_songs() {
    let c = corpus(4, 3, 0.05);
    let cdf = popularity_cdf(&c);
    let pop = c.catalog.popularity();
    let top = (0..pop.len()).max_by_key(|&s| (pop[s], std::cmp::Reverse(s))).unwrap();
    let bottom = (0..pop.len()).min_by_key(|&s| (pop[s], s)).unwrap();
    let mut rng = Rng::seed_from(4);
    let (mut hits_top, mut hits_bottom) = (0, 0);
    for _ in 0..2000 {
        let s = sample_popular(&cdf, &[], 1, &mut rng).unwrap();
        hits_top += (s[0] == top) as usize;
        hits_bottom += (s[0] == bottom) as usize;
    }
    assert!(pop[top] > pop[bottom]);
    assert!(hits_top > hits_bottom, "{hits_top} vs {hits_bottom}");
}

proptest! {
    #[test]
    fn popularity_negatives_avoid_the_playlist(
        weights in prop::collection::vec(0u32..50, 5..40),
        exclude_frac in 0.0f64..0.9,
        seed in any::<u64>(),
    ) {
        let n = weights.len();
        let mut acc = 0.0;
        let cdf: Vec<f64> = weights.iter().map(|&w| { acc += 1.0 + w as f64; acc }).collect();
        let n_excl = ((n as f64) * exclude_frac) as usize;
        let exclude: Vec<usize> = (0..n_excl).map(|i| (i * 7) % n).collect();
        let mut distinct = exclude.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let count = (n - distinct.len()).min(6);
        let out = sample_popular(&cdf, &exclude, count, &mut Rng::seed_from(seed)).unwrap();
        prop_assert_eq!(out.len(), count);
        let mut sorted = out.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), count);
        prop_assert!(out.iter().all(|s| *s < n && !distinct.contains(s)));
        prop_assert!(sample_popular(&cdf, &exclude, n - distinct.len() + 1, &mut Rng::seed_from(seed)).is_err());
    }
}
