use std::collections::HashMap;

use super::*;
use crate::corpus::{split_dataset, synthetic_corpus, SplitSpec, SyntheticSpec};

fn corpus() -> Corpus {
    let spec = SyntheticSpec {
        n_songs: 1000,
        n_clusters: 20,
        n_playlists: 400,
        min_len: 20,
        max_len: 30,
        ..Default::default()
    };
    let mut c = synthetic_corpus(&spec).unwrap().corpus;
    let split = split_dataset(
        &c,
        &SplitSpec {
            rng_seed: 1,
            n_val: 50,
            n_test: 200,
            min_len: 20,
        },
    )
    .unwrap();
    c.apply_split(&split).unwrap();
    c
}

/// Returns the masked songs first, then fills with other songs.
struct Oracle {
    truth: HashMap<Vec<SongId>, Vec<SongId>>,
    n_songs: usize,
}

impl Oracle {
    /// Keeps only assignments whose seed identifies the playlist.
    fn new(corpus: &Corpus, assignments: &[(usize, usize)]) -> (Self, Vec<(usize, usize)>) {
        let mut count: HashMap<Vec<SongId>, usize> = HashMap::new();
        for p in &corpus.playlists {
            for n_seed in 1..p.len() {
                *count.entry(p.songs[..n_seed].to_vec()).or_default() += 1;
            }
        }
        let mut truth = HashMap::new();
        let mut kept = Vec::new();
        for &(i, n_seed) in assignments {
            let (s, t) = mask_playlist(&corpus.playlists[i].songs, n_seed).unwrap();
            if count[&s] == 1 {
                truth.insert(s, t);
                kept.push((i, n_seed));
            }
        }
        let o = Oracle {
            truth,
            n_songs: corpus.n_songs(),
        };
        (o, kept)
    }
}

impl Recommender for Oracle {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn recommend(&self, seed: &[SongId], n_reco: usize) -> Result<RankedList> {
        let mut ids = self.truth[seed].clone();
        for s in 0..self.n_songs {
            if ids.len() == n_reco {
                break;
            }
            if !ids.contains(&s) && !seed.contains(&s) {
                ids.push(s);
            }
        }
        ids.truncate(n_reco);
        Ok(RankedList {
            scores: vec![0.0; ids.len()],
            song_ids: ids,
        })
    }
}

#[test]
fn oracle_recommender_attains_the_bounds() {
    let c = corpus();
    let cfg = EvalConfig {
        playlists_per_bucket: 20,
        n_reco: 100,
        ..Default::default()
    };
    let (oracle, kept) = Oracle::new(&c, &test_assignments(&c, Role::Test, &cfg));
    assert!(kept.len() > 150);
    let (outcomes, skipped) = evaluate_assignments(&oracle, &c, &kept, 100, NdcgVariant::Standard).unwrap();
    let report = EvalReport::build("oracle".into(), &cfg, &c, &outcomes, skipped);
    let m = &report.aggregate;
    assert_eq!(m.recall.mean, 100.0);
    assert_eq!(m.clicks.mean, 0.0);
    assert_eq!(m.r_precision.mean, 100.0);
    assert!((m.ndcg.mean - 100.0).abs() < 1e-9);
    for o in &outcomes {
        let (_, t) = mask_playlist(&c.playlists[o.playlist].songs, o.n_seed).unwrap();
        assert_eq!(o.precision, t.len() as f64 / 100.0);
        assert_eq!((o.recall, o.clicks, o.r_precision), (1.0, 0.0, 1.0));
    }
}

#[test]
fn random_recommender_recall_matches_hypergeometric_mean() {
    // with |G| truth songs among N − n_seed candidates, a uniform list of
    // n_reco songs has expected recall n_reco / (N − n_seed)
    let c = corpus();
    let cfg = EvalConfig {
        n_seed_values: vec![1],
        playlists_per_bucket: 200,
        n_reco: 500,
        ..Default::default()
    };
    let rec = RandomRecommender { n_songs: 1000, seed: 3 };
    let (outcomes, _) = evaluate_assignments(&rec, &c, &test_assignments(&c, Role::Test, &cfg), 500, NdcgVariant::Standard).unwrap();
    let recall = outcomes.iter().map(|o| o.recall).sum::<f64>() / outcomes.len() as f64;
    assert!((recall - 500.0 / 999.0).abs() < 0.03, "recall {recall}");
}

#[test]
fn same_inputs_same_report() {
    let c = corpus();
    let cfg = EvalConfig {
        playlists_per_bucket: 10,
        n_reco: 50,
        ..Default::default()
    };
    let idx = KnnIndex::from_corpus(&c);
    let rec = SknnRecommender {
        index: &idx,
        k_neighbors: 50,
        scheme: KnnScheme::Vsknn,
    };
    let a = evaluate_model(&rec, &c, Role::Test, &cfg).unwrap();
    let b = evaluate_model(&rec, &c, Role::Test, &cfg).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert!(a.aggregate.ndcg.mean > 0.0);
    assert!(!a.to_json().contains("mean_ms"));
    let csv = a.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 12);
    assert!(csv.lines().next().unwrap().contains("p99_ms"));
}

#[test]
fn buckets_without_playlists_are_absent() {
    let c = corpus();
    let cfg = EvalConfig {
        n_seed_values: vec![1, 40],
        playlists_per_bucket: 10,
        n_reco: 20,
        ..Default::default()
    };
    let r = evaluate_model(&RandomRecommender { n_songs: 1000, seed: 0 }, &c, Role::Test, &cfg).unwrap();
    assert!(r.buckets[0].metrics.is_some());
    assert!(r.buckets[1].metrics.is_none());
    assert!(r.series_json().contains("null"));
    let dir = tempfile::tempdir().unwrap();
    write_report(dir.path(), &r).unwrap();
    for f in ["report.json", "report.csv", "series.json", "timing.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn validation_assignment_is_fixed_and_in_range() {
    let c = corpus();
    let val = c.indices_with_role(Role::Validation);
    let a = validation_assignments(&c, &val, 9);
    assert_eq!(a, validation_assignments(&c, &val, 9));
    assert_eq!(a.len(), val.len());
    for (i, n) in a {
        assert!((1..=10).contains(&n) && n < c.playlists[i].len());
    }
}

#[test]
fn stat_interval_uses_sample_deviation() {
    let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(s.mean, 2.5);
    let sd = (5.0f64 / 3.0).sqrt();
    assert!((s.ci95 - 1.96 * sd / 2.0).abs() < 1e-12);
    let t = TimingStats::of(&(1..=100).map(|x| x as f64).collect::<Vec<_>>());
    assert_eq!((t.p50_ms, t.p99_ms, t.max_ms), (50.0, 99.0, 100.0));
}
