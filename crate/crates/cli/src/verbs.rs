use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};

use rta_core::corpus::{load_mpd_slices, read_corpus, split_dataset, synthetic_corpus, write_corpus, Corpus, CorpusManifest, Role};
use rta_core::evalsuite::{evaluate_model, write_report, KnnIndex, KnnScheme, RandomRecommender, Recommender, RtaRecommender, SknnRecommender};
use rta_core::init::{read_embedding_store, training_occurrences, wrmf_factorize, write_embedding_store, EmbeddingStore};
use rta_core::model::RtaModel;
use rta_core::numerics::Rng;
use rta_core::represent::{precompute_catalog, write_catalog_matrix, SongMeta};
use rta_core::train::{fit, read_checkpoint, resume, FitOptions, FitOutcome, BEST_CHECKPOINT, LAST_CHECKPOINT};
use rta_core::RtaError;
use rta_serve::{CATALOG_FILE, MODEL_FILE, SONGS_FILE};

use crate::config::{EvalRole, RecommenderKind};
use crate::{bench, latest_run_dir, Cli, CliError, RunConfig, Verb};

pub const CORPUS_FILE: &str = "corpus.rtac";
pub const EMBEDDINGS_FILE: &str = "embeddings.rtae";

pub(crate) struct Plan {
    /// Set when `train --resume` continues an existing run directory.
    pub reuse_dir: Option<PathBuf>,
}

fn need<'a>(value: &'a Option<PathBuf>, key: &str, verb: Verb) -> Result<&'a Path, CliError> {
    let p = value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("`{}` needs `{key}` in the config", verb.name())))?;
    if !p.exists() {
        return Err(CliError::Usage(format!("{key} = {} does not exist", p.display())));
    }
    Ok(p)
}

/// Checks the verb's inputs before anything is written.
pub(crate) fn plan(cli: &Cli, cfg: &RunConfig) -> Result<Plan, CliError> {
    let verb = cli.verb;
    let check = |r: rta_core::Result<()>| r.map_err(|e| CliError::Usage(e.to_string()));
    let mut reuse_dir = None;
    match verb {
        Verb::Ingest => match (&cfg.data.mpd_dir, &cfg.data.synthetic) {
            (Some(_), Some(_)) => return Err(CliError::Usage("set only one of data.mpd_dir and data.synthetic".into())),
            (None, None) => return Err(CliError::Usage("`ingest` needs data.mpd_dir or data.synthetic".into())),
            (Some(_), None) => {
                need(&cfg.data.mpd_dir, "data.mpd_dir", verb)?;
            }
            (None, Some(_)) => {}
        },
        Verb::WrmfInit => {
            need(&cfg.data.corpus, "data.corpus", verb)?;
            check(cfg.wrmf.validate())?;
        }
        Verb::Train => {
            need(&cfg.data.corpus, "data.corpus", verb)?;
            need(&cfg.init.embeddings, "init.embeddings", verb)?;
            check(cfg.model.model_config().validate())?;
            check(cfg.train.validate())?;
            if cli.resume {
                let dir = latest_run_dir(&cfg.run.out_root, Verb::Train, &cfg.hash(), LAST_CHECKPOINT).ok_or_else(|| {
                    CliError::Usage(format!(
                        "--resume: no train run with config hash {} under {}",
                        cfg.hash(),
                        cfg.run.out_root.display()
                    ))
                })?;
                reuse_dir = Some(dir);
            }
        }
        Verb::Precompute => {
            need(&cfg.precompute.checkpoint, "precompute.checkpoint", verb)?;
            if cfg.data.corpus.is_some() {
                need(&cfg.data.corpus, "data.corpus", verb)?;
            }
        }
        Verb::Evaluate => {
            need(&cfg.data.corpus, "data.corpus", verb)?;
            check(cfg.eval.validate())?;
            if cfg.evaluate.recommender == RecommenderKind::Model {
                if cfg.evaluate.checkpoint.is_some() {
                    need(&cfg.evaluate.checkpoint, "evaluate.checkpoint", verb)?;
                } else {
                    need(&cfg.init.embeddings, "init.embeddings", verb)?;
                    check(cfg.model.model_config().validate())?;
                }
            }
        }
        Verb::Serve => {
            check(cfg.serve.validate())?;
            if !cfg.serve.artifact_dir.is_dir() {
                return Err(CliError::Usage(format!("serve.artifact_dir = {} is not a directory", cfg.serve.artifact_dir.display())));
            }
        }
        Verb::BenchLatency => bench::validate(&cfg.bench)?,
    }
    Ok(Plan { reuse_dir })
}

pub(crate) fn execute(cli: &Cli, cfg: &RunConfig, run_dir: &Path) -> Result<Value, CliError> {
    match cli.verb {
        Verb::Ingest => ingest(cfg, run_dir),
        Verb::WrmfInit => wrmf_init(cfg, run_dir),
        Verb::Train => train(cli, cfg, run_dir),
        Verb::Precompute => precompute(cfg, run_dir),
        Verb::Evaluate => evaluate(cfg, run_dir),
        Verb::Serve => {
            rta_serve::serve(cfg.serve.clone())?;
            Ok(json!({"stopped": true}))
        }
        Verb::BenchLatency => {
            let report = bench::bench_latency(&cfg.bench)?;
            write_json(&run_dir.join("bench.json"), &serde_json::to_value(&report).expect("report serializes"))?;
            Ok(serde_json::to_value(&report).expect("report serializes"))
        }
    }
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json serializes") + "\n";
    std::fs::write(path, text).map_err(|e| RtaError::io(path, e).into())
}

fn write_song_ids(path: &Path, corpus: &Corpus) -> Result<(), CliError> {
    let mut text = corpus.catalog.uris.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| RtaError::io(path, e).into())
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus, CliError> {
    Ok(read_corpus(cfg.data.corpus.as_deref().expect("checked by plan"))?)
}

fn ingest(cfg: &RunConfig, run_dir: &Path) -> Result<Value, CliError> {
    let (mut corpus, diagnostics) = match (&cfg.data.mpd_dir, &cfg.data.synthetic) {
        (Some(dir), _) => {
            let (c, d) = load_mpd_slices(dir, cfg.data.max_len, cfg.data.alpha_pop)?;
            (c, Some(d))
        }
        (None, Some(spec)) => (synthetic_corpus(spec)?.corpus, None),
        (None, None) => unreachable!("checked by plan"),
    };
    let split = split_dataset(&corpus, &cfg.split)?;
    corpus.apply_split(&split)?;
    write_corpus(&run_dir.join(CORPUS_FILE), &corpus)?;
    write_song_ids(&run_dir.join(SONGS_FILE), &corpus)?;
    let summary = json!({
        "corpus": CORPUS_FILE,
        "manifest": CorpusManifest::of(&corpus),
        "diagnostics": diagnostics,
    });
    write_json(&run_dir.join("ingest.json"), &summary)?;
    Ok(summary)
}

fn wrmf_init(cfg: &RunConfig, run_dir: &Path) -> Result<Value, CliError> {
    let corpus = load_corpus(cfg)?;
    let factors = wrmf_factorize(&training_occurrences(&corpus)?, &cfg.wrmf)?;
    let store = EmbeddingStore::from_song_vectors(factors.song_vectors, &corpus.catalog)?;
    if !store.is_finite() {
        return Err(RtaError::Domain("WRMF produced non-finite song vectors".into()).into());
    }
    write_embedding_store(&run_dir.join(EMBEDDINGS_FILE), &store)?;
    let summary = json!({
        "embeddings": EMBEDDINGS_FILE,
        "dim": store.dim,
        "songs": store.song_vectors.rows(),
        "objective_history": factors.objective_history,
    });
    write_json(&run_dir.join("wrmf.json"), &summary)?;
    Ok(summary)
}

fn init_model(cfg: &RunConfig, corpus: &Corpus) -> Result<RtaModel, CliError> {
    let store = read_embedding_store(cfg.init.embeddings.as_deref().expect("checked by plan"))?;
    let model_cfg = cfg.model.model_config();
    if store.dim != model_cfg.dim {
        return Err(RtaError::Config(format!("embeddings have dimension {} but model.dim = {}", store.dim, model_cfg.dim)).into());
    }
    if store.song_vectors.rows() != corpus.n_songs() {
        return Err(RtaError::Config(format!(
            "embeddings cover {} songs but the corpus has {}",
            store.song_vectors.rows(),
            corpus.n_songs()
        ))
        .into());
    }
    let meta = Arc::new(SongMeta::new(&corpus.catalog, &store));
    Ok(RtaModel::init(&model_cfg, &store, meta, &mut Rng::seed_from(cfg.model.rng_seed))?)
}

fn train(cli: &Cli, cfg: &RunConfig, run_dir: &Path) -> Result<Value, CliError> {
    let corpus = load_corpus(cfg)?;
    let options = FitOptions {
        out_dir: Some(run_dir.to_path_buf()),
        stop_after_epoch: cli.stop_after_epoch,
    };
    let outcome: FitOutcome = if cli.resume {
        resume(run_dir, &corpus, &cfg.train, &options)?
    } else {
        fit(init_model(cfg, &corpus)?, &corpus, &cfg.train, &options)?
    };
    let s = &outcome.state;
    let summary = json!({
        "model": outcome.best.config.label(),
        "epochs": s.epoch,
        "finished": s.finished,
        "initial_val_ndcg": s.initial_ndcg,
        "best_val_ndcg": s.best_ndcg,
        "best_epoch": s.best_epoch,
        "best_checkpoint": BEST_CHECKPOINT,
        "best_sha256": outcome.best_hash,
        "history": s.history,
    });
    write_json(&run_dir.join("fit.json"), &summary)?;
    Ok(summary)
}

fn precompute(cfg: &RunConfig, run_dir: &Path) -> Result<Value, CliError> {
    let path = cfg.precompute.checkpoint.as_deref().expect("checked by plan");
    let bytes = std::fs::read(path).map_err(|e| RtaError::io(path, e))?;
    let (checkpoint, hash) = read_checkpoint(path)?;
    let model = checkpoint.into_model()?;
    let catalog = precompute_catalog(&model.representer, &model.params, &hash, true)?;
    let model_out = run_dir.join(MODEL_FILE);
    std::fs::write(&model_out, &bytes).map_err(|e| RtaError::io(&model_out, e))?;
    write_catalog_matrix(&run_dir.join(CATALOG_FILE), &catalog)?;
    if cfg.data.corpus.is_some() {
        let corpus = load_corpus(cfg)?;
        if corpus.n_songs() != catalog.len() {
            return Err(RtaError::Config(format!("corpus has {} songs but the checkpoint has {}", corpus.n_songs(), catalog.len())).into());
        }
        write_song_ids(&run_dir.join(SONGS_FILE), &corpus)?;
    }
    Ok(json!({
        "artifact_dir": run_dir,
        "model": model.config.label(),
        "checkpoint_sha256": hash,
        "catalog_size": catalog.len(),
    }))
}

fn evaluate(cfg: &RunConfig, run_dir: &Path) -> Result<Value, CliError> {
    let corpus = load_corpus(cfg)?;
    let role = match cfg.evaluate.role {
        EvalRole::Validation => Role::Validation,
        EvalRole::Test => Role::Test,
    };
    let report = match cfg.evaluate.recommender {
        RecommenderKind::Model => {
            let (model, hash) = match &cfg.evaluate.checkpoint {
                Some(p) => {
                    let (c, h) = read_checkpoint(p)?;
                    (c.into_model()?, h)
                }
                None => (init_model(cfg, &corpus)?, "untrained".to_string()),
            };
            let catalog = model.catalog(&hash)?;
            let rec = RtaRecommender {
                name: model.config.label(),
                aggregator: &model.aggregator,
                params: &model.params,
                catalog: &catalog.vectors,
            };
            evaluate_model(&rec, &corpus, role, &cfg.eval)?
        }
        RecommenderKind::Sknn | RecommenderKind::Vsknn => {
            let index = KnnIndex::from_corpus(&corpus);
            let scheme = if cfg.evaluate.recommender == RecommenderKind::Sknn { KnnScheme::Sknn } else { KnnScheme::Vsknn };
            let rec = SknnRecommender {
                index: &index,
                k_neighbors: cfg.evaluate.k_neighbors,
                scheme,
            };
            evaluate_model(&rec as &dyn Recommender, &corpus, role, &cfg.eval)?
        }
        RecommenderKind::Random => {
            let rec = RandomRecommender {
                n_songs: corpus.n_songs(),
                seed: cfg.eval.rng_seed,
            };
            evaluate_model(&rec, &corpus, role, &cfg.eval)?
        }
    };
    write_report(run_dir, &report)?;
    Ok(json!({
        "model": report.model,
        "playlists": report.aggregate.n_playlists,
        "ndcg": report.aggregate.ndcg.mean,
        "recall": report.aggregate.recall.mean,
        "r_precision": report.aggregate.r_precision.mean,
        "clicks": report.aggregate.clicks.mean,
    }))
}
