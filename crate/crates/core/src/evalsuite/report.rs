use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{coverage_popularity, list_popularity};
use super::{EvalConfig, NdcgVariant, PlaylistOutcome};
use crate::binio::write_atomic;
use crate::corpus::Corpus;
use crate::error::{Result, RtaError};

/// Mean with a 95% normal-approximation half-width.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub ci95: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Stat::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Stat { mean, ci95: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Stat {
            mean,
            ci95: 1.96 * (var / n as f64).sqrt(),
        }
    }
}

/// Metric set of one bucket. Rates are percentages; clicks are batch counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n_playlists: usize,
    pub precision: Stat,
    pub recall: Stat,
    pub r_precision: Stat,
    pub ndcg: Stat,
    pub clicks: Stat,
    pub coverage: f64,
    pub popularity: Stat,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl TimingStats {
    pub fn of(millis: &[f64]) -> Self {
        if millis.is_empty() {
            return TimingStats::default();
        }
        let mut v = millis.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        TimingStats {
            mean_ms: v.iter().sum::<f64>() / v.len() as f64,
            p50_ms: q(0.5),
            p99_ms: q(0.99),
            max_ms: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub n_seed: usize,
    /// `None` when no playlist was eligible for this bucket.
    pub metrics: Option<MetricSummary>,
    #[serde(skip)]
    pub timing: TimingStats,
}

/// Evaluation results. Timing is kept out of the JSON form so reports of
/// identical runs are byte-identical; it goes to the CSV and `timing.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub n_reco: usize,
    pub ndcg_variant: NdcgVariant,
    pub skipped_playlists: usize,
    pub buckets: Vec<BucketReport>,
    pub aggregate: MetricSummary,
    #[serde(skip)]
    pub timing: TimingStats,
}

fn summarize(outcomes: &[&PlaylistOutcome], corpus: &Corpus, popularity: &[u32]) -> MetricSummary {
    let col = |f: fn(&PlaylistOutcome) -> f64, scale: f64| Stat::of(&outcomes.iter().map(|o| f(o) * scale).collect::<Vec<_>>());
    let (coverage, _) = coverage_popularity(outcomes.iter().map(|o| o.ranked.as_slice()), corpus.n_songs(), popularity);
    MetricSummary {
        n_playlists: outcomes.len(),
        precision: col(|o| o.precision, 100.0),
        recall: col(|o| o.recall, 100.0),
        r_precision: col(|o| o.r_precision, 100.0),
        ndcg: col(|o| o.ndcg, 100.0),
        clicks: col(|o| o.clicks, 1.0),
        coverage,
        popularity: Stat::of(&outcomes.iter().map(|o| list_popularity(&o.ranked, popularity)).collect::<Vec<_>>()),
    }
}

impl EvalReport {
    pub fn build(model: String, config: &EvalConfig, corpus: &Corpus, outcomes: &[PlaylistOutcome], skipped: usize) -> Self {
        let popularity = corpus.catalog.popularity();
        let buckets = config
            .n_seed_values
            .iter()
            .map(|&n_seed| {
                let mine: Vec<&PlaylistOutcome> = outcomes.iter().filter(|o| o.n_seed == n_seed).collect();
                BucketReport {
                    n_seed,
                    metrics: (!mine.is_empty()).then(|| summarize(&mine, corpus, &popularity)),
                    timing: TimingStats::of(&mine.iter().map(|o| o.millis).collect::<Vec<_>>()),
                }
            })
            .collect();
        let all: Vec<&PlaylistOutcome> = outcomes.iter().collect();
        EvalReport {
            model,
            n_reco: config.n_reco,
            ndcg_variant: config.ndcg,
            skipped_playlists: skipped,
            buckets,
            aggregate: summarize(&all, corpus, &popularity),
            timing: TimingStats::of(&outcomes.iter().map(|o| o.millis).collect::<Vec<_>>()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One row per bucket plus an `all` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let rows = self
            .buckets
            .iter()
            .filter_map(|b| b.metrics.as_ref().map(|m| (b.n_seed.to_string(), m, b.timing)))
            .chain(std::iter::once(("all".to_string(), &self.aggregate, self.timing)));
        for (n_seed, m, t) in rows {
            w.serialize(CsvRow {
                model: &self.model,
                n_seed,
                n_playlists: m.n_playlists,
                precision: m.precision.mean,
                precision_ci95: m.precision.ci95,
                recall: m.recall.mean,
                recall_ci95: m.recall.ci95,
                r_precision: m.r_precision.mean,
                r_precision_ci95: m.r_precision.ci95,
                ndcg: m.ndcg.mean,
                ndcg_ci95: m.ndcg.ci95,
                clicks: m.clicks.mean,
                clicks_ci95: m.clicks.ci95,
                coverage: m.coverage,
                popularity: m.popularity.mean,
                popularity_ci95: m.popularity.ci95,
                mean_ms: t.mean_ms,
                p99_ms: t.p99_ms,
            })
            .map_err(|e| RtaError::Internal(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| RtaError::Internal(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| RtaError::Internal(e.to_string()))
    }

    /// Per-`n_seed` columns for plotting, absent buckets as `null`.
    pub fn series_json(&self) -> String {
        let pick = |f: fn(&MetricSummary) -> f64| -> Vec<Option<f64>> { self.buckets.iter().map(|b| b.metrics.as_ref().map(f)).collect() };
        let v = serde_json::json!({
            "model": self.model,
            "n_seed": self.buckets.iter().map(|b| b.n_seed).collect::<Vec<_>>(),
            "precision": pick(|m| m.precision.mean),
            "recall": pick(|m| m.recall.mean),
            "r_precision": pick(|m| m.r_precision.mean),
            "ndcg": pick(|m| m.ndcg.mean),
            "clicks": pick(|m| m.clicks.mean),
            "coverage": pick(|m| m.coverage),
            "popularity": pick(|m| m.popularity.mean),
        });
        serde_json::to_string_pretty(&v).expect("series serializes") + "\n"
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    model: &'a str,
    n_seed: String,
    n_playlists: usize,
    precision: f64,
    precision_ci95: f64,
    recall: f64,
    recall_ci95: f64,
    r_precision: f64,
    r_precision_ci95: f64,
    ndcg: f64,
    ndcg_ci95: f64,
    clicks: f64,
    clicks_ci95: f64,
    coverage: f64,
    popularity: f64,
    popularity_ci95: f64,
    mean_ms: f64,
    p99_ms: f64,
}

/// Writes `report.json`, `report.csv`, `series.json` and `timing.json` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| RtaError::io(dir, e))?;
    write_atomic(&dir.join("report.json"), report.to_json().as_bytes())?;
    write_atomic(&dir.join("report.csv"), report.to_csv()?.as_bytes())?;
    write_atomic(&dir.join("series.json"), report.series_json().as_bytes())?;
    let timing = serde_json::json!({
        "aggregate": report.timing,
        "buckets": report.buckets.iter().map(|b| serde_json::json!({"n_seed": b.n_seed, "timing": b.timing})).collect::<Vec<_>>(),
    });
    write_atomic(&dir.join("timing.json"), (serde_json::to_string_pretty(&timing).expect("timing serializes") + "\n").as_bytes())
}
