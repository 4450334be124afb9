//! Ranking metrics and pruning diagnostics.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::ItemId;
use crate::decode::PruningCause;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("ranked list contains item {0} twice")]
    Duplicate(ItemId),
    #[error("K must be at least 1")]
    ZeroK,
    #[error("results come from different model snapshots or beam widths")]
    MixedSnapshots,
    #[error("no evaluation results")]
    Empty,
    #[error("report export: {0}")]
    Io(String),
}

/// Outcome of one evaluation instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub user: usize,
    pub positive: ItemId,
    /// 1-based rank of the positive among all items by overall probability.
    pub exhaustive_rank: usize,
    /// 1-based rank in the beam's final list, absent if pruned.
    pub beam_rank: Option<usize>,
    pub cause: PruningCause,
    pub pruned_step: Option<usize>,
    pub beam_width: usize,
    pub model_digest: String,
}

impl EvalResult {
    pub fn ndcg(&self, k: usize) -> f64 {
        match self.beam_rank {
            Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
            _ => 0.0,
        }
    }

    pub fn hit(&self, k: usize) -> f64 {
        match self.beam_rank {
            Some(r) if r <= k => 1.0,
            _ => 0.0,
        }
    }
}

fn check_list(ranked: &[ItemId], k: usize) -> Result<(), MetricsError> {
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    let mut seen = HashSet::new();
    for &i in ranked {
        if !seen.insert(i) {
            return Err(MetricsError::Duplicate(i));
        }
    }
    Ok(())
}

pub fn ndcg_at_k(ranked: &[ItemId], positive: ItemId, k: usize) -> Result<f64, MetricsError> {
    check_list(ranked, k)?;
    Ok(match ranked.iter().take(k).position(|&i| i == positive) {
        Some(p) => 1.0 / ((p + 2) as f64).log2(),
        None => 0.0,
    })
}

pub fn hit_ratio_at_k(ranked: &[ItemId], positive: ItemId, k: usize) -> Result<f64, MetricsError> {
    check_list(ranked, k)?;
    Ok(if ranked.iter().take(k).any(|&i| i == positive) { 1.0 } else { 0.0 })
}

/// A ratio that may be undefined, with the size of its denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: Option<f64>,
    pub count: usize,
}

impl Rate {
    fn of(num: usize, den: usize) -> Self {
        Self {
            value: (den > 0).then(|| num as f64 / den as f64),
            count: den,
        }
    }
}

fn same_snapshot(results: &[EvalResult], b: Option<usize>) -> Result<(), MetricsError> {
    let Some(first) = results.first() else { return Ok(()) };
    let ok = results.iter().all(|r| {
        r.model_digest == first.model_digest
            && r.beam_width == first.beam_width
            && b.is_none_or(|b| r.beam_width == b)
    });
    if ok {
        Ok(())
    } else {
        Err(MetricsError::MixedSnapshots)
    }
}

/// Among positives with exhaustive rank <= K, the fraction missing from the
/// beam's final list. Pooled over instances.
pub fn pruning_rate_at_k(results: &[EvalResult], b: usize, k: usize) -> Result<Rate, MetricsError> {
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    same_snapshot(results, Some(b))?;
    let qualifying = results.iter().filter(|r| r.exhaustive_rank <= k);
    let (mut den, mut num) = (0, 0);
    for r in qualifying {
        den += 1;
        if r.beam_rank.is_none() {
            num += 1;
        }
    }
    Ok(Rate::of(num, den))
}

/// Share of pruned positives whose pruning is a necessary-condition
/// violation.
pub fn violation_proportion(results: &[EvalResult]) -> Rate {
    let nv = results
        .iter()
        .filter(|r| r.cause == PruningCause::NecessaryViolation)
        .count();
    let gp = results
        .iter()
        .filter(|r| r.cause == PruningCause::GlobalPruned)
        .count();
    Rate::of(nv, nv + gp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub k: usize,
    pub ndcg: f64,
    pub hr: f64,
    pub pr: Rate,
    /// Cause split over pruned positives with exhaustive rank <= K.
    pub prop: Rate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: String,
    pub seed: u64,
    pub model_digest: String,
    pub beam_width: usize,
    pub num_results: usize,
    pub rows: Vec<ReportRow>,
    /// Mean training epoch wall time; kept apart so reports can be compared
    /// with timing excluded.
    pub epoch_time_s: Option<f64>,
    pub results: Vec<EvalResult>,
}

pub fn aggregate_report(
    results: &[EvalResult],
    ks: &[usize],
    method: &str,
    seed: u64,
) -> Result<ExperimentReport, MetricsError> {
    let first = results.first().ok_or(MetricsError::Empty)?;
    same_snapshot(results, None)?;
    let n = results.len() as f64;
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        if k == 0 {
            return Err(MetricsError::ZeroK);
        }
        let ndcg = results.iter().map(|r| r.ndcg(k)).sum::<f64>() / n;
        let hr = results.iter().map(|r| r.hit(k)).sum::<f64>() / n;
        let pr = pruning_rate_at_k(results, first.beam_width, k)?;
        let qualifying: Vec<EvalResult> = results
            .iter()
            .filter(|r| r.exhaustive_rank <= k)
            .cloned()
            .collect();
        rows.push(ReportRow {
            k,
            ndcg,
            hr,
            pr,
            prop: violation_proportion(&qualifying),
        });
    }
    Ok(ExperimentReport {
        method: method.to_string(),
        seed,
        model_digest: first.model_digest.clone(),
        beam_width: first.beam_width,
        num_results: results.len(),
        rows,
        epoch_time_s: None,
        results: results.to_vec(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub const CSV_HEADER: [&str; 8] = ["method", "seed", "K", "ndcg", "hr", "pr", "prop", "epoch_time_s"];

/// Writes one CSV row per (report, K).
pub fn write_csv<W: Write>(reports: &[ExperimentReport], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| MetricsError::Io(e.to_string());
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in reports {
        for row in &r.rows {
            w.write_record([
                r.method.clone(),
                r.seed.to_string(),
                row.k.to_string(),
                format!("{}", row.ndcg),
                format!("{}", row.hr),
                opt(row.pr.value),
                opt(row.prop.value),
                opt(r.epoch_time_s),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| MetricsError::Io(e.to_string()))
}

/// CSV and JSON mirror under `dir` as `{stem}.csv` / `{stem}.json`.
pub fn export(reports: &[ExperimentReport], dir: &Path, stem: &str) -> Result<(), MetricsError> {
    let io = |e: std::io::Error| MetricsError::Io(e.to_string());
    std::fs::create_dir_all(dir).map_err(io)?;
    let f = std::fs::File::create(dir.join(format!("{stem}.csv"))).map_err(io)?;
    write_csv(reports, f)?;
    let json = serde_json::to_string_pretty(reports).map_err(|e| MetricsError::Io(e.to_string()))?;
    std::fs::write(dir.join(format!("{stem}.json")), json).map_err(io)
}
