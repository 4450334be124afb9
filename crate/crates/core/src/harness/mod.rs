//! Data preparation, training, evaluation and experiment orchestration.

pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod synthetic;
pub mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::catalog::{Catalog, CatalogError};
use crate::decode::{beam_search, BeamTrace, DecodeConfig, DecodeError};
use crate::metrics::{aggregate_report, export, ExperimentReport, MetricsError};
use crate::objectives::ObjectiveError;
use crate::par::Exec;
use crate::seqmodel::ModelError;

pub use config::{DatasetSpec, ExperimentConfig, Objective};
pub use data::{Dataset, Instance, InteractionLog, Split};
pub use train::{Checkpoint, History};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("training diverged: non-finite loss in epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Validation(_) => 1,
            _ => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for HarnessError {
            fn from(e: $t) -> Self {
                HarnessError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(ModelError, DecodeError, ObjectiveError, MetricsError, AutodiffError, std::io::Error);

impl From<CatalogError> for HarnessError {
    fn from(e: CatalogError) -> Self {
        HarnessError::Validation(e.to_string())
    }
}

pub fn decode_config(config: &ExperimentConfig, catalog: &Catalog) -> DecodeConfig {
    DecodeConfig {
        beam_width: config.decode.beam_width,
        max_steps: catalog.max_item_len(),
        constrained: true,
        length_normalization: config.decode.length_normalization,
    }
}

/// File layout under an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn catalog_csv(&self) -> PathBuf {
        self.data_dir().join("catalog.csv")
    }

    pub fn interactions_csv(&self) -> PathBuf {
        self.data_dir().join("interactions.csv")
    }

    pub fn dataset_json(&self) -> PathBuf {
        self.data_dir().join("dataset.json")
    }

    pub fn run_dir(&self, method: &str, seed: u64) -> PathBuf {
        self.root.join("runs").join(format!("{method}-seed{seed}"))
    }

    pub fn checkpoint_dir(&self, method: &str, seed: u64) -> PathBuf {
        self.run_dir(method, seed).join("checkpoint")
    }
}

fn source_paths(config: &ExperimentConfig, layout: &Layout) -> (PathBuf, PathBuf) {
    match &config.dataset {
        DatasetSpec::Csv { catalog, interactions } => (catalog.clone(), interactions.clone()),
        DatasetSpec::Synthetic(_) => (layout.catalog_csv(), layout.interactions_csv()),
    }
}

/// Writes the synthetic catalog and interaction log.
pub fn gen_data(config: &ExperimentConfig, layout: &Layout) -> Result<(), HarnessError> {
    let DatasetSpec::Synthetic(spec) = &config.dataset else {
        return Err(HarnessError::Validation("gen-data needs a synthetic dataset spec".into()));
    };
    let (titles, log) = synthetic::generate_synthetic(spec)?;
    let catalog = Catalog::build(&titles, config.tokenization)?;
    std::fs::create_dir_all(layout.data_dir())?;
    catalog.write_csv(&layout.catalog_csv())?;
    log.write_csv(&layout.interactions_csv())?;
    Ok(())
}

/// 5-core filtering, sliding windows and the chronological split.
pub fn prepare(config: &ExperimentConfig, layout: &Layout) -> Result<(Catalog, Dataset), HarnessError> {
    let (cat_path, log_path) = source_paths(config, layout);
    for p in [&cat_path, &log_path] {
        if !p.exists() {
            return Err(HarnessError::Validation(format!("missing input {}", p.display())));
        }
    }
    let catalog = Catalog::read_csv(&cat_path, config.tokenization)?;
    let log = InteractionLog::read_csv(&log_path)?;
    let filtered = data::k_core(&log, 5);
    let dataset = data::make_instances(&filtered, config.window, &catalog)?;
    std::fs::create_dir_all(layout.data_dir())?;
    dataset.save(&layout.dataset_json())?;
    Ok((catalog, dataset))
}

pub fn load_prepared(config: &ExperimentConfig, layout: &Layout) -> Result<(Catalog, Dataset), HarnessError> {
    let (cat_path, _) = source_paths(config, layout);
    let catalog = Catalog::read_csv(&cat_path, config.tokenization)?;
    let dataset = Dataset::load(&layout.dataset_json())?;
    if dataset.catalog_digest != catalog.digest() {
        return Err(HarnessError::Validation("dataset and catalog digests differ".into()));
    }
    Ok((catalog, dataset))
}

/// Generates (if synthetic and missing) and prepares the data.
pub fn ensure_data(config: &ExperimentConfig, layout: &Layout) -> Result<(Catalog, Dataset), HarnessError> {
    if layout.dataset_json().exists() {
        if let Ok(d) = load_prepared(config, layout) {
            return Ok(d);
        }
    }
    if matches!(config.dataset, DatasetSpec::Synthetic(_)) && !layout.catalog_csv().exists() {
        gen_data(config, layout)?;
    }
    prepare(config, layout)
}

pub fn run_train(
    config: &ExperimentConfig,
    layout: &Layout,
    catalog: &Catalog,
    dataset: &Dataset,
    seed: u64,
    exec: Exec,
) -> Result<Checkpoint, HarnessError> {
    let out = train::train(config, catalog, dataset, seed, exec)?;
    let dir = layout.checkpoint_dir(&config.method(), seed);
    out.best.save(&dir)?;
    Ok(out.best)
}

pub fn evaluate_checkpoint(
    config: &ExperimentConfig,
    catalog: &Catalog,
    dataset: &Dataset,
    ckpt: &Checkpoint,
    split: Split,
    exec: Exec,
) -> Result<ExperimentReport, HarnessError> {
    if ckpt.catalog_digest != catalog.digest() {
        return Err(HarnessError::Validation("checkpoint was trained on a different catalog".into()));
    }
    let decode = decode_config(config, catalog);
    let results = eval::evaluate_instances(&ckpt.model, catalog, dataset.split(split), &decode, exec)?;
    let mut report = aggregate_report(&results, &config.ks, &ckpt.method, ckpt.seed)?;
    report.epoch_time_s = ckpt.history.mean_epoch_time();
    Ok(report)
}

/// Beam trace of the first instance of `user` in `split`.
pub fn diagnose(
    config: &ExperimentConfig,
    catalog: &Catalog,
    dataset: &Dataset,
    ckpt: &Checkpoint,
    split: Split,
    user: usize,
) -> Result<BeamTrace, HarnessError> {
    let inst = dataset
        .split(split)
        .iter()
        .find(|i| i.user == user)
        .ok_or_else(|| HarnessError::Validation(format!("user {user} has no instance in split {split:?}")))?;
    let decode = decode_config(config, catalog);
    Ok(beam_search(&ckpt.model, &inst.prompt(catalog), catalog, &decode)?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub k: usize,
    pub seeds: usize,
    pub ndcg_mean: f64,
    pub ndcg_std: f64,
    pub hr_mean: f64,
    pub hr_std: f64,
    pub pr_mean: Option<f64>,
    pub pr_std: Option<f64>,
    pub prop_mean: Option<f64>,
    pub prop_std: Option<f64>,
    pub epoch_time_mean: Option<f64>,
    pub epoch_time_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset_digest: String,
    pub reports: Vec<ExperimentReport>,
    pub summary: Vec<SummaryRow>,
}

impl Comparison {
    pub fn summary_for(&self, method: &str, k: usize) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.method == method && r.k == k)
    }

    pub fn report_for(&self, method: &str, seed: u64) -> Option<&ExperimentReport> {
        self.reports.iter().find(|r| r.method == method && r.seed == seed)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn opt_mean_std(xs: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let vals: Vec<f64> = xs.iter().flatten().copied().collect();
    if vals.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&vals);
        (Some(m), Some(s))
    }
}

pub fn summarize(reports: &[ExperimentReport]) -> Vec<SummaryRow> {
    let mut methods: Vec<String> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let mut rows = Vec::new();
    for m in methods {
        let rs: Vec<&ExperimentReport> = reports.iter().filter(|r| r.method == m).collect();
        for (ki, row0) in rs[0].rows.iter().enumerate() {
            let pick = |f: &dyn Fn(&ExperimentReport) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (ndcg_mean, ndcg_std) = mean_std(&pick(&|r| r.rows[ki].ndcg));
            let (hr_mean, hr_std) = mean_std(&pick(&|r| r.rows[ki].hr));
            let (pr_mean, pr_std) = opt_mean_std(&rs.iter().map(|r| r.rows[ki].pr.value).collect::<Vec<_>>());
            let (prop_mean, prop_std) =
                opt_mean_std(&rs.iter().map(|r| r.rows[ki].prop.value).collect::<Vec<_>>());
            let (epoch_time_mean, epoch_time_std) =
                opt_mean_std(&rs.iter().map(|r| r.epoch_time_s).collect::<Vec<_>>());
            rows.push(SummaryRow {
                method: m.clone(),
                k: row0.k,
                seeds: rs.len(),
                ndcg_mean,
                ndcg_std,
                hr_mean,
                hr_std,
                pr_mean,
                pr_std,
                prop_mean,
                prop_std,
                epoch_time_mean,
                epoch_time_std,
            });
        }
    }
    rows
}

/// Trains and evaluates every config for every seed on one shared dataset.
pub fn compare(
    configs: &[ExperimentConfig],
    seeds: &[u64],
    layout: &Layout,
    exec: Exec,
) -> Result<Comparison, HarnessError> {
    let first = configs
        .first()
        .ok_or_else(|| HarnessError::Validation("compare needs at least one config".into()))?;
    if seeds.is_empty() {
        return Err(HarnessError::Validation("compare needs at least one seed".into()));
    }
    for c in configs {
        c.validate()?;
        if c.dataset_digest() != first.dataset_digest() || c.decode != first.decode || c.ks != first.ks {
            return Err(HarnessError::Validation(
                "compared configs must share dataset, decoding and K list".into(),
            ));
        }
    }
    let (catalog, dataset) = ensure_data(first, layout)?;
    let mut reports = Vec::new();
    for c in configs {
        for &seed in seeds {
            let ckpt = run_train(c, layout, &catalog, &dataset, seed, exec)?;
            let report = evaluate_checkpoint(c, &catalog, &dataset, &ckpt, Split::Test, exec)?;
            export(
                std::slice::from_ref(&report),
                &layout.run_dir(&c.method(), seed),
                "report",
            )?;
            reports.push(report);
        }
    }
    let cmp = Comparison {
        dataset_digest: first.dataset_digest(),
        summary: summarize(&reports),
        reports,
    };
    write_comparison(&cmp, &layout.root)?;
    Ok(cmp)
}

pub fn write_comparison(cmp: &Comparison, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    export(&cmp.reports, dir, "compare")?;
    let mut w = csv::Writer::from_path(dir.join("compare_summary.csv")).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    for r in &cmp.summary {
        w.serialize(r).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    }
    w.flush()?;
    let json = serde_json::to_string_pretty(cmp).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    std::fs::write(dir.join("compare_full.json"), json)?;
    Ok(())
}
