//! Path-count and routing ablation grid.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::Model;
use crate::scenes::Sample;
use crate::simu::{path_kinds, PerturbKind};
use crate::train::{train, TrainOutcome};

/// One grid row: a path count and a fusion mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Variant {
    pub n_paths: usize,
    /// `None` for a single path, where routing does not apply.
    pub tarm: Option<bool>,
}

impl Variant {
    pub fn has(&self, kind: PerturbKind) -> bool {
        PerturbKind::ORDER[..self.n_paths].contains(&kind)
    }

    /// Training configuration for this row and seed; nothing else changes.
    pub fn config(&self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut cfg = base.clone();
        cfg.simu.n_paths = self.n_paths;
        cfg.simu.tarm = self.tarm.unwrap_or(base.simu.tarm);
        cfg.train.seed = seed;
        cfg
    }
}

/// Rows for the requested path counts: one for `N = 1`, uniform then routed otherwise.
pub fn variants(paths: &[usize]) -> Result<Vec<Variant>> {
    let mut out = Vec::new();
    for &n in paths {
        path_kinds(n)?;
        if n == 1 {
            out.push(Variant { n_paths: 1, tarm: None });
        } else {
            out.push(Variant { n_paths: n, tarm: Some(false) });
            out.push(Variant { n_paths: n, tarm: Some(true) });
        }
    }
    if out.is_empty() {
        return Err(Error::Config("ablation needs at least one path count".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<MetricsReport>,
    pub median: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationGrid {
    pub config_hash: String,
    pub threshold: f64,
    pub rows: Vec<AblationRow>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Field-wise median of reports.
pub fn median_report(reports: &[MetricsReport]) -> MetricsReport {
    let m = |f: fn(&MetricsReport) -> f64| median(reports.iter().map(f).collect());
    MetricsReport {
        precision: m(|r| r.precision),
        recall: m(|r| r.recall),
        f1: m(|r| r.f1),
        geo_cm: m(|r| r.geo_cm),
        mpve_mm: m(|r| r.mpve_mm),
        mpjpe_mm: m(|r| r.mpjpe_mm),
        pa_mpjpe_mm: m(|r| r.pa_mpjpe_mm),
        n_samples: reports.first().map_or(0, |r| r.n_samples),
        geo_skipped: reports.first().map_or(0, |r| r.geo_skipped),
    }
}

/// Trains and evaluates every `(variant, seed)` cell in order. `on_cell` sees
/// each finished training before its metrics are computed.
pub fn run_ablation(
    base: &RunConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    paths: &[usize],
    seeds: &[u64],
    mut on_cell: impl FnMut(&Variant, u64, &TrainOutcome),
) -> Result<AblationGrid> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let threshold = base.train.threshold;
    let mut rows = Vec::new();
    for variant in variants(paths)? {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let model = Model::new(variant.config(base, seed))?;
            let outcome = train(&model, train_set, val_set, None, |_| {})?;
            on_cell(&variant, seed, &outcome);
            per_seed.push(evaluate(&model, &outcome.best.params, val_set, threshold)?);
        }
        rows.push(AblationRow {
            variant,
            seeds: seeds.to_vec(),
            median: median_report(&per_seed),
            per_seed,
        });
    }
    Ok(AblationGrid {
        config_hash: base.hash(),
        threshold,
        rows,
    })
}

impl AblationGrid {
    /// Fixed-width table with perturbation columns, medians and per-seed F1/geo.
    pub fn to_text(&self) -> String {
        let tick = |b: bool| if b { "x" } else { "-" };
        let mut out = String::new();
        let _ = writeln!(out, "config_hash={}", self.config_hash);
        let _ = writeln!(out, "threshold={}", self.threshold);
        let _ = writeln!(
            out,
            "{:>3} {:>4} {:>7} {:>5} {:>7} {:>6} {:>6} {:>6} {:>8}  per-seed f1 / geo",
            "N", "TARM", "Dropout", "Noise", "Masking", "P", "R", "F1", "geo(cm)"
        );
        for r in &self.rows {
            let v = r.variant;
            let tarm = match v.tarm {
                None => "n/a",
                Some(true) => "x",
                Some(false) => "-",
            };
            let seeds: Vec<String> = r
                .seeds
                .iter()
                .zip(&r.per_seed)
                .map(|(s, m)| format!("s{s}:{:.4}/{:.3}", m.f1, m.geo_cm))
                .collect();
            let _ = writeln!(
                out,
                "{:>3} {:>4} {:>7} {:>5} {:>7} {:>6.4} {:>6.4} {:>6.4} {:>8.3}  {}",
                v.n_paths,
                tarm,
                tick(v.has(PerturbKind::SpatialDropout)),
                tick(v.has(PerturbKind::EmbeddingNoise)),
                tick(v.has(PerturbKind::TokenMasking)),
                r.median.precision,
                r.median.recall,
                r.median.f1,
                r.median.geo_cm,
                seeds.join(" ")
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid is plain data")
    }

    pub fn row(&self, n_paths: usize, tarm: Option<bool>) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant.n_paths == n_paths && r.variant.tarm == tarm)
    }
}
