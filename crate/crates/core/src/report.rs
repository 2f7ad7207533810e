//! Configuration-level aggregation and heatmap grids.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::stats::{bootstrap_ci, mean, significance_rate, BootstrapCI, StatsError};
use crate::taxonomy::{band, classify, FaithfulnessBand, TaxonomyLabel, Thresholds};

/// The per-example line persisted by an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub example_id: String,
    pub operator: String,
    pub nsr_obs: f64,
    pub win_rate: f64,
    pub effect_size: f64,
    pub p_value: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigId {
    pub dataset: String,
    pub scorer: String,
    pub method: String,
    pub operator: String,
    pub k: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub global: u64,
    pub bootstrap: u64,
    pub infill: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsConfig {
    #[serde(rename = "B")]
    pub b: usize,
    pub alpha: f64,
    pub bootstrap_seed: u64,
    pub thresholds: Thresholds,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            b: crate::DEFAULT_BOOTSTRAP,
            alpha: crate::DEFAULT_ALPHA,
            bootstrap_seed: 0,
            thresholds: Thresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub config: ConfigId,
    pub seeds: Seeds,
    /// Evaluated plus degenerate examples.
    pub n_examples: usize,
    pub n_degenerate: usize,
    pub win_rate: f64,
    pub win_rate_ci: BootstrapCI,
    pub mean_d: f64,
    pub sig_rate: f64,
    pub mean_nsr: f64,
    pub taxonomy: TaxonomyLabel,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReportError {
    #[error("no non-degenerate examples to aggregate")]
    EmptyAggregate,
    #[error("record for {example_id} has operator {got:?}, expected {expected:?}")]
    MixedConfig {
        example_id: String,
        expected: String,
        got: String,
    },
    #[error("two reports map to heatmap cell ({row}, {col})")]
    DuplicateCell { row: String, col: String },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Aggregates the per-example records of one configuration.
///
/// Degenerate examples are counted but excluded from every statistic. The
/// win rate, mean NSR and mean effect size are unweighted means over the
/// remaining examples; the interval is a bootstrap over examples and the
/// significance rate applies BH to their p-values.
pub fn aggregate(
    records: &[ExampleRecord],
    config: ConfigId,
    seeds: Seeds,
    stats: &StatsConfig,
) -> Result<DatasetReport, ReportError> {
    if let Some(r) = records.iter().find(|r| r.operator != config.operator) {
        return Err(ReportError::MixedConfig {
            example_id: r.example_id.clone(),
            expected: config.operator.clone(),
            got: r.operator.clone(),
        });
    }
    let kept: Vec<&ExampleRecord> = records.iter().filter(|r| !r.degenerate).collect();
    if kept.is_empty() {
        return Err(ReportError::EmptyAggregate);
    }
    let wr: Vec<f64> = kept.iter().map(|r| r.win_rate).collect();
    let p: Vec<f64> = kept.iter().map(|r| r.p_value).collect();
    let d: Vec<f64> = kept.iter().map(|r| r.effect_size).collect();
    let nsr: Vec<f64> = kept.iter().map(|r| r.nsr_obs).collect();
    let ci = bootstrap_ci(&wr, stats.b, stats.bootstrap_seed)?;
    let win_rate = mean(&wr);
    Ok(DatasetReport {
        config,
        seeds,
        n_examples: records.len(),
        n_degenerate: records.len() - kept.len(),
        win_rate,
        win_rate_ci: ci,
        mean_d: mean(&d),
        sig_rate: significance_rate(&p, stats.alpha),
        mean_nsr: mean(&nsr),
        taxonomy: classify(win_rate, &stats.thresholds),
    })
}

/// Key used to join reports that differ only by operator.
fn join_key(c: &ConfigId) -> (String, String, String, u64, usize, u64) {
    (
        c.dataset.clone(),
        c.scorer.clone(),
        c.method.clone(),
        c.k.to_bits(),
        c.m,
        c.seed,
    )
}

/// For each report, the delete win rate minus its own win rate, when a
/// delete report with the same dataset, scorer, method, k, M and seed exists.
/// Delete rows themselves get `None`.
pub fn gap_vs_delete(reports: &[DatasetReport]) -> Vec<Option<f64>> {
    let delete: BTreeMap<_, f64> = reports
        .iter()
        .filter(|r| r.config.operator == "delete")
        .map(|r| (join_key(&r.config), r.win_rate))
        .collect();
    reports
        .iter()
        .map(|r| {
            if r.config.operator == "delete" {
                None
            } else {
                delete.get(&join_key(&r.config)).map(|d| d - r.win_rate)
            }
        })
        .collect()
}

/// Sort order for emitted tables.
pub fn table_order(reports: &mut [DatasetReport]) {
    reports.sort_by(|a, b| {
        let ka = (&a.config.dataset, &a.config.scorer, &a.config.method, &a.config.operator);
        let kb = (&b.config.dataset, &b.config.scorer, &b.config.method, &b.config.operator);
        ka.cmp(&kb)
            .then(a.config.k.total_cmp(&b.config.k))
            .then(a.config.m.cmp(&b.config.m))
            .then(a.config.seed.cmp(&b.config.seed))
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Dataset,
    Scorer,
    Method,
    Operator,
    K,
}

impl Field {
    pub fn get(self, c: &ConfigId) -> String {
        match self {
            Field::Dataset => c.dataset.clone(),
            Field::Scorer => c.scorer.clone(),
            Field::Method => c.method.clone(),
            Field::Operator => c.operator.clone(),
            Field::K => alloc::format!("{}", c.k),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dataset" => Some(Field::Dataset),
            "scorer" => Some(Field::Scorer),
            "method" => Some(Field::Method),
            "operator" => Some(Field::Operator),
            "k" => Some(Field::K),
            _ => None,
        }
    }
}

/// Heatmap layout. When explicit key lists are absent, the keys seen in the
/// reports are used in sorted order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapAxes {
    pub row: Field,
    pub col: Field,
    pub rows: Option<Vec<String>>,
    pub cols: Option<Vec<String>>,
}

/// Reason attached to cells with no report.
pub const NO_VALID_OUTPUT: &str = "no valid output";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub row: String,
    pub col: String,
    pub win_rate: Option<f64>,
    pub band: Option<FaithfulnessBand>,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub row_field: Field,
    pub col_field: Field,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// Row-major, `rows.len() x cols.len()`.
    pub cells: Vec<HeatmapCell>,
}

pub fn heatmap(
    reports: &[DatasetReport],
    axes: &HeatmapAxes,
    thresholds: &Thresholds,
) -> Result<Heatmap, ReportError> {
    let mut filled: BTreeMap<(String, String), f64> = BTreeMap::new();
    for r in reports {
        let key = (axes.row.get(&r.config), axes.col.get(&r.config));
        if filled.insert(key.clone(), r.win_rate).is_some() {
            return Err(ReportError::DuplicateCell {
                row: key.0,
                col: key.1,
            });
        }
    }
    let distinct = |pick: fn(&(String, String)) -> &String| -> Vec<String> {
        let mut v: Vec<String> = filled.keys().map(|k| pick(k).clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    let rows = axes.rows.clone().unwrap_or_else(|| distinct(|k| &k.0));
    let cols = axes.cols.clone().unwrap_or_else(|| distinct(|k| &k.1));
    let mut cells = Vec::with_capacity(rows.len() * cols.len());
    for row in &rows {
        for col in &cols {
            let wr = filled.get(&(row.clone(), col.clone())).copied();
            cells.push(HeatmapCell {
                row: row.clone(),
                col: col.clone(),
                win_rate: wr,
                band: wr.map(|w| band(w, thresholds)),
                reason: if wr.is_none() {
                    Some(NO_VALID_OUTPUT.to_string())
                } else {
                    None
                },
            });
        }
    }
    Ok(Heatmap {
        row_field: axes.row,
        col_field: axes.col,
        rows,
        cols,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn rec(id: &str, wr: f64, degenerate: bool) -> ExampleRecord {
        ExampleRecord {
            example_id: id.into(),
            operator: "delete".into(),
            nsr_obs: 0.5,
            win_rate: wr,
            effect_size: 1.0,
            p_value: 0.02,
            m: 50,
            degenerate,
        }
    }

    fn cfg(dataset: &str, scorer: &str, operator: &str) -> ConfigId {
        ConfigId {
            dataset: dataset.into(),
            scorer: scorer.into(),
            method: "attention".into(),
            operator: operator.into(),
            k: 0.2,
            m: 50,
            seed: 0,
        }
    }

    const SEEDS: Seeds = Seeds { global: 0, bootstrap: 0, infill: 0 };

    #[test]
    fn mean_of_two() {
        let r = aggregate(&[rec("a", 0.9, false), rec("b", 0.7, false)], cfg("d", "s", "delete"), SEEDS, &StatsConfig::default()).unwrap();
        assert!((r.win_rate - 0.8).abs() < 1e-15);
        assert_eq!(r.n_examples, 2);
        assert_eq!(r.taxonomy, TaxonomyLabel::TF);
    }

    #[test]
    fn degenerate_examples_are_excluded() {
        let r = aggregate(&[rec("a", 0.0, true), rec("b", 0.6, false)], cfg("d", "s", "delete"), SEEDS, &StatsConfig::default()).unwrap();
        assert_eq!(r.win_rate, 0.6);
        assert_eq!(r.n_degenerate, 1);
        assert_eq!(r.n_examples, 2);
        let err = aggregate(&[rec("a", 0.0, true)], cfg("d", "s", "delete"), SEEDS, &StatsConfig::default());
        assert_eq!(err.unwrap_err(), ReportError::EmptyAggregate);
        let err = aggregate(&[rec("a", 0.5, false)], cfg("d", "s", "retrieval"), SEEDS, &StatsConfig::default());
        assert!(matches!(err, Err(ReportError::MixedConfig { .. })));
    }

    fn report(dataset: &str, scorer: &str, operator: &str, wr: f64) -> DatasetReport {
        let mut r = aggregate(&[rec("a", wr, false)], cfg(dataset, scorer, "delete"), SEEDS, &StatsConfig::default()).unwrap();
        r.config.operator = operator.into();
        r
    }

    #[test]
    fn gap_join() {
        let reports = vec![report("d", "s", "delete", 0.8), report("d", "s", "retrieval", 0.6), report("e", "s", "retrieval", 0.6)];
        let g = gap_vs_delete(&reports);
        assert_eq!(g[0], None);
        assert!((g[1].unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(g[2], None);
    }

    #[test]
    fn full_and_missing_heatmap_cells() {
        let axes = HeatmapAxes { row: Field::Scorer, col: Field::Dataset, rows: None, cols: None };
        let t = Thresholds::default();
        let full: Vec<_> = [("m1", "d1"), ("m1", "d2"), ("m2", "d1"), ("m2", "d2")]
            .iter()
            .map(|(s, d)| report(d, s, "delete", 0.65))
            .collect();
        let h = heatmap(&full, &axes, &t).unwrap();
        assert_eq!(h.cells.len(), 4);
        assert!(h.cells.iter().all(|c| c.band == Some(FaithfulnessBand::Faithful)));

        let h = heatmap(&full[..3], &axes, &t).unwrap();
        let missing = &h.cells[3];
        assert_eq!((missing.row.as_str(), missing.col.as_str()), ("m2", "d2"));
        assert_eq!(missing.win_rate, None);
        assert_eq!(missing.reason.as_deref(), Some(NO_VALID_OUTPUT));

        let dup = vec![report("d1", "m1", "delete", 0.5), report("d1", "m1", "retrieval", 0.5)];
        assert!(matches!(heatmap(&dup, &axes, &t), Err(ReportError::DuplicateCell { .. })));
    }
}
