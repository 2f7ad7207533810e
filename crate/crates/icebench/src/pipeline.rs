//! Evaluation runs: per-example tests in a worker pool, aggregation, and the
//! files written under the run directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use icebench_core::attribution::{
    model_attribution, occlusion_attribution, oracle_attribution, random_attribution, top_k_rationale,
    AttributionError, AttributionScores,
};
use icebench_core::corpus::{build_blacklist, Dataset, Example};
use icebench_core::icetest::{run_ice_test, IceConfig, COMBINED};
use icebench_core::operators::{build_infill_pool, InfillPool, OperatorKind};
use icebench_core::report::{
    aggregate, heatmap, table_order, ConfigId, DatasetReport, ExampleRecord, HeatmapAxes, ReportError,
};
use icebench_core::scorer::{ModelAttribution, ReferenceScorer, ScoreVector, Scorer, ScorerError, ScorerInfo};
use icebench_core::stats::auc_over_k;
use icebench_core::taxonomy::{agreement_verdict, classify, gap_summary, GapSummary, OperatorGap, Thresholds};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution_io::load_attributions;
use crate::config::{Method, RunConfig};
use crate::corpus_io::load_dataset;
use crate::error::{Error, Result};
use crate::manifest::{Manifest, ResultFile};
use crate::model_io::load_model;
use crate::tables::{emit_tables, write_heatmap_csv, write_heatmap_json, TableFormat, TableRow};
use crate::wire::{connect_external, ConnectOptions, ExternalScorer};

pub enum ScorerHandle {
    Reference(ReferenceScorer),
    External(ExternalScorer),
}

impl ScorerHandle {
    pub fn reference(&self) -> Option<&ReferenceScorer> {
        match self {
            ScorerHandle::Reference(r) => Some(r),
            ScorerHandle::External(_) => None,
        }
    }
}

impl Scorer for ScorerHandle {
    fn info(&self) -> &ScorerInfo {
        match self {
            ScorerHandle::Reference(s) => s.info(),
            ScorerHandle::External(s) => s.info(),
        }
    }

    fn score_batch(&self, batch: &[Vec<String>]) -> Result<Vec<ScoreVector>, ScorerError> {
        match self {
            ScorerHandle::Reference(s) => s.score_batch(batch),
            ScorerHandle::External(s) => s.score_batch(batch),
        }
    }

    fn baseline(&self) -> Result<ScoreVector, ScorerError> {
        match self {
            ScorerHandle::Reference(s) => s.baseline(),
            ScorerHandle::External(s) => s.baseline(),
        }
    }

    fn attribute(&self, method: ModelAttribution, tokens: &[String]) -> Result<Vec<f64>, ScorerError> {
        match self {
            ScorerHandle::Reference(s) => s.attribute(method, tokens),
            ScorerHandle::External(s) => s.attribute(method, tokens),
        }
    }

    fn batch_size(&self) -> usize {
        match self {
            ScorerHandle::Reference(s) => s.batch_size(),
            ScorerHandle::External(s) => s.batch_size(),
        }
    }
}

pub fn open_scorer(cfg: &RunConfig, class_count: usize) -> Result<ScorerHandle> {
    match (&cfg.scorer.endpoint, &cfg.scorer.model) {
        (Some(_), Some(_)) => Err(Error::Config("set either scorer.model or scorer.endpoint, not both".into())),
        (Some(endpoint), None) => {
            let opts = ConnectOptions {
                handshake_timeout_ms: cfg.scorer.handshake_timeout_ms,
                request_timeout_ms: cfg.scorer.request_timeout_ms,
                batch_size: cfg.scorer.batch_size,
                expected_classes: Some(class_count),
                name: Some(cfg.scorer_name()),
            };
            Ok(ScorerHandle::External(connect_external(endpoint, &opts)?))
        }
        (None, Some(model)) => {
            let (scorer, _) = load_model(model)?;
            if scorer.class_count() != class_count {
                return Err(ScorerError::ClassMismatch {
                    expected: class_count,
                    got: scorer.class_count(),
                }
                .into());
            }
            Ok(ScorerHandle::Reference(scorer))
        }
        (None, None) => Err(Error::Config("no scorer given (set scorer.model or scorer.endpoint)".into())),
    }
}

/// Everything one evaluation needs besides the scorer.
pub struct EvalContext<'a> {
    pub dataset: &'a Dataset,
    pub operators: Vec<OperatorKind>,
    pub pool: Option<InfillPool>,
    pub attributions: Option<BTreeMap<String, AttributionScores>>,
    pub config: &'a RunConfig,
}

impl<'a> EvalContext<'a> {
    pub fn new(dataset: &'a Dataset, config: &'a RunConfig) -> Result<Self> {
        let operators = config.operators()?;
        let pool = if operators.iter().any(OperatorKind::needs_pool) {
            let blacklist = build_blacklist(dataset, config.operator.blacklist.iter());
            Some(build_infill_pool(dataset, &blacklist, config.operator.span_len, config.seeds().infill)?)
        } else {
            None
        };
        let attributions = if config.methods()?.contains(&Method::File) {
            let path = config
                .attribution
                .file
                .as_deref()
                .ok_or_else(|| Error::Config("method `file` needs attribution.file".into()))?;
            Some(load_attributions(path, dataset)?)
        } else {
            None
        };
        Ok(Self {
            dataset,
            operators,
            pool,
            attributions,
            config,
        })
    }

    pub fn ice_config(&self) -> IceConfig {
        IceConfig {
            m: self.config.permutations(),
            seed: self.config.seed,
            eps: self.config.eps,
            combined: self.config.combined,
        }
    }

    /// Operator labels that appear in results, in output order.
    pub fn operator_names(&self) -> Vec<String> {
        if self.config.combined {
            vec![COMBINED.to_string()]
        } else {
            self.operators.iter().map(OperatorKind::name).collect()
        }
    }

    /// Name used in reports for a method.
    pub fn method_label(&self, method: &Method) -> String {
        if *method == Method::File {
            if let Some(map) = &self.attributions {
                let mut names = map.values().map(|a| a.method.as_str());
                if let Some(first) = names.next() {
                    if names.all(|n| n == first) {
                        return first.to_string();
                    }
                }
            }
        }
        method.name().to_string()
    }
}

/// Attribution scores for one example, before any absolute-value transform.
pub fn attribute_example<S: Scorer + ?Sized>(
    scorer: &S,
    reference: Option<&ReferenceScorer>,
    method: &Method,
    example: &Example,
    ctx: &EvalContext<'_>,
) -> Result<AttributionScores> {
    let need_ref = || {
        reference.ok_or_else(|| Error::Config(format!("method {} needs the reference scorer", method.name())))
    };
    let scores = match method {
        Method::Gradient => model_attribution(scorer, example, ModelAttribution::Gradient)?,
        Method::Attention => model_attribution(scorer, example, ModelAttribution::Attention)?,
        Method::Occlusion => occlusion_attribution(scorer, example)?,
        Method::Oracle => oracle_attribution(need_ref()?, example, 1.0),
        Method::AntiOracle => oracle_attribution(need_ref()?, example, -1.0),
        Method::Random => random_attribution(example, ctx.config.attribution_seed()),
        Method::File => ctx
            .attributions
            .as_ref()
            .and_then(|m| m.get(&example.id))
            .cloned()
            .ok_or_else(|| Error::Config(format!("attribution file has no record for {}", example.id)))?,
    };
    Ok(if ctx.config.attribution.absolute {
        scores.absolute()
    } else {
        scores
    })
}

fn is_skippable(method: &Method, e: &Error) -> bool {
    matches!(method, Method::Gradient | Method::Attention)
        && matches!(e, Error::Attribution(AttributionError::Scorer(ScorerError::Remote(_))))
}

/// Per-example records of one (method, k) cell, in dataset order.
#[derive(Debug, Default)]
pub struct CellOutcome {
    pub records: Vec<ExampleRecord>,
    /// Examples whose attribution the scorer declined in-band.
    pub skipped: Vec<String>,
    pub error: Option<Error>,
}

/// Runs the randomization test on every example. Results are collected in
/// dataset order, so they do not depend on the size of the worker pool. On
/// a failure the records before the failing example are kept.
pub fn evaluate_cell<S: Scorer + ?Sized>(
    scorer: &S,
    reference: Option<&ReferenceScorer>,
    method: &Method,
    k: f64,
    ctx: &EvalContext<'_>,
) -> CellOutcome {
    let ice = ctx.ice_config();
    let outcomes: Vec<Result<Option<Vec<ExampleRecord>>>> = ctx
        .dataset
        .examples()
        .par_iter()
        .map(|ex| {
            let attr = match attribute_example(scorer, reference, method, ex, ctx) {
                Ok(a) => a,
                Err(e) if is_skippable(method, &e) => return Ok(None),
                Err(e) => return Err(e),
            };
            let rationale = top_k_rationale(&attr, k, ex.len())?;
            let results = run_ice_test(scorer, ex, &rationale, &ctx.operators, ctx.pool.as_ref(), &ice)?;
            Ok(Some(results.iter().map(|r| r.record()).collect()))
        })
        .collect();
    let mut out = CellOutcome::default();
    for (ex, o) in ctx.dataset.examples().iter().zip(outcomes) {
        match o {
            Ok(Some(r)) => out.records.extend(r),
            Ok(None) => out.skipped.push(ex.id.clone()),
            Err(e) => {
                out.error = Some(e);
                break;
            }
        }
    }
    out
}

/// One report per operator. Operators whose examples are all degenerate are
/// left out and named in the returned warnings.
pub fn aggregate_cell(
    records: &[ExampleRecord],
    operators: &[String],
    cfg: &RunConfig,
    method: &str,
    k: f64,
) -> Result<(Vec<DatasetReport>, Vec<String>)> {
    let mut reports = Vec::new();
    let mut warnings = Vec::new();
    for op in operators {
        let subset: Vec<ExampleRecord> = records.iter().filter(|r| &r.operator == op).cloned().collect();
        let id = ConfigId {
            dataset: cfg.dataset_name(),
            scorer: cfg.scorer_name(),
            method: method.to_string(),
            operator: op.clone(),
            k,
            m: cfg.permutations(),
            seed: cfg.seed,
        };
        match aggregate(&subset, id, cfg.seeds(), &cfg.stats_config()) {
            Ok(r) => reports.push(r),
            Err(ReportError::EmptyAggregate) => {
                warnings.push(format!("{method}/{op} at k={k}: no non-degenerate examples, report omitted"))
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok((reports, warnings))
}

pub fn write_records(path: &Path, records: &[ExampleRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<ExampleRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_file(dir: &Path, name: &str, manifest: &mut Manifest, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let path = dir.join(name);
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::io(&path, e))?;
    fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    manifest.add_output(dir, Path::new(name))
}

/// Writes reports.json, reports.csv and reports.md, plus the heatmap grid
/// when `with_heatmap` is set.
pub fn write_reports(
    dir: &Path,
    reports: &[DatasetReport],
    cfg: &RunConfig,
    with_heatmap: bool,
    manifest: &mut Manifest,
) -> Result<()> {
    let mut sorted = reports.to_vec();
    table_order(&mut sorted);
    write_file(dir, "reports.json", manifest, |b| {
        serde_json::to_writer_pretty(&mut *b, &sorted)?;
        b.write_all(b"\n")
    })?;
    write_file(dir, "reports.csv", manifest, |b| emit_tables(&sorted, TableFormat::Csv, b))?;
    write_file(dir, "reports.md", manifest, |b| emit_tables(&sorted, TableFormat::Markdown, b))?;
    if with_heatmap {
        let axes = HeatmapAxes {
            row: cfg.report.rows,
            col: cfg.report.cols,
            rows: cfg.report.row_keys.clone(),
            cols: cfg.report.col_keys.clone(),
        };
        match heatmap(&sorted, &axes, &cfg.taxonomy) {
            Ok(h) => {
                write_file(dir, "heatmap.json", manifest, |b| write_heatmap_json(&h, b))?;
                write_file(dir, "heatmap.csv", manifest, |b| write_heatmap_csv(&h, b))?;
            }
            Err(e) => manifest.warn(format!("heatmap not written: {e}")),
        }
    }
    Ok(())
}

pub fn results_file_name(method: &str, k: Option<f64>) -> String {
    match k {
        None => format!("results.{method}.jsonl"),
        Some(k) => format!("results.{method}.k{k:.3}.jsonl"),
    }
}

pub struct RunSummary {
    pub dir: PathBuf,
    pub reports: Vec<DatasetReport>,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunKind {
    Eval,
    SweepK,
    CompareOperators,
}

impl RunKind {
    pub fn command(self) -> &'static str {
        match self {
            RunKind::Eval => "eval",
            RunKind::SweepK => "sweep-k",
            RunKind::CompareOperators => "compare-operators",
        }
    }
}

pub fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Loads the corpus and scorer named by `cfg` and records them as inputs.
pub fn open_inputs(cfg: &RunConfig, manifest: &mut Manifest) -> Result<(Dataset, ScorerHandle)> {
    let corpus = cfg.corpus_path()?;
    let dataset = load_dataset(corpus, cfg.max_len)?;
    manifest.add_input(corpus)?;
    if let Some(model) = &cfg.scorer.model {
        manifest.add_input(model)?;
    }
    if let Some(file) = &cfg.attribution.file {
        if cfg.methods()?.contains(&Method::File) {
            manifest.add_input(file)?;
        }
    }
    let scorer = open_scorer(cfg, dataset.class_count())?;
    Ok((dataset, scorer))
}

/// Full evaluation: every method at every k in `ks`. On an evaluation
/// failure the partial results and a manifest marked incomplete are written
/// before the error is returned.
pub fn run_evaluation(cfg: &RunConfig, kind: RunKind) -> Result<RunSummary> {
    let dir = cfg.out.clone();
    create_dir(&dir)?;
    let mut manifest = Manifest::new(kind.command(), cfg);
    let (dataset, scorer) = open_inputs(cfg, &mut manifest)?;
    let ctx = EvalContext::new(&dataset, cfg)?;
    if cfg.is_external() && ctx.operators.iter().any(|o| matches!(o, OperatorKind::MaskToken(_))) {
        manifest.warn("mask operator with an external scorer: the mask token may not be neutral for this model");
    }
    let ks: Vec<Option<f64>> = match kind {
        RunKind::SweepK => {
            if cfg.k_grid.len() < 2 {
                manifest.warn(format!("k grid has {} value(s); AUC needs at least two", cfg.k_grid.len()));
            }
            cfg.k_grid.iter().map(|&k| Some(k)).collect()
        }
        _ => vec![None],
    };
    let pool = thread_pool(cfg.jobs)?;
    let names = ctx.operator_names();
    let mut reports = Vec::new();
    for method in cfg.methods()? {
        let label = ctx.method_label(&method);
        for &k in &ks {
            let kv = k.unwrap_or(cfg.k);
            let outcome = pool.install(|| evaluate_cell(&scorer, scorer.reference(), &method, kv, &ctx));
            let name = results_file_name(&label, k);
            write_records(&dir.join(&name), &outcome.records)?;
            manifest.add_output(&dir, Path::new(&name))?;
            manifest.results.push(ResultFile {
                path: PathBuf::from(&name),
                method: label.clone(),
                k: kv,
                examples: outcome.records.len() / names.len().max(1),
            });
            for id in &outcome.skipped {
                manifest.warn(format!("{label}: scorer declined attribution for {id}; example skipped"));
            }
            manifest.skipped.extend(outcome.skipped.iter().cloned());
            if let Some(e) = outcome.error {
                manifest.error = Some(e.to_string());
                manifest.write(&dir)?;
                return Err(e);
            }
            let (r, warnings) = aggregate_cell(&outcome.records, &names, cfg, &label, kv)?;
            for w in warnings {
                manifest.warn(w);
            }
            reports.extend(r);
        }
    }
    write_reports(&dir, &reports, cfg, kind == RunKind::Eval, &mut manifest)?;
    if kind == RunKind::SweepK {
        write_auc(&dir, &reports, &mut manifest)?;
    }
    if kind == RunKind::CompareOperators {
        let inputs: Vec<GapInput> = reports.iter().map(GapInput::from).collect();
        write_gaps(&dir, &inputs, &cfg.taxonomy, &mut manifest)?;
    }
    manifest.complete = true;
    manifest.write(&dir)?;
    table_order(&mut reports);
    Ok(RunSummary { dir, reports, manifest })
}

/// Rebuilds the reports of a finished run from its per-example records.
pub fn reaggregate(run_dir: &Path) -> Result<(Manifest, Vec<DatasetReport>)> {
    let manifest = Manifest::load(run_dir)?;
    let cfg = &manifest.config;
    let names = if cfg.combined {
        vec![COMBINED.to_string()]
    } else {
        cfg.operators()?.iter().map(OperatorKind::name).collect()
    };
    let mut reports = Vec::new();
    for rf in &manifest.results {
        let records = read_records(&run_dir.join(&rf.path))?;
        let (r, _) = aggregate_cell(&records, &names, cfg, &rf.method, rf.k)?;
        reports.extend(r);
    }
    table_order(&mut reports);
    Ok((manifest, reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucRow {
    pub dataset: String,
    pub scorer: String,
    pub method: String,
    pub operator: String,
    pub n_k: usize,
    pub auc_mean_nsr: f64,
    pub auc_win_rate: f64,
}

/// Area under the mean-NSR and win-rate curves over k, one row per
/// (dataset, scorer, method, operator). Groups where the area is undefined
/// produce a warning instead of a row.
pub fn auc_rows(reports: &[DatasetReport]) -> (Vec<AucRow>, Vec<String>) {
    let mut groups: BTreeMap<(String, String, String, String), Vec<&DatasetReport>> = BTreeMap::new();
    for r in reports {
        let c = &r.config;
        groups
            .entry((c.dataset.clone(), c.scorer.clone(), c.method.clone(), c.operator.clone()))
            .or_default()
            .push(r);
    }
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for ((dataset, scorer, method, operator), rs) in groups {
        let nsr: Vec<(f64, f64)> = rs.iter().map(|r| (r.config.k, r.mean_nsr)).collect();
        let wr: Vec<(f64, f64)> = rs.iter().map(|r| (r.config.k, r.win_rate)).collect();
        match (auc_over_k(&nsr), auc_over_k(&wr)) {
            (Ok(a), Ok(b)) => rows.push(AucRow {
                dataset,
                scorer,
                method,
                operator,
                n_k: rs.len(),
                auc_mean_nsr: a,
                auc_win_rate: b,
            }),
            (Err(e), _) | (_, Err(e)) => warnings.push(format!("AUC for {method}/{operator}: {e}")),
        }
    }
    (rows, warnings)
}

fn write_auc(dir: &Path, reports: &[DatasetReport], manifest: &mut Manifest) -> Result<()> {
    let (rows, warnings) = auc_rows(reports);
    for w in warnings {
        manifest.warn(w);
    }
    write_file(dir, "auc.csv", manifest, |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["dataset", "scorer", "method", "operator", "n_k", "auc_mean_nsr", "auc_win_rate"])?;
        for r in &rows {
            w.write_record([
                r.dataset.clone(),
                r.scorer.clone(),
                r.method.clone(),
                r.operator.clone(),
                r.n_k.to_string(),
                format!("{:.3}", r.auc_mean_nsr),
                format!("{:.3}", r.auc_win_rate),
            ])?;
        }
        w.flush()
    })
}

/// The fields of a report that operator comparison needs.
#[derive(Debug, Clone, PartialEq)]
pub struct GapInput {
    pub dataset: String,
    pub scorer: String,
    pub method: String,
    pub k: f64,
    pub m: usize,
    pub seed: u64,
    pub operator: String,
    pub win_rate: f64,
}

impl From<&DatasetReport> for GapInput {
    fn from(r: &DatasetReport) -> Self {
        let c = &r.config;
        Self {
            dataset: c.dataset.clone(),
            scorer: c.scorer.clone(),
            method: c.method.clone(),
            k: c.k,
            m: c.m,
            seed: c.seed,
            operator: c.operator.clone(),
            win_rate: r.win_rate,
        }
    }
}

impl From<&TableRow> for GapInput {
    fn from(r: &TableRow) -> Self {
        Self {
            dataset: r.dataset.clone(),
            scorer: r.scorer.clone(),
            method: r.method.clone(),
            k: r.k,
            m: r.m,
            seed: r.seed,
            operator: r.operator.clone(),
            win_rate: r.win_rate,
        }
    }
}

pub const NO_DATA: &str = "no-data";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub dataset: String,
    pub scorer: String,
    pub method: String,
    pub k: f64,
    pub m: usize,
    pub seed: u64,
    /// The operator compared against deletion.
    pub operator: String,
    pub delete_wr: Option<f64>,
    pub other_wr: Option<f64>,
    pub gap: Option<f64>,
    pub delete_taxonomy: Option<String>,
    pub other_taxonomy: Option<String>,
    pub verdict: String,
}

/// Joins every non-delete operator to the delete report of the same
/// configuration. A side that is missing yields a `no-data` verdict.
pub fn operator_gaps(inputs: &[GapInput], t: &Thresholds) -> Result<Vec<GapRow>> {
    let mut others: Vec<String> = inputs
        .iter()
        .filter(|i| i.operator != "delete")
        .map(|i| i.operator.clone())
        .collect();
    others.sort();
    others.dedup();
    if others.is_empty() || !inputs.iter().any(|i| i.operator == "delete") {
        return Err(Error::Config(
            "operator comparison needs delete and at least one other operator".into(),
        ));
    }
    type Key = (String, String, String, u64, usize, u64);
    let mut groups: BTreeMap<Key, BTreeMap<String, f64>> = BTreeMap::new();
    let mut ks: BTreeMap<u64, f64> = BTreeMap::new();
    for i in inputs {
        ks.insert(i.k.to_bits(), i.k);
        let key = (i.dataset.clone(), i.scorer.clone(), i.method.clone(), i.k.to_bits(), i.m, i.seed);
        if groups.entry(key).or_default().insert(i.operator.clone(), i.win_rate).is_some() {
            return Err(Error::Table(format!(
                "two {} rows for {}/{}/{}",
                i.operator, i.dataset, i.scorer, i.method
            )));
        }
    }
    let label = |wr: f64| classify(wr, t).as_str().to_string();
    let mut rows = Vec::new();
    for ((dataset, scorer, method, kbits, m, seed), ops) in groups {
        let delete_wr = ops.get("delete").copied();
        for other in &others {
            let other_wr = ops.get(other).copied();
            let (gap, verdict) = match (delete_wr, other_wr) {
                (Some(d), Some(o)) => {
                    let a = agreement_verdict(d, o, t);
                    (Some(a.gap.gap), a.verdict.as_str().to_string())
                }
                _ => (None, NO_DATA.to_string()),
            };
            rows.push(GapRow {
                dataset: dataset.clone(),
                scorer: scorer.clone(),
                method: method.clone(),
                k: ks[&kbits],
                m,
                seed,
                operator: other.clone(),
                delete_wr,
                other_wr,
                gap,
                delete_taxonomy: delete_wr.map(label),
                other_taxonomy: other_wr.map(label),
                verdict,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorGapSummary {
    pub operator: String,
    pub pairs: usize,
    pub no_data: usize,
    pub summary: Option<GapSummary>,
    pub verdicts: BTreeMap<String, usize>,
}

pub fn summarize_gaps(rows: &[GapRow]) -> Vec<OperatorGapSummary> {
    let mut by_op: BTreeMap<&str, Vec<&GapRow>> = BTreeMap::new();
    for r in rows {
        by_op.entry(&r.operator).or_default().push(r);
    }
    by_op
        .into_iter()
        .map(|(op, rs)| {
            let gaps: Vec<OperatorGap> = rs
                .iter()
                .filter_map(|r| Some(OperatorGap::new(r.delete_wr?, r.other_wr?)))
                .collect();
            let mut verdicts = BTreeMap::new();
            for r in &rs {
                *verdicts.entry(r.verdict.clone()).or_insert(0) += 1;
            }
            OperatorGapSummary {
                operator: op.to_string(),
                pairs: gaps.len(),
                no_data: rs.len() - gaps.len(),
                summary: gap_summary(&gaps),
                verdicts,
            }
        })
        .collect()
}

pub fn write_gap_csv(rows: &[GapRow], out: impl Write) -> std::io::Result<()> {
    let f = |x: Option<f64>| x.map(|v| format!("{v:.3}")).unwrap_or_default();
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "dataset",
        "scorer",
        "method",
        "k",
        "M",
        "seed",
        "operator",
        "delete_wr",
        "other_wr",
        "gap",
        "delete_taxonomy",
        "other_taxonomy",
        "verdict",
    ])?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.scorer.clone(),
            r.method.clone(),
            format!("{:.3}", r.k),
            r.m.to_string(),
            r.seed.to_string(),
            r.operator.clone(),
            f(r.delete_wr),
            f(r.other_wr),
            f(r.gap),
            r.delete_taxonomy.clone().unwrap_or_default(),
            r.other_taxonomy.clone().unwrap_or_default(),
            r.verdict.clone(),
        ])?;
    }
    w.flush()
}

/// Writes operator_gaps.csv and gap_summary.json.
pub fn write_gaps(dir: &Path, inputs: &[GapInput], t: &Thresholds, manifest: &mut Manifest) -> Result<Vec<GapRow>> {
    let rows = operator_gaps(inputs, t)?;
    write_file(dir, "operator_gaps.csv", manifest, |b| write_gap_csv(&rows, b))?;
    let summary = summarize_gaps(&rows);
    write_file(dir, "gap_summary.json", manifest, |b| {
        serde_json::to_writer_pretty(&mut *b, &summary)?;
        b.write_all(b"\n")
    })?;
    Ok(rows)
}
