//! Run configuration.
//!
//! Config files are TOML. Keys may be written flat with dots
//! (`operator.span_len = 3`) or as tables. Values are layered: built-in
//! defaults, then the file, then `ICEBENCH_SEED`, then `--set key=value`
//! overrides and dedicated flags in the order given.

use std::fs;
use std::path::{Path, PathBuf};

use icebench_core::operators::OperatorKind;
use icebench_core::report::{Field, Seeds, StatsConfig};
use icebench_core::taxonomy::Thresholds;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEED_ENV: &str = "ICEBENCH_SEED";
pub const DEFAULT_K_GRID: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    /// Dataset name used in reports; defaults to the corpus file stem.
    pub dataset: Option<String>,
    pub max_len: usize,
    pub out: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 means one per CPU.
    pub jobs: usize,
    pub k: f64,
    pub k_grid: Vec<f64>,
    /// Random baselines per example; 100 for the reference scorer and 50
    /// for external scorers when unset.
    #[serde(rename = "M")]
    pub m: Option<usize>,
    #[serde(rename = "B")]
    pub b: usize,
    pub alpha: f64,
    pub eps: f64,
    pub combined: bool,
    pub scorer: ScorerConfig,
    pub attribution: AttributionConfig,
    pub operator: OperatorConfig,
    pub stats: StatsSeeds,
    pub taxonomy: Thresholds,
    pub train: TrainConfig,
    pub report: ReportConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    /// Reference model file.
    pub model: Option<PathBuf>,
    /// `tcp://host:port` or a shell command speaking the scorer protocol.
    pub endpoint: Option<String>,
    pub name: Option<String>,
    pub batch_size: usize,
    pub handshake_timeout_ms: u64,
    pub request_timeout_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    /// gradient, attention, occlusion, oracle, anti-oracle, random, file
    pub methods: Vec<String>,
    /// Attribution file for method `file`.
    pub file: Option<PathBuf>,
    /// Rank by absolute score instead of signed score.
    pub absolute: bool,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorConfig {
    /// delete, retrieval, mask
    pub kinds: Vec<String>,
    pub span_len: usize,
    /// Run `delete` as "delete the rationale, keep the rest".
    pub delete_complement: bool,
    pub mask_token: String,
    pub pool_seed: Option<u64>,
    /// Extra tokens barred from infill on top of the class names.
    pub blacklist: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSeeds {
    pub bootstrap_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub rows: Field,
    pub cols: Field,
    pub row_keys: Option<Vec<String>>,
    pub col_keys: Option<Vec<String>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            dataset: None,
            max_len: icebench_core::DEFAULT_MAX_LEN,
            out: PathBuf::from("icebench-run"),
            seed: 0,
            jobs: 1,
            k: icebench_core::DEFAULT_K,
            k_grid: DEFAULT_K_GRID.to_vec(),
            m: None,
            b: icebench_core::DEFAULT_BOOTSTRAP,
            alpha: icebench_core::DEFAULT_ALPHA,
            eps: icebench_core::DEFAULT_EPS,
            combined: false,
            scorer: ScorerConfig::default(),
            attribution: AttributionConfig::default(),
            operator: OperatorConfig::default(),
            stats: StatsSeeds::default(),
            taxonomy: Thresholds::default(),
            train: TrainConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            model: None,
            endpoint: None,
            name: None,
            batch_size: crate::wire::DEFAULT_BATCH_SIZE,
            handshake_timeout_ms: crate::wire::DEFAULT_HANDSHAKE_TIMEOUT_MS,
            request_timeout_ms: None,
        }
    }
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            methods: vec!["gradient".to_string()],
            file: None,
            absolute: false,
            seed: None,
        }
    }
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            kinds: vec!["delete".to_string(), "retrieval".to_string()],
            span_len: icebench_core::operators::DEFAULT_SPAN_LEN,
            delete_complement: false,
            mask_token: "[MASK]".to_string(),
            pool_seed: None,
            blacklist: Vec::new(),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.5,
            seed: None,
        }
    }
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            rows: Field::Method,
            cols: Field::Operator,
            row_keys: None,
            col_keys: None,
        }
    }
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back to
/// a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("nonempty");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Collects layered settings before they are resolved into a [`RunConfig`].
#[derive(Debug, Clone, Default)]
pub struct ConfigBuilder {
    table: toml::Table,
}

impl ConfigBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn file(mut self, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        for (k, v) in parsed {
            self.table.insert(k, v);
        }
        Ok(self)
    }

    /// Applies `ICEBENCH_SEED` when present.
    pub fn env_seed(self, value: Option<String>) -> Result<Self> {
        match value {
            None => Ok(self),
            Some(v) => {
                let seed: u64 = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
                self.value("seed", seed_value(seed)?)
            }
        }
    }

    /// Applies one `key=value` override.
    pub fn assign(self, kv: &str) -> Result<Self> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.value(k.trim(), parse_value(v.trim()))
    }

    pub fn value(mut self, key: &str, value: toml::Value) -> Result<Self> {
        set_path(&mut self.table, key, value)?;
        Ok(self)
    }

    pub fn build(self) -> Result<RunConfig> {
        let cfg: RunConfig = toml::Value::Table(self.table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn seed_value(seed: u64) -> Result<toml::Value> {
    i64::try_from(seed)
        .map(toml::Value::Integer)
        .map_err(|_| Error::Config(format!("seed {seed} exceeds {}", i64::MAX)))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        for &k in std::iter::once(&self.k).chain(&self.k_grid) {
            if !(k > 0.0 && k <= 1.0) {
                return bad(format!("k = {k} is outside (0, 1]"));
            }
        }
        if self.m == Some(0) {
            return bad("M must be positive".into());
        }
        if self.b == 0 {
            return bad("B must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha = {} is outside (0, 1)", self.alpha));
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        if self.scorer.batch_size == 0 {
            return bad("scorer.batch_size must be positive".into());
        }
        if self.operator.span_len == 0 {
            return bad("operator.span_len must be positive".into());
        }
        if self.attribution.methods.is_empty() {
            return bad("attribution.methods is empty".into());
        }
        for m in &self.attribution.methods {
            Method::parse(m)?;
        }
        self.operators()?;
        let t = &self.taxonomy;
        if !(t.anti <= t.lt && t.lt <= t.tf) {
            return bad("taxonomy thresholds must satisfy anti <= lt <= tf".into());
        }
        Ok(())
    }

    pub fn operators(&self) -> Result<Vec<OperatorKind>> {
        if self.operator.kinds.is_empty() {
            return Err(Error::Config("operator.kinds is empty".into()));
        }
        let mut out = Vec::new();
        for name in &self.operator.kinds {
            let kind = match name.as_str() {
                "mask" => OperatorKind::MaskToken(self.operator.mask_token.clone()),
                "delete" if self.operator.delete_complement => OperatorKind::DeleteComplement,
                other => OperatorKind::parse(other)?,
            };
            if out.contains(&kind) {
                return Err(Error::Config(format!("operator {name:?} listed twice")));
            }
            out.push(kind);
        }
        Ok(out)
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        self.attribution.methods.iter().map(|m| Method::parse(m)).collect()
    }

    pub fn is_external(&self) -> bool {
        self.scorer.endpoint.is_some()
    }

    pub fn permutations(&self) -> usize {
        self.m.unwrap_or(if self.is_external() {
            icebench_core::DEFAULT_PERMUTATIONS
        } else {
            icebench_core::DEFAULT_PERMUTATIONS_REFERENCE
        })
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            global: self.seed,
            bootstrap: self.stats.bootstrap_seed.unwrap_or(self.seed),
            infill: self.operator.pool_seed.unwrap_or(self.seed),
        }
    }

    pub fn attribution_seed(&self) -> u64 {
        self.attribution.seed.unwrap_or(self.seed)
    }

    pub fn train_seed(&self) -> u64 {
        self.train.seed.unwrap_or(self.seed)
    }

    pub fn stats_config(&self) -> StatsConfig {
        StatsConfig {
            b: self.b,
            alpha: self.alpha,
            bootstrap_seed: self.seeds().bootstrap,
            thresholds: self.taxonomy,
        }
    }

    pub fn dataset_name(&self) -> String {
        if let Some(d) = &self.dataset {
            return d.clone();
        }
        self.corpus
            .as_deref()
            .and_then(Path::file_stem)
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".to_string())
    }

    pub fn scorer_name(&self) -> String {
        self.scorer.name.clone().unwrap_or_else(|| {
            if self.is_external() {
                "external".to_string()
            } else {
                "reference".to_string()
            }
        })
    }

    /// The configuration with every defaulted value made explicit, as
    /// recorded in manifests.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        let seeds = self.seeds();
        c.m = Some(self.permutations());
        c.dataset = Some(self.dataset_name());
        c.scorer.name = Some(self.scorer_name());
        c.stats.bootstrap_seed = Some(seeds.bootstrap);
        c.operator.pool_seed = Some(seeds.infill);
        c.attribution.seed = Some(self.attribution_seed());
        c.train.seed = Some(self.train_seed());
        c
    }

    pub fn corpus_path(&self) -> Result<&Path> {
        self.corpus
            .as_deref()
            .ok_or_else(|| Error::Config("no corpus given (set `corpus` or pass --corpus)".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Method {
    Gradient,
    Attention,
    Occlusion,
    Oracle,
    AntiOracle,
    Random,
    File,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "gradient" => Method::Gradient,
            "attention" => Method::Attention,
            "occlusion" => Method::Occlusion,
            "oracle" => Method::Oracle,
            "anti-oracle" => Method::AntiOracle,
            "random" => Method::Random,
            "file" => Method::File,
            other => return Err(Error::Config(format!("unknown attribution method {other:?}"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Gradient => "gradient",
            Method::Attention => "attention",
            Method::Occlusion => "occlusion",
            Method::Oracle => "oracle",
            Method::AntiOracle => "anti-oracle",
            Method::Random => "random",
            Method::File => "file",
        }
    }
}
