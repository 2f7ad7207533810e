use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use icebench::config::{seed_value, ConfigBuilder, RunConfig, SEED_ENV};
use icebench::corpus_io::{load_dataset, save_dataset};
use icebench::error::{Error, Result};
use icebench::manifest::{sha256_hex, Manifest};
use icebench::model_io::{load_model, save_model, TrainMetadata};
use icebench::pipeline::{
    self, attribute_example, open_inputs, run_evaluation, write_gaps, write_reports, EvalContext, GapInput,
    RunKind,
};
use icebench::tables::{emit_tables, read_table_csv, TableFormat};
use icebench::wire::serve;
use icebench_core::corpus::build_blacklist;
use icebench_core::report::Field;
use icebench_core::scorer::train_reference;
use icebench_core::synth::{toy_corpus, SynthConfig};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "icebench", version, about = "Randomization tests for attribution faithfulness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus and write its normalized form and summary.
    Ingest(RunArgs),
    /// Train the reference classifier and write the model file.
    TrainRef {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Compute attribution scores and write them as attribution files.
    Attribute(RunArgs),
    /// Run the randomization test and write per-example results and reports.
    Eval(RunArgs),
    /// Evaluate over a grid of rationale fractions and report the area under the curve.
    SweepK {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated rationale fractions.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Compare operators against deletion and emit agreement verdicts.
    CompareOperators {
        #[command(flatten)]
        run: RunArgs,
        /// Use an existing report table instead of evaluating.
        #[arg(long)]
        reports: Option<PathBuf>,
    },
    /// Rebuild reports from the per-example results of finished runs.
    Report {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Output directory; prints a markdown table when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        rows: Option<String>,
        #[arg(long)]
        cols: Option<String>,
    },
    /// Write a synthetic two-class corpus.
    Synth {
        #[arg(long, default_value_t = 200)]
        examples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        human_rationales: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a reference model over the scorer protocol on stdio or TCP.
    ServeRef {
        #[arg(long)]
        model: PathBuf,
        /// Listen address, e.g. 127.0.0.1:0. Serves stdio when absent.
        #[arg(long)]
        listen: Option<String>,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML config file.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set operator.span_len=3.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(short = 'k', long)]
    k: Option<f64>,
    #[arg(short = 'M', long = "permutations")]
    m: Option<usize>,
    /// Attribution methods (attribution.methods).
    #[arg(long = "method", value_delimiter = ',')]
    methods: Vec<String>,
    /// Operators (operator.kinds).
    #[arg(long = "operator", value_delimiter = ',')]
    operators: Vec<String>,
}

fn path_value(p: &Path) -> toml::Value {
    toml::Value::String(p.to_string_lossy().into_owned())
}

fn int_value(n: usize) -> Result<toml::Value> {
    i64::try_from(n)
        .map(toml::Value::Integer)
        .map_err(|_| Error::Config(format!("{n} is too large")))
}

fn strings(v: &[String]) -> toml::Value {
    toml::Value::Array(v.iter().cloned().map(toml::Value::String).collect())
}

impl RunArgs {
    fn builder(&self) -> Result<ConfigBuilder> {
        let mut b = ConfigBuilder::new();
        if let Some(p) = &self.config {
            b = b.file(p)?;
        }
        b = b.env_seed(std::env::var(SEED_ENV).ok())?;
        for kv in &self.set {
            b = b.assign(kv)?;
        }
        let mut flags: Vec<(&str, toml::Value)> = Vec::new();
        if let Some(p) = &self.corpus {
            flags.push(("corpus", path_value(p)));
        }
        if let Some(d) = &self.dataset {
            flags.push(("dataset", toml::Value::String(d.clone())));
        }
        if let Some(p) = &self.model {
            flags.push(("scorer.model", path_value(p)));
        }
        if let Some(e) = &self.endpoint {
            flags.push(("scorer.endpoint", toml::Value::String(e.clone())));
        }
        if let Some(p) = &self.out {
            flags.push(("out", path_value(p)));
        }
        if let Some(s) = self.seed {
            flags.push(("seed", seed_value(s)?));
        }
        if let Some(j) = self.jobs {
            flags.push(("jobs", int_value(j)?));
        }
        if let Some(k) = self.k {
            flags.push(("k", toml::Value::Float(k)));
        }
        if let Some(m) = self.m {
            flags.push(("M", int_value(m)?));
        }
        if !self.methods.is_empty() {
            flags.push(("attribution.methods", strings(&self.methods)));
        }
        if !self.operators.is_empty() {
            flags.push(("operator.kinds", strings(&self.operators)));
        }
        for (k, v) in flags {
            b = b.value(k, v)?;
        }
        Ok(b)
    }

    fn build(&self) -> Result<RunConfig> {
        self.builder()?.build()
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_ingest(args: &RunArgs) -> Result<()> {
    let cfg = args.build()?;
    let corpus = cfg.corpus_path()?;
    let dataset = load_dataset(corpus, cfg.max_len)?;
    pipeline::create_dir(&cfg.out)?;
    let mut manifest = Manifest::new("ingest", &cfg);
    manifest.add_input(corpus)?;
    save_dataset(&dataset, &cfg.out.join("corpus.jsonl"))?;
    manifest.add_output(&cfg.out, Path::new("corpus.jsonl"))?;
    let mut class_counts: BTreeMap<String, usize> = BTreeMap::new();
    for ex in dataset.examples() {
        *class_counts.entry(dataset.class_names()[ex.label].clone()).or_default() += 1;
    }
    let lengths: Vec<usize> = dataset.examples().iter().map(|e| e.len()).collect();
    let blacklist = build_blacklist(&dataset, cfg.operator.blacklist.iter());
    let summary = serde_json::json!({
        "dataset": cfg.dataset_name(),
        "examples": dataset.len(),
        "classes": dataset.class_names(),
        "class_counts": class_counts,
        "max_len": cfg.max_len,
        "tokens": lengths.iter().sum::<usize>(),
        "longest": lengths.iter().max(),
        "human_rationales": dataset.examples().iter().filter(|e| e.human_rationale.is_some()).count(),
        "blacklist": blacklist.blocked(),
    });
    write_json(&cfg.out.join("summary.json"), &summary)?;
    manifest.add_output(&cfg.out, Path::new("summary.json"))?;
    manifest.complete = true;
    manifest.write(&cfg.out)?;
    println!("{}: {} examples, {} classes", corpus.display(), dataset.len(), dataset.class_count());
    Ok(())
}

fn cmd_train_ref(args: &RunArgs, epochs: Option<usize>, lr: Option<f64>) -> Result<()> {
    let mut b = args.builder()?;
    if let Some(e) = epochs {
        b = b.value("train.epochs", int_value(e)?)?;
    }
    if let Some(lr) = lr {
        b = b.value("train.lr", toml::Value::Float(lr))?;
    }
    let cfg = b.build()?;
    let corpus = cfg.corpus_path()?;
    let model_path = cfg
        .scorer
        .model
        .clone()
        .ok_or_else(|| Error::Config("no model path (set scorer.model or pass --model)".into()))?;
    let dataset = load_dataset(corpus, cfg.max_len)?;
    let bytes = fs::read(corpus).map_err(|e| Error::io(corpus, e))?;
    let seed = cfg.train_seed();
    let trained = train_reference(&dataset, cfg.train.epochs, cfg.train.lr, seed)?;
    let metadata = TrainMetadata {
        accuracy: trained.accuracy,
        final_loss: trained.final_loss,
        epochs: cfg.train.epochs,
        lr: cfg.train.lr,
        seed,
        corpus_sha256: sha256_hex(&bytes),
        examples: dataset.len(),
    };
    if let Some(parent) = model_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        pipeline::create_dir(parent)?;
    }
    save_model(&trained.scorer, metadata, &model_path)?;
    println!(
        "trained on {} examples: accuracy {:.3}, loss {:.4}; wrote {}",
        dataset.len(),
        trained.accuracy,
        trained.final_loss,
        model_path.display()
    );
    Ok(())
}

fn cmd_attribute(args: &RunArgs) -> Result<()> {
    let cfg = args.build()?;
    pipeline::create_dir(&cfg.out)?;
    let mut manifest = Manifest::new("attribute", &cfg);
    let (dataset, scorer) = open_inputs(&cfg, &mut manifest)?;
    let ctx = EvalContext::new(&dataset, &cfg)?;
    let pool = pipeline::thread_pool(cfg.jobs)?;
    for method in cfg.methods()? {
        let label = ctx.method_label(&method);
        let scores: Vec<Result<_>> = pool.install(|| {
            dataset
                .examples()
                .par_iter()
                .map(|ex| attribute_example(&scorer, scorer.reference(), &method, ex, &ctx))
                .collect()
        });
        let name = format!("attributions.{label}.jsonl");
        let path = cfg.out.join(&name);
        let mut buf = Vec::new();
        let mut failure = None;
        for s in scores {
            match s {
                Ok(a) => {
                    serde_json::to_writer(&mut buf, &a).expect("serializes");
                    buf.push(b'\n');
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        manifest.add_output(&cfg.out, Path::new(&name))?;
        if let Some(e) = failure {
            manifest.error = Some(e.to_string());
            manifest.write(&cfg.out)?;
            return Err(e);
        }
    }
    manifest.complete = true;
    manifest.write(&cfg.out)
}

fn print_reports(reports: &[icebench_core::report::DatasetReport]) {
    let mut out = io::stdout().lock();
    let _ = emit_tables(reports, TableFormat::Markdown, &mut out);
}

fn cmd_run(cfg: RunConfig, kind: RunKind) -> Result<()> {
    let summary = run_evaluation(&cfg, kind)?;
    print_reports(&summary.reports);
    println!("wrote {}", summary.dir.display());
    Ok(())
}

fn cmd_compare_reports(args: &RunArgs, reports: &Path) -> Result<()> {
    let cfg = args.build()?;
    let file = fs::File::open(reports).map_err(|e| Error::io(reports, e))?;
    let rows = read_table_csv(BufReader::new(file))?;
    let inputs: Vec<GapInput> = rows.iter().map(GapInput::from).collect();
    pipeline::create_dir(&cfg.out)?;
    let mut manifest = Manifest::new("compare-operators", &cfg);
    manifest.add_input(reports)?;
    let gaps = write_gaps(&cfg.out, &inputs, &cfg.taxonomy, &mut manifest)?;
    manifest.complete = true;
    manifest.write(&cfg.out)?;
    let mut out = io::stdout().lock();
    let _ = pipeline::write_gap_csv(&gaps, &mut out);
    Ok(())
}

fn cmd_report(runs: &[PathBuf], out: Option<&Path>, rows: Option<&str>, cols: Option<&str>) -> Result<()> {
    let mut all = Vec::new();
    let mut first: Option<Manifest> = None;
    for run in runs {
        let (manifest, reports) = pipeline::reaggregate(run)?;
        all.extend(reports);
        first.get_or_insert(manifest);
    }
    let manifest = first.expect("at least one run");
    let mut cfg = manifest.config.clone();
    let field = |s: &str| Field::parse(s).ok_or_else(|| Error::Config(format!("unknown heatmap axis {s:?}")));
    if let Some(r) = rows {
        cfg.report.rows = field(r)?;
    }
    if let Some(c) = cols {
        cfg.report.cols = field(c)?;
    }
    match out {
        None => print_reports(&all),
        Some(dir) => {
            pipeline::create_dir(dir)?;
            let mut m = Manifest::new("report", &cfg);
            for run in runs {
                for rf in &Manifest::load(run)?.results {
                    m.add_input(&run.join(&rf.path))?;
                }
            }
            write_reports(dir, &all, &cfg, true, &mut m)?;
            m.complete = true;
            m.write(dir)?;
        }
    }
    Ok(())
}

fn cmd_synth(examples: usize, seed: u64, human_rationales: bool, out: &Path) -> Result<()> {
    let ds = toy_corpus(&SynthConfig {
        examples,
        seed,
        human_rationales,
        ..SynthConfig::default()
    });
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        pipeline::create_dir(parent)?;
    }
    save_dataset(&ds, out)
}

fn cmd_serve_ref(model: &Path, listen: Option<&str>) -> Result<()> {
    let (scorer, _) = load_model(model)?;
    match listen {
        None => {
            let stdin = io::stdin().lock();
            serve(&scorer, stdin, io::stdout().lock()).map_err(|e| Error::io("<stdio>", e))
        }
        Some(addr) => {
            let listener = TcpListener::bind(addr).map_err(|e| Error::io(addr, e))?;
            let local = listener.local_addr().map_err(|e| Error::io(addr, e))?;
            println!("listening on {local}");
            io::stdout().flush().ok();
            for stream in listener.incoming() {
                let stream = stream.map_err(|e| Error::io(addr, e))?;
                let read = stream.try_clone().map_err(|e| Error::io(addr, e))?;
                if let Err(e) = serve(&scorer, BufReader::new(read), stream) {
                    eprintln!("connection closed: {e}");
                }
            }
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => cmd_ingest(&a),
        Command::TrainRef { run, epochs, lr } => cmd_train_ref(&run, epochs, lr),
        Command::Attribute(a) => cmd_attribute(&a),
        Command::Eval(a) => cmd_run(a.build()?, RunKind::Eval),
        Command::SweepK { run, grid } => {
            let mut b = run.builder()?;
            if let Some(g) = grid {
                b = b.value("k_grid", toml::Value::Array(g.into_iter().map(toml::Value::Float).collect()))?;
            }
            cmd_run(b.build()?, RunKind::SweepK)
        }
        Command::CompareOperators { run, reports } => match reports {
            Some(path) => cmd_compare_reports(&run, &path),
            None => cmd_run(run.build()?, RunKind::CompareOperators),
        },
        Command::Report { runs, out, rows, cols } => cmd_report(&runs, out.as_deref(), rows.as_deref(), cols.as_deref()),
        Command::Synth {
            examples,
            seed,
            human_rationales,
            out,
        } => cmd_synth(examples, seed, human_rationales, &out),
        Command::ServeRef { model, listen } => cmd_serve_ref(&model, listen.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
