//! Newline-delimited JSON corpus files.
//!
//! The first line is a header `{"classes": [...], "format": "icebench-corpus-v1"}`;
//! every following nonblank line is one example record.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use icebench_core::corpus::{Dataset, Example};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CORPUS_FORMAT: &str = "icebench-corpus-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub classes: Vec<String>,
    pub format: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    tokens: Vec<String>,
    label: usize,
    #[serde(default)]
    human_rationale: Option<Vec<usize>>,
}

pub fn load_dataset(path: &Path, max_len: usize) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file), path, max_len)
}

pub fn read_dataset(reader: impl BufRead, path: &Path, max_len: usize) -> Result<Dataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut header: Option<CorpusHeader> = None;
    let mut examples = Vec::new();
    let mut line_of = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match &header {
            None => {
                let h: CorpusHeader = serde_json::from_str(&line)
                    .map_err(|e| parse_err(lineno, format!("bad corpus header: {e}")))?;
                if h.format != CORPUS_FORMAT {
                    return Err(parse_err(lineno, format!("unsupported corpus format {:?}", h.format)));
                }
                header = Some(h);
            }
            Some(_) => {
                let r: Record = serde_json::from_str(&line)
                    .map_err(|e| parse_err(lineno, format!("malformed record: {e}")))?;
                examples.push(Example {
                    id: r.id,
                    tokens: r.tokens,
                    label: r.label,
                    human_rationale: r.human_rationale,
                });
                line_of.push(lineno);
            }
        }
    }
    let header = header.ok_or_else(|| parse_err(1, "missing corpus header".into()))?;
    Dataset::new(examples, header.classes, max_len).map_err(|source| match source.example_index() {
        Some(i) => parse_err(line_of[i], source.to_string()),
        None => Error::Corpus {
            path: path.to_path_buf(),
            source,
        },
    })
}

pub fn write_dataset(dataset: &Dataset, mut out: impl Write) -> std::io::Result<()> {
    let header = CorpusHeader {
        classes: dataset.class_names().to_vec(),
        format: CORPUS_FORMAT.to_string(),
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for ex in dataset.examples() {
        writeln!(out, "{}", serde_json::to_string(ex)?)?;
    }
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(dataset, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
