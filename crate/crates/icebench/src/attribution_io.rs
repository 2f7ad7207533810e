//! Attribution files: one `{"example_id", "method", "scores"}` object per line.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use icebench_core::attribution::{index_attributions, AttributionScores};
use icebench_core::corpus::Dataset;

use crate::error::{Error, Result};

pub fn load_attributions(path: &Path, dataset: &Dataset) -> Result<BTreeMap<String, AttributionScores>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AttributionScores = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("malformed attribution record: {e}"),
        })?;
        records.push(rec);
    }
    Ok(index_attributions(records, dataset)?)
}

pub fn write_attributions<'a>(
    records: impl IntoIterator<Item = &'a AttributionScores>,
    mut out: impl Write,
) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}
