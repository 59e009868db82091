//! File formats: JSON-lines datasets and metrics, CSV sweep tables, JSON
//! activation dumps.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::Serialize;

use super::analysis::{ActivationMatrix, Sweep, SweepRow};
use super::task::McqExample;
use super::{HarnessError, Result};

pub fn write_jsonl<T: Serialize, W: Write>(mut w: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_dataset(path: &Path, examples: &[McqExample]) -> Result<()> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, examples)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads `{"question", "options", "answer", "gold_fact_id"}` lines,
/// reporting the 1-based line of the first malformed record.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<Vec<McqExample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: McqExample = serde_json::from_str(&line)
            .map_err(|e| HarnessError::Data(format!("line {}: {e}", i + 1)))?;
        ex.validate()
            .map_err(|e| HarnessError::Data(format!("line {}: {e}", i + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<McqExample>> {
    let f = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(f))
}

/// Header row first, one line per row.
pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    run: usize,
    #[serde(flatten)]
    metrics: &'a super::EpochMetrics,
}

/// One line per epoch of every run in the sweep.
pub fn write_sweep_metrics<W: Write>(mut w: W, sweep: &Sweep) -> Result<()> {
    for (run, history) in &sweep.histories {
        for metrics in history {
            serde_json::to_writer(&mut w, &MetricsLine { run: *run, metrics })?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn write_activations<W: Write>(w: W, matrices: &[ActivationMatrix]) -> Result<()> {
    serde_json::to_writer_pretty(w, matrices)?;
    Ok(())
}
