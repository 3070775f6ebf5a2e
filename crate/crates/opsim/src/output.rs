//! Output documents, written atomically: a temporary file in the target
//! directory is renamed over the destination only once fully written.

use std::io::Write;
use std::path::Path;

use opsim_core::analysis::{trace_events, Report};
use opsim_core::sched::Timeline;

use crate::format::{to_json, REPORT_VERSION};
use crate::{Error, Result};

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Writes to `path`, or to stdout when there is none.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            write_atomic(p, text.as_bytes())?;
            log::info!("wrote {}", p.display());
            Ok(())
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

pub fn report_json(r: &Report) -> Result<String> {
    to_json(REPORT_VERSION, r)
}

/// Chrome Trace Event document of a timeline.
pub fn trace_json(t: &Timeline) -> Result<String> {
    let mut s = serde_json::to_string(&trace_events(t)).map_err(|e| Error::config(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Breakdown of a report as CSV: one row per category, one column per
/// phase, plus a total column. Microseconds.
pub fn breakdown_csv(r: &Report) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["category".to_string()];
    header.extend(r.breakdown_columns.iter().cloned());
    header.push("total".into());
    w.write_record(&header).map_err(|e| Error::config(e.to_string()))?;
    for row in &r.breakdown_rows {
        let cells = r.breakdown.get(row);
        let vals: Vec<f64> = r.breakdown_columns.iter().map(|c| cells.and_then(|m| m.get(c)).copied().unwrap_or(0.0)).collect();
        let total: f64 = vals.iter().sum();
        let mut rec = vec![row.clone()];
        rec.extend(vals.iter().map(|v| format!("{v:.3}")));
        rec.push(format!("{total:.3}"));
        w.write_record(&rec).map_err(|e| Error::config(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::config(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::config(e.to_string()))
}
