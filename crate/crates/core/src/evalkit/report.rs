use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::MetricsReport;
use crate::error::{Error, Result};

/// One JSON object per line.
pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Data(format!("serialize record: {e}")))?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Aligned text table with one row per labelled report.
pub fn metrics_table(rows: &[(String, MetricsReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}\n", "config", "ACC", "M-F1", "M-P", "M-R");
    for (label, m) in rows {
        s.push_str(&format!(
            "{label:<width$}  {:>6.2}  {:>6.2}  {:>6.2}  {:>6.2}\n",
            m.acc, m.macro_f1, m.macro_p, m.macro_r
        ));
    }
    s
}
