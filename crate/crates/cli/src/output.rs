//! JSONL time series and CSV summaries. Floats are written with 17
//! significant digits so every logged `f64` parses back to the same bits.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use geocollapse::metrics::{FieldValue, MetricsRecord};

/// `d.dddddddddddddddde±x`, or `null` for NaN and infinities.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "null".to_string()
    }
}

fn fmt_field(v: FieldValue) -> String {
    match v {
        FieldValue::Int(i) => i.to_string(),
        FieldValue::Float(f) => fmt_f64(f),
    }
}

/// One JSON object per line with exactly the record's field names.
pub fn record_line(r: &MetricsRecord) -> String {
    let body: Vec<String> = r.fields().into_iter().map(|(k, v)| format!("\"{k}\":{}", fmt_field(v))).collect();
    format!("{{{}}}", body.join(","))
}

/// Append-only JSONL file, flushed after every record so an interrupted run
/// leaves a valid prefix.
pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self { out: BufWriter::new(File::create(path)?) })
    }

    pub fn write(&mut self, r: &MetricsRecord) -> std::io::Result<()> {
        writeln!(self.out, "{}", record_line(r))?;
        self.out.flush()
    }
}

/// Column names and values of the final record, for summary rows.
pub fn record_columns(r: &MetricsRecord) -> (Vec<String>, Vec<String>) {
    r.fields().into_iter().map(|(k, v)| (k.to_string(), fmt_field(v))).unzip()
}

/// Writes a header plus rows; every row must have the header's length.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()
}
