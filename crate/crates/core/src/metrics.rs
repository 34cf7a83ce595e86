//! Comma-separated metrics output.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::learner::MetricsRow;

pub const HEADER: &str = "step,episode_return_mean,eval_return_median,td_loss,pg_loss,entropy,epsilon";

/// `%g`-style rendering with six significant digits.
pub fn format_g(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        strip_zeros(&format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", strip_zeros(mantissa), exp.abs())
    }
}

fn strip_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

pub fn format_row(row: &MetricsRow) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        row.step,
        format_g(row.episode_return_mean),
        format_g(row.eval_return_median),
        format_g(row.td_loss),
        format_g(row.pg_loss),
        format_g(row.entropy),
        format_g(row.epsilon)
    )
}

pub fn parse_row(line: &str) -> Result<MetricsRow> {
    let fields: Vec<&str> = line.trim_end().split(',').collect();
    if fields.len() != 7 {
        return Err(Error::InvalidArgument(format!("metrics row has {} fields, expected 7", fields.len())));
    }
    let real = |s: &str| s.parse::<f64>().map_err(|e| Error::InvalidArgument(format!("bad metric value {s:?}: {e}")));
    Ok(MetricsRow {
        step: fields[0].parse().map_err(|e| Error::InvalidArgument(format!("bad step {:?}: {e}", fields[0])))?,
        episode_return_mean: real(fields[1])?,
        eval_return_median: real(fields[2])?,
        td_loss: real(fields[3])?,
        pg_loss: real(fields[4])?,
        entropy: real(fields[5])?,
        epsilon: real(fields[6])?,
    })
}

/// Parses a metrics file, header included.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HEADER => {}
        other => return Err(Error::InvalidArgument(format!("unexpected metrics header {other:?}"))),
    }
    lines.map(parse_row).collect()
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Creates or truncates `path` and writes the header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{HEADER}")?;
        out.flush()?;
        Ok(MetricsWriter { out })
    }

    /// Appends to an existing metrics file, e.g. after resuming from a checkpoint.
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(MetricsWriter { out: BufWriter::new(file) })
    }

    pub fn emit(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", format_row(row))?;
        self.out.flush()?;
        Ok(())
    }
}
