//! Per-epoch metrics records and their text form.
//!
//! `metrics.tsv` holds one tab-separated row per epoch under a header:
//!
//! ```text
//! epoch lr loss_total loss_ce loss_ckt loss_distill loss_module_0 .. loss_module_{M-1} loss_penultimate train_acc test_acc
//! ```
//!
//! Reals use the shortest representation that parses back to the same `f64`;
//! absent values are written as `NA`. Wall-clock seconds go to a separate
//! `timing.tsv` (`epoch seconds`) so that the metrics file of a rerun is
//! bitwise identical.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.tsv";
pub const TIMING_FILE: &str = "timing.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Batch means of the loss breakdown.
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_ckt: f64,
    pub loss_distill: f64,
    pub loss_modules: Vec<f64>,
    pub loss_penultimate: f64,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub seconds: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn metrics_header(num_modules: usize) -> String {
    let mut cols = vec!["epoch", "lr", "loss_total", "loss_ce", "loss_ckt", "loss_distill"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    cols.extend((0..num_modules).map(|m| format!("loss_module_{m}")));
    cols.extend(["loss_penultimate", "train_acc", "test_acc"].map(String::from));
    cols.join("\t")
}

impl MetricsRecord {
    pub fn to_row(&self) -> String {
        let mut cols = vec![
            self.epoch.to_string(),
            self.lr.to_string(),
            self.loss_total.to_string(),
            self.loss_ce.to_string(),
            self.loss_ckt.to_string(),
            self.loss_distill.to_string(),
        ];
        cols.extend(self.loss_modules.iter().map(f64::to_string));
        cols.extend([self.loss_penultimate.to_string(), opt(self.train_acc), opt(self.test_acc)]);
        cols.join("\t")
    }
}

pub fn metrics_text(records: &[MetricsRecord], num_modules: usize) -> String {
    let mut s = metrics_header(num_modules);
    s.push('\n');
    for r in records {
        s.push_str(&r.to_row());
        s.push('\n');
    }
    s
}

pub fn timing_text(records: &[MetricsRecord]) -> String {
    let mut s = String::from("epoch\tseconds\n");
    for r in records {
        let _ = writeln!(s, "{}\t{:.3}", r.epoch, r.seconds);
    }
    s
}

pub fn write_metrics(dir: &Path, records: &[MetricsRecord], num_modules: usize) -> Result<()> {
    for (name, text) in [
        (METRICS_FILE, metrics_text(records, num_modules)),
        (TIMING_FILE, timing_text(records)),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Parses a metrics file back into `(header columns, rows)`.
pub fn read_metrics(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty metrics file"))?
        .split('\t')
        .map(String::from)
        .collect();
    let rows = lines.map(|l| l.split('\t').map(String::from).collect::<Vec<_>>()).collect::<Vec<_>>();
    if let Some(bad) = rows.iter().position(|r| r.len() != header.len()) {
        return Err(Error::format(path, format!("row {} has the wrong column count", bad + 1)));
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize) -> MetricsRecord {
        MetricsRecord {
            epoch,
            lr: 0.05,
            loss_total: 1.25,
            loss_ce: 0.75,
            loss_ckt: 0.5,
            loss_distill: 0.1,
            loss_modules: vec![0.3, 0.1 + 0.2],
            loss_penultimate: 0.4,
            train_acc: Some(0.5),
            test_acc: None,
            seconds: 1.5,
        }
    }

    #[test]
    fn rows_line_up_with_header() {
        let text = metrics_text(&[record(0), record(1)], 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(METRICS_FILE);
        std::fs::write(&path, &text).unwrap();
        let (header, rows) = read_metrics(&path).unwrap();
        assert_eq!(header.len(), 11);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1][0], "1");
        assert_eq!(rows[0][10], "NA");
        // shortest round-trip formatting
        assert_eq!(rows[0][7].parse::<f64>().unwrap(), 0.1 + 0.2);
        assert!(!text.contains("1.5"));
    }
}
