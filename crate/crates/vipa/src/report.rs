//! Metric tables and CSV reports.

use std::path::Path;

use vipa_core::metrics::MetricReport;

use crate::error::{Error, Result};

/// Aligned two-column table.
pub fn metric_table(report: &MetricReport) -> String {
    let rows = report.rows();
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0).max("samples".len());
    let mut out = format!("{:<width$}  value\n", "metric");
    for (k, v) in rows {
        out.push_str(&format!("{k:<width$}  {v:.4}\n"));
    }
    out.push_str(&format!("{:<width$}  {}\n", "samples", report.samples));
    out
}

/// `metric,value` rows, full precision.
pub fn write_metric_csv(path: &Path, report: &MetricReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "value"])?;
    for (k, v) in report.rows() {
        w.write_record([k, v.to_string()])?;
    }
    w.write_record(["samples".to_string(), report.samples.to_string()])?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metric_csv(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let v = rec[1].parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            offset: rec.position().map_or(0, |p| p.byte() as usize),
            message: format!("bad value {:?}", &rec[1]),
        })?;
        out.push((rec[0].to_string(), v));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> MetricReport {
        MetricReport {
            oiou: 0.5,
            miou: 0.625,
            precision: vec![(0.5, 0.75), (0.7, 0.25)],
            samples: 4,
        }
    }

    #[test]
    fn table_lines() {
        let t = metric_table(&report());
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "metric   value");
        assert_eq!(lines[1], "oIoU     0.5000");
        assert_eq!(lines[4], "P@0.7    0.2500");
        assert_eq!(lines[5], "samples  4");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metric_csv(&path, &report()).unwrap();
        let rows = read_metric_csv(&path).unwrap();
        assert_eq!(rows[1], ("mIoU".to_string(), 0.625));
        assert_eq!(rows[3], ("P@0.7".to_string(), 0.25));
        assert_eq!(rows[4], ("samples".to_string(), 4.0));
    }
}
