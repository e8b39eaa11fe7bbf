//! Per-iteration training log as CSV.
//!
//! Columns never change: `agreement` is filled on the last row of each
//! epoch and `timestamp` only when requested, otherwise both are empty.
//! Floats use the shortest round-trip decimal form, independent of locale.

use std::fs::File;
use std::io::{self, BufWriter};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::training::StepMetrics;

pub const COLUMNS: [&str; 14] = [
    "iteration",
    "epoch",
    "l_d",
    "l_d_adv",
    "l_c",
    "l_c_adv",
    "l_rec",
    "l_div",
    "l_s",
    "l_g",
    "queries",
    "total_queries",
    "agreement",
    "timestamp",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub epoch: usize,
    pub l_d: f64,
    pub l_d_adv: f64,
    pub l_c: f64,
    pub l_c_adv: f64,
    pub l_rec: f64,
    pub l_div: f64,
    pub l_s: f64,
    pub l_g: f64,
    pub queries: u64,
    pub total_queries: u64,
    pub agreement: Option<f64>,
    /// Unix seconds.
    pub timestamp: Option<u64>,
}

impl MetricsRow {
    pub fn from_step(m: &StepMetrics, total_queries: u64) -> Self {
        MetricsRow {
            iteration: m.iteration,
            epoch: m.epoch,
            l_d: m.l_d,
            l_d_adv: m.l_d_adv,
            l_c: m.l_c,
            l_c_adv: m.l_c_adv,
            l_rec: m.l_rec,
            l_div: m.l_div,
            l_s: m.l_s,
            l_g: m.l_g,
            queries: m.queries,
            total_queries,
            agreement: None,
            timestamp: None,
        }
    }
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Append-only writer. Rows must arrive with strictly increasing iteration.
pub struct MetricsWriter {
    inner: csv::Writer<BufWriter<File>>,
    last: Option<u64>,
}

impl MetricsWriter {
    /// Creates (truncates) `path` and writes the header.
    pub fn create(path: &Path) -> Result<Self, csv::Error> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(File::create(path)?));
        inner.write_record(COLUMNS)?;
        inner.flush()?;
        Ok(MetricsWriter { inner, last: None })
    }

    pub fn append(&mut self, rows: &[MetricsRow]) -> Result<(), csv::Error> {
        for row in rows {
            if self.last.is_some_and(|l| row.iteration <= l) {
                return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("iteration {} is not after {:?}", row.iteration, self.last)).into());
            }
            self.inner.serialize(row)?;
            self.last = Some(row.iteration);
        }
        self.inner.flush()?;
        Ok(())
    }
}

pub fn export_metrics(rows: &[MetricsRow], path: &Path) -> Result<(), csv::Error> {
    MetricsWriter::create(path)?.append(rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, csv::Error> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().ne(COLUMNS) {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("unexpected header {header:?}")).into());
    }
    r.deserialize().collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn row(i: u64) -> MetricsRow {
        MetricsRow {
            iteration: i,
            epoch: (i / 3) as usize,
            l_d: 0.1 + i as f64,
            l_d_adv: 1.0 / 3.0,
            l_c: 2.5e-9,
            l_c_adv: 0.0,
            l_rec: 123456.789,
            l_div: 1.7320508,
            l_s: -0.0,
            l_g: 1e300,
            queries: 128,
            total_queries: 128 * (i + 1),
            agreement: (i % 3 == 2).then_some(66.5),
            timestamp: None,
        }
    }

    #[test]
    fn empty_log_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        export_metrics(&[], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), COLUMNS.join(",") + "\n");
        assert!(read_metrics(&p).unwrap().is_empty());
    }

    #[test]
    fn every_line_has_the_same_width() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        export_metrics(&(0..7).map(row).collect::<Vec<_>>(), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().all(|l| l.split(',').count() == COLUMNS.len()));
    }

    #[test]
    fn out_of_order_rows_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(&dir.path().join("m.csv")).unwrap();
        w.append(&[row(0), row(1)]).unwrap();
        assert!(w.append(&[row(1)]).is_err());
    }

    proptest! {
        #[test]
        fn values_parse_back_exactly(vals in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 8), agree in prop::option::of(0.0f64..100.0), ts in prop::option::of(any::<u64>())) {
            let mut r = row(5);
            r.l_d = vals[0];
            r.l_d_adv = vals[1];
            r.l_c = vals[2];
            r.l_c_adv = vals[3];
            r.l_rec = vals[4];
            r.l_div = vals[5];
            r.l_s = vals[6];
            r.l_g = vals[7];
            r.agreement = agree;
            r.timestamp = ts;
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.csv");
            export_metrics(&[row(1), r.clone()], &p).unwrap();
            let back = read_metrics(&p).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[1], &r);
            prop_assert_eq!(back[1].l_s.to_bits(), r.l_s.to_bits());
        }
    }
}
