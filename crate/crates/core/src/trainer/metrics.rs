use std::path::Path;

use crate::diagnostics::report::{num, Table};
use crate::error::{Error, Result};
use crate::objectives::LossBreakdown;

pub const METRICS_HEADER: [&str; 9] = [
    "step", "epoch", "lr", "l_mae", "l_okd", "l_ccl", "l_cdr", "total", "paired_flag",
];

/// Loss components of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_mae: f64,
    pub l_okd: f64,
    pub l_ccl: f64,
    pub l_cdr: f64,
    pub total: f64,
    pub paired: bool,
}

impl MetricsRecord {
    pub fn new(step: usize, epoch: usize, lr: f64, b: &LossBreakdown) -> Self {
        MetricsRecord {
            step,
            epoch,
            lr,
            l_mae: b.l_mae,
            l_okd: b.l_okd,
            l_ccl: b.l_ccl,
            l_cdr: b.l_cdr,
            total: b.total,
            paired: b.paired,
        }
    }

    pub fn to_row(&self) -> Vec<f64> {
        vec![
            self.step as f64,
            self.epoch as f64,
            self.lr,
            self.l_mae,
            self.l_okd,
            self.l_ccl,
            self.l_cdr,
            self.total,
            f64::from(u8::from(self.paired)),
        ]
    }

    pub fn from_row(r: &[f64]) -> Result<Self> {
        if r.len() != 9 {
            return Err(Error::Format(format!("metrics row has {} fields", r.len())));
        }
        Ok(MetricsRecord {
            step: r[0] as usize,
            epoch: r[1] as usize,
            lr: r[2],
            l_mae: r[3],
            l_okd: r[4],
            l_ccl: r[5],
            l_cdr: r[6],
            total: r[7],
            paired: r[8] != 0.0,
        })
    }
}

pub fn metrics_table(records: &[MetricsRecord]) -> Table {
    let mut t = Table::new(&METRICS_HEADER);
    for r in records {
        t.push(vec![
            r.step.to_string(),
            r.epoch.to_string(),
            num(r.lr),
            num(r.l_mae),
            num(r.l_okd),
            num(r.l_ccl),
            num(r.l_cdr),
            num(r.total),
            u8::from(r.paired).to_string(),
        ]);
    }
    t
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    metrics_table(records).write(path)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let t = Table::read(path)?;
    if t.header != METRICS_HEADER {
        return Err(Error::Format(format!("unexpected metrics header {:?}", t.header)));
    }
    t.rows
        .iter()
        .map(|r| {
            let v = r
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| Error::Format(format!("metrics value {s:?}"))))
                .collect::<Result<Vec<f64>>>()?;
            MetricsRecord::from_row(&v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let recs: Vec<MetricsRecord> = (0..4)
            .map(|i| MetricsRecord {
                step: i,
                epoch: i / 2,
                lr: 1.5e-4 * i as f64 / 3.0,
                l_mae: 0.1 + i as f64 / 7.0,
                l_okd: 1.0 / 3.0,
                l_ccl: 0.0,
                l_cdr: 2.0f64.sqrt(),
                total: 9.75,
                paired: i % 2 == 0,
            })
            .collect();
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("m.csv");
        write_metrics(&p, &recs).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), recs);
    }
}
