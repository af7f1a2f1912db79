//! Append-only CSV of per-epoch statistics.
//!
//! Per-iteration columns hold one value per rethinking iteration joined by
//! `;`. Rows are ordered by `(phase, epoch, split)` with `train < test`.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::Split;
use crate::error::{Error, Result};

pub const HEADER: &str =
    "phase,epoch,split,lr,loss_total,loss_per_iter,error_per_iter,error_pred,top1_conf_per_iter,seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub phase: u8,
    /// Epoch counted across phases, starting at 1.
    pub epoch: usize,
    pub split: Split,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_per_iter: Vec<f64>,
    /// Top-1 error in percent for each iteration's posterior.
    pub error_per_iter: Vec<f64>,
    /// Top-1 error in percent of the configured prediction rule.
    pub error_pred: f64,
    pub top1_conf_per_iter: Vec<f64>,
    pub seconds: f64,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(";")
}

fn split_key(s: Split) -> u8 {
    match s {
        Split::Train => 0,
        Split::Test => 1,
    }
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{},{},{:.4},{},{:.3}",
            self.phase,
            self.epoch,
            self.split,
            self.lr,
            self.loss_total,
            join(&self.loss_per_iter),
            join(&self.error_per_iter),
            self.error_pred,
            join(&self.top1_conf_per_iter),
            self.seconds
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let bad = |what: &str| Error::Data(format!("metrics row {line:?}: bad {what}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(bad("field count"));
        }
        let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
        let list = |s: &str, what: &str| s.split(';').map(|x| num(x, what)).collect::<Result<Vec<_>>>();
        Ok(MetricsRow {
            phase: f[0].parse().map_err(|_| bad("phase"))?,
            epoch: f[1].parse().map_err(|_| bad("epoch"))?,
            split: match f[2] {
                "train" => Split::Train,
                "test" => Split::Test,
                _ => return Err(bad("split")),
            },
            lr: num(f[3], "lr")?,
            loss_total: num(f[4], "loss_total")?,
            loss_per_iter: list(f[5], "loss_per_iter")?,
            error_per_iter: list(f[6], "error_per_iter")?,
            error_pred: num(f[7], "error_pred")?,
            top1_conf_per_iter: list(f[8], "top1_conf_per_iter")?,
            seconds: num(f[9], "seconds")?,
        })
    }

    fn key(&self) -> (u8, usize, u8) {
        (self.phase, self.epoch, split_key(self.split))
    }
}

/// Appends rows to a CSV file, writing the header when the file is new and
/// refusing rows that would break the ordering.
#[derive(Debug)]
pub struct MetricsLog {
    path: PathBuf,
    last: Option<(u8, usize, u8)>,
}

impl MetricsLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        fs::write(&path, format!("{HEADER}\n"))?;
        Ok(MetricsLog { path, last: None })
    }

    /// Continues an existing file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if !path.exists() {
            return Self::create(path);
        }
        let last = read_metrics(&path)?.last().map(MetricsRow::key);
        Ok(MetricsLog { path, last })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        let key = row.key();
        if self.last.is_some_and(|last| key <= last) {
            return Err(Error::InvalidArgument(format!(
                "metrics row {key:?} does not follow {:?}",
                self.last.unwrap()
            )));
        }
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        writeln!(f, "{}", row.to_csv())?;
        self.last = Some(key);
        Ok(())
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path.as_ref())?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Data(format!("{}: missing metrics header", path.as_ref().display())));
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRow::from_csv).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(phase: u8, epoch: usize, split: Split) -> MetricsRow {
        MetricsRow {
            phase,
            epoch,
            split,
            lr: 0.01,
            loss_total: 1.5,
            loss_per_iter: vec![0.8, 0.7],
            error_per_iter: vec![12.5, 10.0],
            error_pred: 10.0,
            top1_conf_per_iter: vec![0.6, 0.65],
            seconds: 1.25,
        }
    }

    #[test]
    fn rows_round_trip() {
        let r = row(2, 65, Split::Test);
        assert_eq!(MetricsRow::from_csv(&r.to_csv()).unwrap(), r);
        assert_eq!(r.to_csv().split(',').count(), HEADER.split(',').count());
    }

    #[test]
    fn ordering_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut log = MetricsLog::create(&path).unwrap();
        log.append(&row(1, 1, Split::Train)).unwrap();
        log.append(&row(1, 1, Split::Test)).unwrap();
        assert!(log.append(&row(1, 1, Split::Train)).is_err());
        log.append(&row(2, 2, Split::Train)).unwrap();
        let mut reopened = MetricsLog::open(&path).unwrap();
        assert!(reopened.append(&row(1, 5, Split::Train)).is_err());
        reopened.append(&row(2, 3, Split::Train)).unwrap();
        assert_eq!(read_metrics(&path).unwrap().len(), 4);
    }
}
