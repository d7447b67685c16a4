//! Metric reports on disk: `metrics.txt` (flat `key = value`), `metrics.json`
//! and the per-epoch `epochs.jsonl` log.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use lbow_core::metrics::MetricsReport;
use lbow_core::train::EpochReport;

use crate::error::{Error, Result};
use crate::files;

pub const EPOCH_LOG: &str = "epochs.jsonl";

/// Writes both report files into `dir` and returns their paths.
pub fn write_metrics(dir: &Path, report: &MetricsReport) -> Result<(PathBuf, PathBuf)> {
    let txt = dir.join("metrics.txt");
    let json = dir.join("metrics.json");
    files::write_text(&txt, &report.to_text())?;
    files::write_text(&json, &(serde_json::to_string_pretty(report)? + "\n"))?;
    Ok((txt, json))
}

pub fn read_metrics_json(path: &Path) -> Result<MetricsReport> {
    Ok(serde_json::from_str(&files::read_text(path)?)?)
}

pub fn append_epoch(path: &Path, report: &EpochReport) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(Error::io(path))?;
    writeln!(f, "{}", serde_json::to_string(report)?).map_err(Error::io(path))
}

/// Replaces the log with `history` (used when resuming, so the log matches
/// the checkpoint even if a previous run got further).
pub fn write_epochs(path: &Path, history: &[EpochReport]) -> Result<()> {
    let mut text = String::new();
    for r in history {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    files::write_text(path, &text)
}

pub fn read_epochs(path: &Path) -> Result<Vec<EpochReport>> {
    files::read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use lbow_core::metrics::EvalRecord;

    fn report() -> MetricsReport {
        let rec = EvalRecord {
            hypothesis: vec![5, 6, 7],
            references: vec![vec![5, 6, 8]],
            bag: vec![5, 8],
            predicted_bow: vec![5, 8],
            target_bow: vec![5, 6, 8],
            modes: Some(2),
        };
        MetricsReport::from_records(&[rec]).unwrap()
    }

    #[test]
    fn json_report_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let r = report();
        let (txt, json) = write_metrics(dir.path(), &r).unwrap();
        assert_eq!(read_metrics_json(&json).unwrap(), r);
        assert!(fs::read_to_string(txt).unwrap().contains("bleu2 = "));
    }

    #[test]
    fn epoch_log_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(EPOCH_LOG);
        let e = |epoch| EpochReport { epoch, train_loss: 1.5, train_bow_loss: None, heldout_loss: Some(2.0), metrics: Some(report()) };
        append_epoch(&path, &e(1)).unwrap();
        append_epoch(&path, &e(2)).unwrap();
        assert_eq!(read_epochs(&path).unwrap(), vec![e(1), e(2)]);
        write_epochs(&path, &[e(1)]).unwrap();
        assert_eq!(read_epochs(&path).unwrap(), vec![e(1)]);
    }
}
