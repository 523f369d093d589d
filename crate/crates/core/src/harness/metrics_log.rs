//! Line-delimited JSON metrics log. Every line is one self-describing record:
//! `{"v":1,"tag":"raw","epoch":0,"lr":0.1,...}`.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::MetricsRecord;

pub const LOG_VERSION: u32 = 1;
/// Tag of the live training trajectory.
pub const RAW_TAG: &str = "raw";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub v: u32,
    pub tag: String,
    #[serde(flatten)]
    pub record: MetricsRecord,
}

/// Append-only writer; each record is flushed as soon as it is written.
pub struct MetricsLog {
    path: PathBuf,
    file: File,
}

impl MetricsLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(MetricsLog { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, tag: &str, record: &MetricsRecord) -> Result<()> {
        let entry = LogEntry {
            v: LOG_VERSION,
            tag: tag.to_string(),
            record: record.clone(),
        };
        let mut line = serde_json::to_string(&entry)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            let entry: LogEntry = serde_json::from_str(&line).map_err(|e| Error::Format {
                offset,
                message: format!("bad metrics record: {e}"),
            })?;
            if entry.v != LOG_VERSION {
                return Err(Error::Version {
                    found: entry.v,
                    expected: LOG_VERSION,
                });
            }
            out.push(entry);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

/// Records carrying `tag`, in log order.
pub fn records_with_tag(entries: &[LogEntry], tag: &str) -> Vec<MetricsRecord> {
    entries
        .iter()
        .filter(|e| e.tag == tag)
        .map(|e| e.record.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut log = MetricsLog::create(&path).unwrap();
        let r = MetricsRecord {
            epoch: 3,
            lr: 0.01,
            train_loss: Some(0.5),
            train_clean_acc: Some(0.9),
            train_robust_acc: Some(0.6),
            test_clean_acc: 0.8,
            test_robust_acc: 0.4,
        };
        log.append(RAW_TAG, &r).unwrap();
        let ens = MetricsRecord {
            train_loss: None,
            train_clean_acc: None,
            train_robust_acc: None,
            ..r.clone()
        };
        log.append("meat_median", &ens).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text
            .lines()
            .next()
            .unwrap()
            .contains("\"test_robust_acc\":0.4"));

        let back = read_log(&path).unwrap();
        assert_eq!(records_with_tag(&back, RAW_TAG), vec![r]);
        assert_eq!(records_with_tag(&back, "meat_median"), vec![ens]);
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(
            &path,
            "{\"v\":7,\"tag\":\"raw\",\"epoch\":0,\"lr\":0.1,\"test_clean_acc\":0.5,\"test_robust_acc\":0.2}\n",
        )
        .unwrap();
        assert!(matches!(
            read_log(&path),
            Err(Error::Version { found: 7, .. })
        ));
    }
}
