//! Append-only ledger journal: one JSON record per line, flushed as written.
//! A torn or unparseable record ends the usable prefix.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::job::JobConfigRecord;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rec", rename_all = "snake_case")]
pub enum JournalRecord {
    Start {
        config: JobConfigRecord,
    },
    Assign {
        job_id: String,
        agent_id: String,
        first_key: String,
        last_key: String,
    },
    Progress {
        job_id: String,
        current_key: String,
        keys_tried: u64,
    },
    Exhausted {
        job_id: String,
    },
    /// Active assignment abandoned: searched prefix closed, remainder requeued.
    Release {
        job_id: String,
    },
    Found {
        job_id: String,
        key: String,
    },
}

/// The valid prefix of a journal.
#[derive(Debug, Clone, Default)]
pub struct JournalScan {
    pub records: Vec<JournalRecord>,
    /// Byte length of the valid prefix.
    pub valid_bytes: u64,
    /// End offset of each record.
    pub ends: Vec<u64>,
    /// A corrupt or torn record was found and everything from it on ignored.
    pub truncated: bool,
}

pub fn read_journal<R: Read>(reader: R) -> io::Result<JournalScan> {
    let mut reader = BufReader::new(reader);
    let mut scan = JournalScan::default();
    let mut line = Vec::new();
    loop {
        line.clear();
        let n = reader.read_until(b'\n', &mut line)?;
        if n == 0 {
            break;
        }
        if line.last() != Some(&b'\n') {
            scan.truncated = true;
            break;
        }
        match serde_json::from_slice::<JournalRecord>(&line[..n - 1]) {
            Ok(rec) => {
                scan.records.push(rec);
                scan.valid_bytes += n as u64;
                scan.ends.push(scan.valid_bytes);
            }
            Err(_) => {
                scan.truncated = true;
                break;
            }
        }
    }
    Ok(scan)
}

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Journal {
    /// Starts a new journal, replacing any file at `path`.
    pub fn create(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path)?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
        })
    }

    /// Reopens an existing journal for appending after its first `valid_bytes`
    /// bytes; anything beyond is cut off.
    pub fn reopen(path: impl AsRef<Path>, valid_bytes: u64) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().write(true).open(&path)?;
        file.set_len(valid_bytes)?;
        let file = OpenOptions::new().append(true).open(&path)?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &JournalRecord) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }

    pub fn sync(&mut self) -> io::Result<()> {
        self.out.flush()?;
        self.out.get_ref().sync_data()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torn_tail_is_dropped() {
        let good = "{\"rec\":\"exhausted\",\"job_id\":\"j0\"}\n";
        let text = format!("{good}{good}{{\"rec\":\"exhausted\",\"job");
        let scan = read_journal(text.as_bytes()).unwrap();
        assert_eq!(scan.records.len(), 2);
        assert_eq!(scan.valid_bytes as usize, 2 * good.len());
        assert!(scan.truncated);

        let text = format!("{good}garbage\n{good}");
        let scan = read_journal(text.as_bytes()).unwrap();
        assert_eq!(scan.records.len(), 1);
        assert!(scan.truncated);

        let scan = read_journal(good.as_bytes()).unwrap();
        assert!(!scan.truncated);
    }

    #[test]
    fn reopen_truncates_then_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.log");
        let rec = JournalRecord::Exhausted { job_id: "j1".into() };
        let mut j = Journal::create(&path).unwrap();
        j.append(&rec).unwrap();
        drop(j);
        let mut bytes = std::fs::read(&path).unwrap();
        let valid = bytes.len() as u64;
        bytes.extend(b"{\"rec\":");
        std::fs::write(&path, &bytes).unwrap();

        let mut j = Journal::reopen(&path, valid).unwrap();
        j.append(&JournalRecord::Release { job_id: "j2".into() }).unwrap();
        let scan = read_journal(File::open(&path).unwrap()).unwrap();
        assert!(!scan.truncated);
        assert_eq!(
            scan.records,
            vec![rec, JournalRecord::Release { job_id: "j2".into() }]
        );
    }
}
