//! Append-only JSONL log of annotation records.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ftmp_core::study::AnnotationRecord;

use crate::ServiceError;

pub struct AnnotationStore {
    path: PathBuf,
    file: File,
    records: Vec<AnnotationRecord>,
    keys: HashSet<(String, String)>,
}

#[derive(Debug)]
pub enum Append {
    Written,
    Duplicate,
}

impl AnnotationStore {
    /// Opens or creates the log. A trailing line without a newline is the
    /// remains of an interrupted write that was never acknowledged; it is
    /// cut off. Any other unparsable line is an error.
    pub fn open(path: &Path) -> Result<Self, ServiceError> {
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        let complete = buf.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        if complete < buf.len() {
            log::warn!(
                "{}: dropping {} bytes of incomplete trailing record",
                path.display(),
                buf.len() - complete
            );
            file.set_len(complete as u64)?;
            file.sync_all()?;
            file.seek(SeekFrom::End(0))?;
        }
        let text = std::str::from_utf8(&buf[..complete])
            .map_err(|e| ServiceError::Store(format!("{}: {e}", path.display())))?;
        let mut store = AnnotationStore {
            path: path.to_path_buf(),
            file,
            records: Vec::new(),
            keys: HashSet::new(),
        };
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: AnnotationRecord = serde_json::from_str(line)
                .map_err(|e| ServiceError::Store(format!("{}:{}: {e}", path.display(), i + 1)))?;
            store.keys.insert((r.annotator_id.clone(), r.example_id.clone()));
            store.records.push(r);
        }
        Ok(store)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> &[AnnotationRecord] {
        &self.records
    }

    pub fn contains(&self, annotator: &str, example: &str) -> bool {
        self.keys.contains(&(annotator.to_string(), example.to_string()))
    }

    /// Writes one line and syncs it to disk before returning.
    pub fn append(&mut self, record: AnnotationRecord) -> Result<Append, ServiceError> {
        let key = (record.annotator_id.clone(), record.example_id.clone());
        if self.keys.contains(&key) {
            return Ok(Append::Duplicate);
        }
        let mut line = serde_json::to_vec(&record).map_err(|e| ServiceError::Store(e.to_string()))?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        self.keys.insert(key);
        self.records.push(record);
        Ok(Append::Written)
    }
}
