//! Append-only JSON-lines result persistence, one file per household.
//!
//! Appends are flushed and synced before returning, so an envelope can
//! safely be acked once `append` comes back. Queries re-read from disk
//! so results written by other processes sharing the directory are
//! visible.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::config::ResultRecord;
use crate::ServiceError;

pub struct ResultStore {
    dir: PathBuf,
    /// (household, ts_ms, producer) of every record already written.
    seen: Mutex<HashSet<(String, i64, String)>>,
}

fn household_file(dir: &Path, household_id: &str) -> PathBuf {
    // household ids come from configs; keep filenames tame anyway
    let safe: String = household_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    dir.join(format!("{safe}.jsonl"))
}

impl ResultStore {
    /// Opens (creating the directory if needed) and indexes existing
    /// records for dedup.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)
            .map_err(|e| ServiceError::Persist(format!("cannot create {}: {e}", dir.display())))?;
        // probe writability up front so startup fails loudly
        let probe = dir.join(".probe");
        File::create(&probe)
            .and_then(|_| fs::remove_file(&probe))
            .map_err(|e| ServiceError::Persist(format!("{} not writable: {e}", dir.display())))?;
        let store = Self { dir, seen: Mutex::new(HashSet::new()) };
        let mut seen = HashSet::new();
        for rec in store.scan_all()? {
            seen.insert((rec.household_id.clone(), rec.ts_ms, rec.producer.clone()));
        }
        *store.seen.lock().unwrap() = seen;
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn scan_file(path: &Path) -> Result<Vec<ResultRecord>, ServiceError> {
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ResultRecord = serde_json::from_str(&line).map_err(|e| {
                ServiceError::Persist(format!("{}:{}: bad record: {e}", path.display(), i + 1))
            })?;
            records.push(rec);
        }
        Ok(records)
    }

    fn scan_all(&self) -> Result<Vec<ResultRecord>, ServiceError> {
        let mut all = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "jsonl") {
                all.extend(Self::scan_file(&path)?);
            }
        }
        Ok(all)
    }

    /// Appends one record; duplicates of an already persisted
    /// (household, ts, producer) key are silently skipped. Returns
    /// whether the record was written.
    pub fn append(&self, record: &ResultRecord) -> Result<bool, ServiceError> {
        record.validate()?;
        let key = (record.household_id.clone(), record.ts_ms, record.producer.clone());
        let mut seen = self.seen.lock().unwrap();
        if seen.contains(&key) {
            return Ok(false);
        }
        let path = household_file(&self.dir, &record.household_id);
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        let line = serde_json::to_string(record)
            .map_err(|e| ServiceError::Persist(format!("serialize failed: {e}")))?;
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
        file.flush()?;
        file.sync_data()?;
        seen.insert(key);
        Ok(true)
    }

    /// Records for one household with `from <= ts_ms <= to`, in time
    /// order (stable across producers).
    pub fn query(
        &self,
        household_id: &str,
        from: i64,
        to: i64,
    ) -> Result<Vec<ResultRecord>, ServiceError> {
        let mut records: Vec<ResultRecord> =
            Self::scan_file(&household_file(&self.dir, household_id))?
                .into_iter()
                .filter(|r| r.household_id == household_id && r.ts_ms >= from && r.ts_ms <= to)
                .collect();
        records.sort_by_key(|r| r.ts_ms);
        Ok(records)
    }

    /// Most recent record for a household, optionally restricted to
    /// one producer.
    pub fn latest(
        &self,
        household_id: &str,
        producer: Option<&str>,
    ) -> Result<Option<ResultRecord>, ServiceError> {
        Ok(Self::scan_file(&household_file(&self.dir, household_id))?
            .into_iter()
            .filter(|r| {
                r.household_id == household_id
                    && producer.is_none_or(|p| r.producer == p)
            })
            .max_by_key(|r| r.ts_ms))
    }
}
