//! Job records, the append-only journal and the in-memory job table.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tcr_core::annotations::Rect;

pub const JOURNAL_FILE: &str = "jobs.jsonl";
pub const RESULTS_DIR: &str = "results";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn can_become(self, next: JobStatus) -> bool {
        matches!(
            (self, next),
            (JobStatus::Queued, JobStatus::Running)
                | (JobStatus::Running, JobStatus::Done)
                | (JobStatus::Running, JobStatus::Failed)
                | (JobStatus::Queued, JobStatus::Failed)
        )
    }

    pub fn is_final(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobProgress {
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub slide: String,
    pub region: Rect,
    pub status: JobStatus,
    /// Unix seconds.
    pub submitted: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub progress: JobProgress,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

#[derive(Debug, thiserror::Error)]
pub enum JobError {
    #[error("journal i/o at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("unknown job {0}")]
    Unknown(String),
    #[error("job {id}: {from:?} cannot become {to:?}")]
    Transition { id: String, from: JobStatus, to: JobStatus },
    #[error("idempotency key {0} was used for a different request")]
    KeyConflict(String),
}

/// Outcome of a submission.
#[derive(Debug, Clone, PartialEq)]
pub enum Submitted {
    New(JobRecord),
    Existing(JobRecord),
}

struct Table {
    records: HashMap<String, JobRecord>,
    keys: HashMap<String, String>,
    journal: File,
}

/// Job table whose every state change is appended to a JSON-lines journal
/// before it becomes visible. All writes go through one lock.
pub struct JobStore {
    dir: PathBuf,
    table: Mutex<Table>,
}

impl JobStore {
    /// Opens or creates the store in `dir`, replaying the journal. Jobs that
    /// were queued or running are returned in submission order so the caller
    /// can run them again; done jobs whose result file is gone are failed.
    pub fn open(dir: &Path) -> Result<(Self, Vec<JobRecord>), JobError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| JobError::Io { path, source }
        };
        std::fs::create_dir_all(dir.join(RESULTS_DIR)).map_err(io(dir))?;
        let path = dir.join(JOURNAL_FILE);
        let mut records: HashMap<String, JobRecord> = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(io(&path))?);
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(io(&path))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<JobRecord>(&line) {
                    Ok(r) => {
                        records.insert(r.id.clone(), r);
                    }
                    // a torn last line from a crash mid-append
                    Err(e) => tracing::warn!(line = n + 1, error = %e, "skipping unreadable journal line"),
                }
            }
        }
        let journal = OpenOptions::new().create(true).append(true).open(&path).map_err(io(&path))?;
        let keys = records
            .values()
            .filter_map(|r| r.idempotency_key.clone().map(|k| (k, r.id.clone())))
            .collect();
        let store = Self { dir: dir.to_path_buf(), table: Mutex::new(Table { records, keys, journal }) };

        let mut requeue = Vec::new();
        {
            let mut t = store.lock();
            let ids: Vec<String> = t.records.keys().cloned().collect();
            for id in ids {
                let mut r = t.records[&id].clone();
                match r.status {
                    JobStatus::Queued | JobStatus::Running => {
                        r.status = JobStatus::Queued;
                        r.started = None;
                        r.progress = JobProgress::default();
                        append(&mut t, &r, &path)?;
                        requeue.push(r);
                    }
                    JobStatus::Done if !r.result.as_ref().is_some_and(|p| p.exists()) => {
                        r.status = JobStatus::Failed;
                        r.error = Some("result file missing after restart".into());
                        r.finished.get_or_insert_with(now);
                        append(&mut t, &r, &path)?;
                    }
                    _ => {}
                }
            }
        }
        requeue.sort_by(|a, b| a.submitted.total_cmp(&b.submitted).then(a.id.cmp(&b.id)));
        Ok((store, requeue))
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Table> {
        self.table.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn result_path(&self, id: &str) -> PathBuf {
        self.dir.join(RESULTS_DIR).join(format!("{id}.json"))
    }

    pub fn get(&self, id: &str) -> Option<JobRecord> {
        self.lock().records.get(id).cloned()
    }

    pub fn list(&self) -> Vec<JobRecord> {
        let mut v: Vec<JobRecord> = self.lock().records.values().cloned().collect();
        v.sort_by(|a, b| a.submitted.total_cmp(&b.submitted).then(a.id.cmp(&b.id)));
        v
    }

    /// Queues a job, or returns the job already created under `key` for the
    /// same slide and region.
    pub fn submit(&self, slide: &str, region: Rect, key: Option<String>) -> Result<Submitted, JobError> {
        let mut t = self.lock();
        if let Some(k) = &key {
            if let Some(id) = t.keys.get(k) {
                let r = &t.records[id];
                if r.slide == slide && r.region == region {
                    return Ok(Submitted::Existing(r.clone()));
                }
                return Err(JobError::KeyConflict(k.clone()));
            }
        }
        let r = JobRecord {
            id: uuid::Uuid::new_v4().simple().to_string(),
            slide: slide.to_string(),
            region,
            status: JobStatus::Queued,
            submitted: now(),
            started: None,
            finished: None,
            result: None,
            error: None,
            progress: JobProgress::default(),
            idempotency_key: key.clone(),
        };
        let path = self.dir.join(JOURNAL_FILE);
        append(&mut t, &r, &path)?;
        if let Some(k) = key {
            t.keys.insert(k, r.id.clone());
        }
        Ok(Submitted::New(r))
    }

    /// Applies a status change after checking it is allowed.
    pub fn transition(&self, id: &str, to: JobStatus, edit: impl FnOnce(&mut JobRecord)) -> Result<JobRecord, JobError> {
        let mut t = self.lock();
        let mut r = t.records.get(id).cloned().ok_or_else(|| JobError::Unknown(id.to_string()))?;
        if !r.status.can_become(to) {
            return Err(JobError::Transition { id: id.to_string(), from: r.status, to });
        }
        r.status = to;
        match to {
            JobStatus::Running => r.started = Some(now()),
            JobStatus::Done | JobStatus::Failed => r.finished = Some(now()),
            JobStatus::Queued => {}
        }
        edit(&mut r);
        let path = self.dir.join(JOURNAL_FILE);
        append(&mut t, &r, &path)?;
        Ok(r)
    }

    /// Progress is kept in memory only; it never decreases.
    pub fn set_progress(&self, id: &str, done: usize, total: usize) {
        if let Some(r) = self.lock().records.get_mut(id) {
            if r.status == JobStatus::Running && done >= r.progress.done {
                r.progress = JobProgress { done, total };
            }
        }
    }
}

fn append(t: &mut Table, r: &JobRecord, path: &Path) -> Result<(), JobError> {
    let mut line = serde_json::to_vec(r).expect("job records serialize");
    line.push(b'\n');
    t.journal
        .write_all(&line)
        .and_then(|_| t.journal.sync_data())
        .map_err(|source| JobError::Io { path: path.to_path_buf(), source })?;
    t.records.insert(r.id.clone(), r.clone());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transitions() {
        use JobStatus::*;
        assert!(Queued.can_become(Running) && Running.can_become(Done) && Running.can_become(Failed));
        assert!(!Done.can_become(Running) && !Running.can_become(Queued) && !Queued.can_become(Done));
    }

    #[test]
    fn replay_requeues_unfinished_jobs() {
        let dir = tempfile::tempdir().unwrap();
        let (store, requeued) = JobStore::open(dir.path()).unwrap();
        assert!(requeued.is_empty());
        let a = match store.submit("s", Rect::new(0, 0, 5, 5), None).unwrap() {
            Submitted::New(r) => r,
            other => panic!("{other:?}"),
        };
        let b = match store.submit("s", Rect::new(0, 0, 6, 6), Some("k".into())).unwrap() {
            Submitted::New(r) => r,
            other => panic!("{other:?}"),
        };
        store.transition(&a.id, JobStatus::Running, |_| {}).unwrap();
        assert!(store.transition(&a.id, JobStatus::Queued, |_| {}).is_err());
        drop(store);

        let (store, requeued) = JobStore::open(dir.path()).unwrap();
        let ids: Vec<&str> = requeued.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, vec![a.id.as_str(), b.id.as_str()]);
        assert!(requeued.iter().all(|r| r.status == JobStatus::Queued));
        assert_eq!(store.submit("s", Rect::new(0, 0, 6, 6), Some("k".into())).unwrap(), Submitted::Existing(requeued[1].clone()));
        assert!(matches!(store.submit("s", Rect::new(0, 0, 7, 7), Some("k".into())), Err(JobError::KeyConflict(_))));
    }
}
