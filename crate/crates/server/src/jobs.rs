//! Job records and their store. The store is in memory; with a directory
//! configured every record is also written to `<dir>/<id>.json` on each
//! transition and reloaded at startup.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::ApiError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Outpaint,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    /// Queued → running → done | failed; queued may also fail directly.
    pub fn can_become(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running)
                | (JobState::Queued, JobState::Failed)
                | (JobState::Running, JobState::Done)
                | (JobState::Running, JobState::Failed)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

/// Where a finished job's output lives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultLocator {
    /// Content address (hex SHA-256 of the request).
    pub key: String,
    pub media_type: String,
    /// Download path on this service.
    pub url: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub request: serde_json::Value,
    pub result: Option<ResultLocator>,
    /// Milliseconds since the Unix epoch.
    pub created_ms: u64,
    pub started_ms: Option<u64>,
    pub finished_ms: Option<u64>,
    pub error: Option<ApiError>,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub struct JobStore {
    jobs: Mutex<HashMap<String, Job>>,
    dir: Option<PathBuf>,
    prefix: String,
    counter: AtomicU64,
}

impl JobStore {
    /// Opens the store. Persisted jobs that had not finished are marked
    /// failed, since their inputs did not survive the restart.
    pub fn open(dir: Option<&Path>) -> std::io::Result<Self> {
        let mut jobs = HashMap::new();
        if let Some(d) = dir {
            std::fs::create_dir_all(d)?;
            for entry in std::fs::read_dir(d)? {
                let path = entry?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("json") {
                    continue;
                }
                let text = std::fs::read_to_string(&path)?;
                match serde_json::from_str::<Job>(&text) {
                    Ok(mut job) => {
                        if !job.state.is_terminal() {
                            job.state = JobState::Failed;
                            job.finished_ms = Some(now_ms());
                            job.error = Some(ApiError::new(
                                "interrupted",
                                "service restarted before the job finished",
                            ));
                            std::fs::write(&path, serde_json::to_vec_pretty(&job)?)?;
                        }
                        jobs.insert(job.id.clone(), job);
                    }
                    Err(e) => log::warn!("ignoring unreadable job record {}: {e}", path.display()),
                }
            }
        }
        Ok(Self {
            jobs: Mutex::new(jobs),
            dir: dir.map(Path::to_path_buf),
            prefix: format!("{:x}", now_ms()),
            counter: AtomicU64::new(0),
        })
    }

    fn persist(&self, job: &Job) {
        if let Some(d) = &self.dir {
            let path = d.join(format!("{}.json", job.id));
            let tmp = d.join(format!(".{}.tmp", job.id));
            let res = serde_json::to_vec_pretty(job)
                .map_err(std::io::Error::other)
                .and_then(|bytes| std::fs::write(&tmp, bytes))
                .and_then(|_| std::fs::rename(&tmp, &path));
            if let Err(e) = res {
                log::error!("cannot persist job {}: {e}", job.id);
            }
        }
    }

    pub fn create(&self, kind: JobKind, request: serde_json::Value) -> Job {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let job = Job {
            id: format!("{}-{n:06}", self.prefix),
            kind,
            state: JobState::Queued,
            request,
            result: None,
            created_ms: now_ms(),
            started_ms: None,
            finished_ms: None,
            error: None,
        };
        self.jobs.lock().unwrap().insert(job.id.clone(), job.clone());
        self.persist(&job);
        job
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.jobs.lock().unwrap().get(id).cloned()
    }

    /// Applies a forward transition; backward or repeated transitions are
    /// refused and leave the job untouched.
    pub fn transition(&self, id: &str, next: JobState, update: impl FnOnce(&mut Job)) -> bool {
        let mut jobs = self.jobs.lock().unwrap();
        let Some(job) = jobs.get_mut(id) else { return false };
        if !job.state.can_become(next) {
            log::error!("refusing job {id} transition {:?} -> {next:?}", job.state);
            return false;
        }
        job.state = next;
        match next {
            JobState::Running => job.started_ms = Some(now_ms()),
            JobState::Done | JobState::Failed => job.finished_ms = Some(now_ms()),
            JobState::Queued => {}
        }
        update(job);
        let snapshot = job.clone();
        drop(jobs);
        self.persist(&snapshot);
        true
    }

    pub fn remove(&self, id: &str) {
        self.jobs.lock().unwrap().remove(id);
        if let Some(d) = &self.dir {
            let _ = std::fs::remove_file(d.join(format!("{id}.json")));
        }
    }

    pub fn len(&self) -> usize {
        self.jobs.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
