//! Persisted FIFO job queue. Every state change is written to `jobs.json`
//! before it becomes visible, so queued and interrupted jobs survive a
//! restart and are re-enqueued in submission order.

use std::collections::{HashMap, VecDeque};
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use image::ImageFormat;
use partsmith::generation::{GenerationRequest, ImageGenerator, Provenance};
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;
use uuid::Uuid;

use crate::error::{Result, ServiceError};

pub const JOB_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: Uuid,
    pub request: GenerationRequest,
    pub status: JobStatus,
    pub result_ref: Option<String>,
    pub error: Option<String>,
    pub provenance: Option<Provenance>,
    /// Unix milliseconds.
    pub created_at: u64,
    pub started_at: Option<u64>,
    pub finished_at: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct JobFile {
    schema_version: u32,
    jobs: Vec<Job>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

struct Inner {
    jobs: HashMap<Uuid, Job>,
    /// Submission order, used for persistence.
    order: Vec<Uuid>,
    pending: VecDeque<Uuid>,
    running: usize,
}

/// Job records plus generated images under one state directory.
pub struct JobQueue {
    dir: PathBuf,
    inner: Mutex<Inner>,
    wake: Notify,
}

impl JobQueue {
    /// Opens (or creates) the queue in `dir`. Jobs left queued or running by
    /// a previous process go back to the queue.
    pub fn open(dir: &Path) -> Result<Self> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| ServiceError::io(&images, e))?;
        let path = dir.join("jobs.json");
        let mut inner = Inner {
            jobs: HashMap::new(),
            order: Vec::new(),
            pending: VecDeque::new(),
            running: 0,
        };
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| ServiceError::io(&path, e))?;
            let file: JobFile = serde_json::from_str(&text)?;
            if file.schema_version != JOB_SCHEMA_VERSION {
                return Err(ServiceError::BadRequest(format!(
                    "job file schema {} (expected {JOB_SCHEMA_VERSION})",
                    file.schema_version
                )));
            }
            for mut job in file.jobs {
                if matches!(job.status, JobStatus::Queued | JobStatus::Running) {
                    job.status = JobStatus::Queued;
                    job.started_at = None;
                    inner.pending.push_back(job.id);
                }
                inner.order.push(job.id);
                inner.jobs.insert(job.id, job);
            }
            if !inner.pending.is_empty() {
                log::info!("re-enqueued {} unfinished jobs", inner.pending.len());
            }
        }
        let q = JobQueue {
            dir: dir.to_path_buf(),
            inner: Mutex::new(inner),
            wake: Notify::new(),
        };
        q.persist(&q.lock())?;
        Ok(q)
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn persist(&self, inner: &Inner) -> Result<()> {
        let file = JobFile {
            schema_version: JOB_SCHEMA_VERSION,
            jobs: inner.order.iter().map(|id| inner.jobs[id].clone()).collect(),
        };
        let path = self.dir.join("jobs.json");
        let tmp = self.dir.join("jobs.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&file)?).map_err(|e| ServiceError::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| ServiceError::io(&path, e))
    }

    pub fn submit(&self, request: GenerationRequest) -> Result<Job> {
        let job = Job {
            id: Uuid::new_v4(),
            request,
            status: JobStatus::Queued,
            result_ref: None,
            error: None,
            provenance: None,
            created_at: now_ms(),
            started_at: None,
            finished_at: None,
        };
        {
            let mut inner = self.lock();
            inner.jobs.insert(job.id, job.clone());
            inner.order.push(job.id);
            inner.pending.push_back(job.id);
            if let Err(e) = self.persist(&inner) {
                inner.jobs.remove(&job.id);
                inner.order.pop();
                inner.pending.pop_back();
                return Err(e);
            }
        }
        self.wake.notify_one();
        Ok(job)
    }

    pub fn get(&self, id: Uuid) -> Option<Job> {
        self.lock().jobs.get(&id).cloned()
    }

    pub fn queued(&self) -> usize {
        self.lock().pending.len()
    }

    pub fn running(&self) -> usize {
        self.lock().running
    }

    /// Marks the oldest queued job running and returns it.
    fn claim(&self) -> Result<Option<Job>> {
        let mut inner = self.lock();
        let Some(id) = inner.pending.pop_front() else {
            return Ok(None);
        };
        inner.running += 1;
        let job = inner.jobs.get_mut(&id).expect("pending job exists");
        job.status = JobStatus::Running;
        job.started_at = Some(now_ms());
        let job = job.clone();
        self.persist(&inner)?;
        Ok(Some(job))
    }

    fn finish(&self, id: Uuid, outcome: std::result::Result<(String, Provenance), String>) -> Result<()> {
        let mut inner = self.lock();
        inner.running -= 1;
        let job = inner.jobs.get_mut(&id).expect("claimed job exists");
        job.finished_at = Some(now_ms());
        match outcome {
            Ok((image_id, provenance)) => {
                job.status = JobStatus::Done;
                job.result_ref = Some(image_id);
                job.provenance = Some(provenance);
            }
            Err(msg) => {
                job.status = JobStatus::Failed;
                job.error = Some(msg);
            }
        }
        self.persist(&inner)
    }

    pub fn image_path(&self, image_id: &str) -> Option<PathBuf> {
        Uuid::parse_str(image_id)
            .ok()
            .map(|u| self.dir.join("images").join(format!("{u}.png")))
    }

    fn store_image(&self, image: &image::RgbImage, provenance: &Provenance) -> Result<String> {
        let id = Uuid::new_v4().to_string();
        let dir = self.dir.join("images");
        let mut png = Vec::new();
        image.write_to(&mut Cursor::new(&mut png), ImageFormat::Png)?;
        let path = dir.join(format!("{id}.png"));
        std::fs::write(&path, png).map_err(|e| ServiceError::io(&path, e))?;
        let meta = dir.join(format!("{id}.json"));
        std::fs::write(&meta, serde_json::to_vec_pretty(provenance)?).map_err(|e| ServiceError::io(&meta, e))?;
        Ok(id)
    }

    /// Runs one queued job to completion; returns false if none was queued.
    pub async fn run_next(self: &Arc<Self>, generator: Arc<dyn ImageGenerator>) -> Result<bool> {
        let Some(job) = self.claim()? else {
            return Ok(false);
        };
        let request = job.request.clone();
        let generated = tokio::task::spawn_blocking(move || generator.generate(&request))
            .await
            .map_err(|e| ServiceError::BadRequest(format!("generation task failed: {e}")));
        let outcome = match generated {
            Ok(Ok(g)) => match self.store_image(&g.image, &g.provenance) {
                Ok(image_id) => Ok((image_id, g.provenance)),
                Err(e) => Err(e.to_string()),
            },
            Ok(Err(e)) => Err(e.to_string()),
            Err(e) => Err(e.to_string()),
        };
        if let Err(msg) = &outcome {
            log::warn!("job {} failed: {msg}", job.id);
        }
        self.finish(job.id, outcome)?;
        Ok(true)
    }

    /// Starts `workers` background tasks draining the queue; each runs one
    /// generation at a time.
    pub fn spawn_workers(self: &Arc<Self>, generator: Arc<dyn ImageGenerator>, workers: usize) {
        for _ in 0..workers {
            let q = Arc::clone(self);
            let g = Arc::clone(&generator);
            tokio::spawn(async move {
                loop {
                    match q.run_next(Arc::clone(&g)).await {
                        Ok(true) => {}
                        Ok(false) => q.wake.notified().await,
                        Err(e) => {
                            log::error!("job queue: {e}");
                            q.wake.notified().await;
                        }
                    }
                }
            });
        }
        // Pick up anything re-enqueued from a previous run.
        for _ in 0..workers {
            self.wake.notify_one();
        }
    }
}
