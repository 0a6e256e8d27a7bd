//! Single-directory persistence: image blobs under `blobs/` named by their
//! SHA-256, document and job metadata as JSON under `documents/` and `jobs/`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use rotulus::corpus::Point;
use rotulus::correct::CorrectionResult;
use rotulus::lineproc::RasterImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl CropRect {
    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x >= 0
            && self.y >= 0
            && self.w > 0
            && self.h > 0
            && self.x + self.w <= width as i64
            && self.y + self.h <= height as i64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Baseline {
    pub id: String,
    pub points: Vec<Point>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Uploaded,
    Cropped,
    Segmented,
    Transcribed,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamps {
    pub uploaded: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cropped: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmented: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcribed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translated: Option<u64>,
}

/// Everything known about one uploaded page. Raw and corrected text are kept
/// side by side; correction never replaces `raw`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub id: String,
    /// SHA-256 of the uploaded bytes; the blob's file name.
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub crop: Option<CropRect>,
    pub baselines: Option<Vec<Baseline>>,
    /// One entry per baseline, same order.
    pub raw: Option<Vec<String>>,
    pub corrected: Option<CorrectionResult>,
    pub translation: Option<String>,
    pub timestamps: Timestamps,
    /// Bumped by every change that invalidates running jobs.
    pub revision: u64,
}

impl DocumentRecord {
    pub fn stage(&self) -> Stage {
        if self.raw.is_some() {
            Stage::Transcribed
        } else if self.baselines.is_some() {
            Stage::Segmented
        } else if self.crop.is_some() {
            Stage::Cropped
        } else {
            Stage::Uploaded
        }
    }

    /// Size of the image the pipeline works on (the crop when set).
    pub fn working_size(&self) -> (usize, usize) {
        match self.crop {
            Some(c) => (c.w as usize, c.h as usize),
            None => (self.width, self.height),
        }
    }

    /// Drops everything derived from the baselines.
    pub fn clear_text(&mut self) {
        self.raw = None;
        self.corrected = None;
        self.translation = None;
        self.timestamps.transcribed = None;
        self.timestamps.corrected = None;
        self.timestamps.translated = None;
    }

    pub fn clear_from_baselines(&mut self) {
        self.baselines = None;
        self.timestamps.segmented = None;
        self.clear_text();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Segment,
    Transcribe,
    Correct,
    Translate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub document: String,
    pub state: JobState,
    /// Path of the resource holding the result, once done.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub created: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("stored image {0}: {1}")]
    Image(String, String),
}

#[derive(Default)]
struct Inner {
    docs: HashMap<String, DocumentRecord>,
    jobs: HashMap<String, Job>,
    images: HashMap<String, Arc<RasterImage>>,
}

pub struct Store {
    dir: PathBuf,
    inner: Mutex<Inner>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

fn load_dir<T: serde::de::DeserializeOwned>(dir: &Path) -> Result<Vec<T>, StoreError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            out.push(serde_json::from_slice(&std::fs::read(&path)?)?);
        }
    }
    Ok(out)
}

impl Store {
    /// Opens or creates a store. Jobs that were queued or running when the
    /// previous process stopped are marked failed.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        for sub in ["blobs", "documents", "jobs"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        let store = Store {
            dir: dir.to_path_buf(),
            inner: Mutex::new(Inner::default()),
        };
        let docs: Vec<DocumentRecord> = load_dir(&dir.join("documents"))?;
        let jobs: Vec<Job> = load_dir(&dir.join("jobs"))?;
        {
            let mut g = store.lock();
            g.docs = docs.into_iter().map(|d| (d.id.clone(), d)).collect();
            g.jobs = jobs.into_iter().map(|j| (j.id.clone(), j)).collect();
        }
        let stale: Vec<String> = store
            .lock()
            .jobs
            .values()
            .filter(|j| !j.state.is_terminal())
            .map(|j| j.id.clone())
            .collect();
        for id in stale {
            store.finish_job(&id, Err("interrupted by a service restart".into()))?;
        }
        Ok(store)
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn blob_path(&self, hash: &str) -> PathBuf {
        self.dir.join("blobs").join(hash)
    }

    fn save_doc(&self, d: &DocumentRecord) -> Result<(), StoreError> {
        let p = self.dir.join("documents").join(format!("{}.json", d.id));
        write_atomic(&p, &serde_json::to_vec_pretty(d)?)?;
        Ok(())
    }

    fn save_job(&self, j: &Job) -> Result<(), StoreError> {
        let p = self.dir.join("jobs").join(format!("{}.json", j.id));
        write_atomic(&p, &serde_json::to_vec_pretty(j)?)?;
        Ok(())
    }

    /// Stores the upload under its hash and creates a document for it.
    pub fn create_document(&self, bytes: &[u8], image: RasterImage) -> Result<DocumentRecord, StoreError> {
        let hash = hex::encode(Sha256::digest(bytes));
        let path = self.blob_path(&hash);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        let doc = DocumentRecord {
            id: uuid::Uuid::new_v4().simple().to_string(),
            image: hash.clone(),
            width: image.width(),
            height: image.height(),
            crop: None,
            baselines: None,
            raw: None,
            corrected: None,
            translation: None,
            timestamps: Timestamps {
                uploaded: now_ms(),
                ..Default::default()
            },
            revision: 0,
        };
        self.save_doc(&doc)?;
        let mut g = self.lock();
        g.images.insert(hash, Arc::new(image));
        g.docs.insert(doc.id.clone(), doc.clone());
        Ok(doc)
    }

    pub fn document(&self, id: &str) -> Option<DocumentRecord> {
        self.lock().docs.get(id).cloned()
    }

    /// Applies `f` to a document under the store lock and persists the
    /// result if `f` succeeds. Returns `None` for an unknown id.
    pub fn update_document<T, E: From<StoreError>>(
        &self,
        id: &str,
        f: impl FnOnce(&mut DocumentRecord) -> Result<T, E>,
    ) -> Option<Result<T, E>> {
        let mut g = self.lock();
        let doc = g.docs.get_mut(id)?;
        let mut copy = doc.clone();
        let out = match f(&mut copy) {
            Ok(v) => v,
            Err(e) => return Some(Err(e)),
        };
        if copy != *doc {
            if let Err(e) = self.save_doc(&copy) {
                return Some(Err(e.into()));
            }
            *doc = copy;
        }
        Some(Ok(out))
    }

    /// Decoded original image of a document.
    pub fn image(&self, doc: &DocumentRecord) -> Result<Arc<RasterImage>, StoreError> {
        if let Some(img) = self.lock().images.get(&doc.image) {
            return Ok(img.clone());
        }
        let bytes = std::fs::read(self.blob_path(&doc.image))?;
        let img = RasterImage::decode(&bytes).map_err(|e| StoreError::Image(doc.image.clone(), e.to_string()))?;
        let img = Arc::new(img);
        self.lock().images.insert(doc.image.clone(), img.clone());
        Ok(img)
    }

    /// The cropped image when a crop is set, otherwise the original.
    pub fn working_image(&self, doc: &DocumentRecord) -> Result<Arc<RasterImage>, StoreError> {
        let img = self.image(doc)?;
        match doc.crop {
            None => Ok(img),
            Some(c) => img
                .crop(c.x as usize, c.y as usize, c.w as usize, c.h as usize)
                .map(Arc::new)
                .map_err(|e| StoreError::Image(doc.image.clone(), e.to_string())),
        }
    }

    pub fn create_job(&self, kind: JobKind, document: &str) -> Result<Job, StoreError> {
        let job = Job {
            id: uuid::Uuid::new_v4().simple().to_string(),
            kind,
            document: document.to_string(),
            state: JobState::Queued,
            result: None,
            error: None,
            created: now_ms(),
            finished: None,
        };
        self.save_job(&job)?;
        self.lock().jobs.insert(job.id.clone(), job.clone());
        Ok(job)
    }

    pub fn job(&self, id: &str) -> Option<Job> {
        self.lock().jobs.get(id).cloned()
    }

    pub fn start_job(&self, id: &str) -> Result<(), StoreError> {
        let mut g = self.lock();
        if let Some(j) = g.jobs.get_mut(id) {
            if j.state == JobState::Queued {
                j.state = JobState::Running;
                let j = j.clone();
                self.save_job(&j)?;
            }
        }
        Ok(())
    }

    /// Moves a job to a terminal state. A job that is already terminal is
    /// left untouched.
    pub fn finish_job(&self, id: &str, outcome: Result<Option<String>, String>) -> Result<(), StoreError> {
        let mut g = self.lock();
        let Some(j) = g.jobs.get_mut(id) else {
            return Ok(());
        };
        if j.state.is_terminal() {
            return Ok(());
        }
        match outcome {
            Ok(result) => {
                j.state = JobState::Done;
                j.result = result;
            }
            Err(e) => {
                j.state = JobState::Failed;
                j.error = Some(e);
            }
        }
        j.finished = Some(now_ms());
        let j = j.clone();
        self.save_job(&j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn png() -> (Vec<u8>, RasterImage) {
        let img = RasterImage::filled(8, 6, 1, 0.5);
        (img.to_png(false), img)
    }

    #[test]
    fn documents_and_jobs_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let (bytes, img) = png();
        let (doc_id, done, pending) = {
            let s = Store::open(dir.path()).unwrap();
            let d = s.create_document(&bytes, img).unwrap();
            s.update_document::<_, StoreError>(&d.id, |d| {
                d.crop = Some(CropRect { x: 1, y: 1, w: 4, h: 4 });
                Ok(())
            })
            .unwrap()
            .unwrap();
            let a = s.create_job(JobKind::Segment, &d.id).unwrap();
            s.finish_job(&a.id, Ok(Some("/x".into()))).unwrap();
            let b = s.create_job(JobKind::Correct, &d.id).unwrap();
            s.start_job(&b.id).unwrap();
            (d.id, a.id, b.id)
        };
        let s = Store::open(dir.path()).unwrap();
        let d = s.document(&doc_id).unwrap();
        assert_eq!(d.stage(), Stage::Cropped);
        assert_eq!(s.working_image(&d).unwrap().width(), 4);
        assert_eq!(s.job(&done).unwrap().state, JobState::Done);
        let p = s.job(&pending).unwrap();
        assert_eq!(p.state, JobState::Failed);
        assert!(p.error.unwrap().contains("restart"));
        assert_eq!(std::fs::read_dir(dir.path().join("blobs")).unwrap().count(), 1);
    }

    #[test]
    fn terminal_jobs_are_immutable() {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(dir.path()).unwrap();
        let j = s.create_job(JobKind::Translate, "d").unwrap();
        s.finish_job(&j.id, Err("boom".into())).unwrap();
        s.finish_job(&j.id, Ok(None)).unwrap();
        s.start_job(&j.id).unwrap();
        let j = s.job(&j.id).unwrap();
        assert_eq!(j.state, JobState::Failed);
        assert_eq!(j.error.as_deref(), Some("boom"));
    }

    #[test]
    fn crop_bounds() {
        let c = |x, y, w, h| CropRect { x, y, w, h };
        assert!(c(0, 0, 10, 5).fits(10, 5));
        assert!(!c(-1, 0, 5, 5).fits(10, 5));
        assert!(!c(0, 0, 0, 5).fits(10, 5));
        assert!(!c(6, 0, 5, 5).fits(10, 5));
    }
}
