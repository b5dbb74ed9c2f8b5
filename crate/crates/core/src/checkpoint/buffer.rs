//! Append-only storage of trained experts.
//!
//! On disk a buffer is a directory of `task_<index>.cmrg` files plus an
//! `index.json` listing them in order. The in-memory index keeps only file
//! headers, so tensors can be streamed one name at a time.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::format::{load_checkpoint, save_checkpoint, CheckpointReader};
use super::{Checkpoint, Tensor};
use crate::error::{Error, Result};

const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferEntryInfo {
    pub task_index: usize,
    pub file: String,
    pub fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    entries: Vec<BufferEntryInfo>,
}

#[derive(Debug, Clone)]
enum Slot {
    Memory(Arc<Checkpoint>),
    Disk(CheckpointReader),
}

#[derive(Debug, Clone)]
pub struct CheckpointBuffer {
    dir: Option<PathBuf>,
    info: Vec<BufferEntryInfo>,
    slots: Vec<Slot>,
}

impl CheckpointBuffer {
    /// A buffer that never touches disk.
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            info: Vec::new(),
            slots: Vec::new(),
        }
    }

    /// Creates a new on-disk buffer. Fails if `dir` already holds an index.
    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let index = dir.join(INDEX_FILE);
        if index.exists() {
            return Err(Error::io(
                &index,
                std::io::Error::new(std::io::ErrorKind::AlreadyExists, "buffer already exists"),
            ));
        }
        let buf = Self {
            dir: Some(dir),
            info: Vec::new(),
            slots: Vec::new(),
        };
        buf.write_index()?;
        Ok(buf)
    }

    /// Opens an existing on-disk buffer, verifying every listed file.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let index_path = dir.join(INDEX_FILE);
        let raw = fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: Index =
            serde_json::from_slice(&raw).map_err(|e| Error::Format(format!("index.json: {e}")))?;
        let mut slots = Vec::with_capacity(index.entries.len());
        for (k, entry) in index.entries.iter().enumerate() {
            if entry.task_index != k + 1 {
                return Err(Error::Format(format!(
                    "index.json: entry {k} has task_index {}",
                    entry.task_index
                )));
            }
            let path = dir.join(&entry.file);
            let full = load_checkpoint(&path)?;
            if full.fingerprint() != entry.fingerprint {
                return Err(Error::Format(format!(
                    "{} does not match its index fingerprint",
                    entry.file
                )));
            }
            slots.push(Slot::Disk(CheckpointReader::open(&path)?));
        }
        Ok(Self {
            dir: Some(dir),
            info: index.entries,
            slots,
        })
    }

    fn write_index(&self) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let index = Index {
            entries: self.info.clone(),
        };
        let bytes = serde_json::to_vec_pretty(&index).map_err(|e| Error::Format(e.to_string()))?;
        let tmp = dir.join("index.json.tmp");
        let path = dir.join(INDEX_FILE);
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Appends an expert and returns its 1-based task index.
    pub fn append(&mut self, expert: Checkpoint) -> Result<usize> {
        let task_index = self.info.len() + 1;
        let file = format!("task_{task_index}.cmrg");
        let fingerprint = expert.fingerprint();
        let slot = match &self.dir {
            None => Slot::Memory(Arc::new(expert)),
            Some(dir) => {
                let path = dir.join(&file);
                save_checkpoint(&expert, &path)?;
                Slot::Disk(CheckpointReader::open(&path)?)
            }
        };
        self.info.push(BufferEntryInfo {
            task_index,
            file,
            fingerprint,
        });
        self.slots.push(slot);
        self.write_index()?;
        Ok(task_index)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn entries(&self) -> &[BufferEntryInfo] {
        &self.info
    }

    fn slot(&self, task_index: usize) -> Result<&Slot> {
        task_index
            .checked_sub(1)
            .and_then(|k| self.slots.get(k))
            .ok_or(Error::EmptyBuffer)
    }

    /// Expert stored for `task_index` (1-based).
    pub fn get(&self, task_index: usize) -> Result<Arc<Checkpoint>> {
        match self.slot(task_index)? {
            Slot::Memory(c) => Ok(Arc::clone(c)),
            Slot::Disk(r) => Ok(Arc::new(r.verify()?)),
        }
    }

    pub fn last(&self) -> Result<Arc<Checkpoint>> {
        self.get(self.len())
    }

    /// Every stored expert, in task order.
    pub fn all(&self) -> Result<Vec<Arc<Checkpoint>>> {
        (1..=self.len()).map(|i| self.get(i)).collect()
    }

    /// Reads a single tensor of one expert without loading the rest.
    pub fn read_tensor(&self, task_index: usize, name: &str) -> Result<Tensor> {
        match self.slot(task_index)? {
            Slot::Memory(c) => c
                .get(name)
                .cloned()
                .ok_or_else(|| Error::KeyMismatch(name.to_string())),
            Slot::Disk(r) => r.read_tensor(name),
        }
    }
}
