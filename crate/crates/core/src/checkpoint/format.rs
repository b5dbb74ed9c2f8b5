//! On-disk checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CMRG" | u32 version (=1) | u32 header_len | header JSON | tensor blobs | u32 crc32
//! ```
//!
//! The header is `{"tensors": {name: {shape, dtype, offset, nbytes}}, "meta": {..}}`.
//! Offsets are relative to the first byte after the header. The trailing CRC32
//! covers every byte before it.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Checkpoint, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CMRG";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: BTreeMap<String, TensorEntry>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

fn encode(c: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in c.iter() {
        let nbytes = (t.len() * 4) as u64;
        tensors.insert(
            name.to_string(),
            TensorEntry {
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                nbytes,
            },
        );
        offset += nbytes;
    }
    let header = Header {
        tensors,
        meta: c.meta().clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let header_len =
        u32::try_from(header.len()).map_err(|_| Error::Format("header too large".into()))?;

    let mut buf = Vec::with_capacity(PREAMBLE + header.len() + offset as usize + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&header_len.to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in c.iter() {
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn parse_preamble(bytes: &[u8]) -> Result<usize> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing CMRG magic".into()));
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::Format("truncated preamble".into()));
    }
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    Ok(read_u32(bytes, 8) as usize)
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let header: Header =
        serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("header: {e}")))?;
    for (name, entry) in &header.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Format(format!(
                "`{name}`: unsupported dtype {}",
                entry.dtype
            )));
        }
        let elems: u64 = entry.shape.iter().map(|&d| d as u64).product();
        if entry.shape.is_empty() || entry.shape.contains(&0) || elems * 4 != entry.nbytes {
            return Err(Error::Format(format!(
                "`{name}`: shape {:?} inconsistent with {} bytes",
                entry.shape, entry.nbytes
            )));
        }
    }
    Ok(header)
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let header_len = parse_preamble(bytes)?;
    if bytes.len() < PREAMBLE + header_len + 4 {
        return Err(Error::Format("file truncated".into()));
    }
    let body_end = bytes.len() - 4;
    let stored = read_u32(bytes, body_end);
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let header = parse_header(&bytes[PREAMBLE..PREAMBLE + header_len])?;
    let data = &bytes[PREAMBLE + header_len..body_end];

    let mut c = Checkpoint::new();
    for (name, entry) in header.tensors {
        let start = entry.offset as usize;
        let end = start
            .checked_add(entry.nbytes as usize)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| Error::Format(format!("`{name}` lies outside the data section")))?;
        let values = data[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        c.insert(name, entry.shape, values)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    for (k, v) in header.meta {
        c.set_meta(k, v);
    }
    Ok(c)
}

/// Writes `c` to `path`, replacing any existing file.
pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(c)?;
    let tmp = path.with_extension("cmrg.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads and fully validates (magic, version, checksum, header) a checkpoint file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Header-only view of a checkpoint file that can fetch single tensors.
///
/// Per-tensor reads seek directly to the blob and do not re-verify the
/// checksum; call [`CheckpointReader::verify`] (or use [`load_checkpoint`])
/// when integrity matters.
#[derive(Debug, Clone)]
pub struct CheckpointReader {
    path: PathBuf,
    data_start: u64,
    entries: BTreeMap<String, TensorEntry>,
    meta: BTreeMap<String, String>,
}

impl CheckpointReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut pre = [0u8; PREAMBLE];
        f.read_exact(&mut pre)
            .map_err(|_| Error::Format("truncated preamble".into()))?;
        let header_len = parse_preamble(&pre)?;
        let mut header = vec![0u8; header_len];
        f.read_exact(&mut header)
            .map_err(|_| Error::Format("truncated header".into()))?;
        let header = parse_header(&header)?;
        Ok(Self {
            path,
            data_start: (PREAMBLE + header_len) as u64,
            entries: header.tensors,
            meta: header.meta,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn entries(&self) -> &BTreeMap<String, TensorEntry> {
        &self.entries
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn read_tensor(&self, name: &str) -> Result<Tensor> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| Error::KeyMismatch(name.to_string()))?;
        let mut f = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        f.seek(SeekFrom::Start(self.data_start + entry.offset))
            .map_err(|e| Error::io(&self.path, e))?;
        let mut raw = vec![0u8; entry.nbytes as usize];
        f.read_exact(&mut raw)
            .map_err(|_| Error::Format(format!("`{name}` truncated")))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Tensor::new(entry.shape.clone(), data)
    }

    /// Full read with checksum verification.
    pub fn verify(&self) -> Result<Checkpoint> {
        load_checkpoint(&self.path)
    }
}

/// Serializes to any writer; mostly useful for tests and tools.
pub fn write_checkpoint(c: &Checkpoint, mut w: impl Write) -> Result<()> {
    let bytes = encode(c)?;
    w.write_all(&bytes).map_err(|e| Error::io("<writer>", e))
}
