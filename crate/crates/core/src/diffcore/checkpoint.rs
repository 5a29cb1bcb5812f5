//! Tensor checkpoint files.
//!
//! A checkpoint `<stem>` is two files:
//!
//! * `<stem>.manifest`: text, first line `JVK1`, then `seed <u64>`, any number
//!   of `meta <key> <value>` lines, and one `<name>\t<shape>\t<byte offset>`
//!   line per tensor (shape written as `4x8`, empty for scalars).
//! * `<stem>.bin`: every tensor's data as little-endian `f32`, concatenated in
//!   manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "JVK1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub seed: u64,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    with_ext(stem, "manifest")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    with_ext(stem, "bin")
}

fn format_shape(shape: &[usize]) -> String {
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

pub fn write_tensors(stem: &Path, file: &TensorFile) -> Result<()> {
    if let Some(parent) = stem.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut manifest = format!("{FORMAT_TAG}\nseed {}\n", file.seed);
    for (k, v) in &file.meta {
        manifest.push_str(&format!("meta {k} {v}\n"));
    }
    let mut blob = Vec::new();
    for (name, t) in &file.tensors {
        if name.contains(['\t', '\n']) {
            return Err(Error::Checkpoint {
                path: stem.to_path_buf(),
                detail: format!("tensor name {name:?} contains a tab or newline"),
            });
        }
        manifest.push_str(&format!("{name}\t{}\t{}\n", format_shape(t.shape()), blob.len()));
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(manifest_path(stem), manifest)?;
    fs::write(blob_path(stem), blob)?;
    Ok(())
}

pub fn read_tensors(stem: &Path) -> Result<TensorFile> {
    let mpath = manifest_path(stem);
    let bad = |detail: String| Error::Checkpoint {
        path: mpath.clone(),
        detail,
    };
    let text = fs::read_to_string(&mpath)?;
    let blob = fs::read(blob_path(stem))?;
    let mut lines = text.lines();
    if lines.next() != Some(FORMAT_TAG) {
        return Err(bad(format!("missing {FORMAT_TAG} tag")));
    }
    let mut file = TensorFile::default();
    let mut entries = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("seed ") {
            file.seed = rest.trim().parse().map_err(|_| bad(format!("bad seed {rest:?}")))?;
        } else if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            file.meta.push((k.to_string(), v.to_string()));
        } else if !line.is_empty() {
            let parts: Vec<&str> = line.split('\t').collect();
            let [name, shape, offset] = parts[..] else {
                return Err(bad(format!("malformed entry {line:?}")));
            };
            let shape: Vec<usize> = if shape.is_empty() {
                vec![]
            } else {
                shape
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad(format!("bad shape {shape:?}"))))
                    .collect::<Result<_>>()?
            };
            let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset {offset:?}")))?;
            entries.push((name.to_string(), shape, offset));
        }
    }
    for (name, shape, offset) in entries {
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        if end > blob.len() {
            return Err(bad(format!("tensor {name} runs past end of blob")));
        }
        let data = blob[offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        file.tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(file)
}

pub fn save_store(stem: &Path, store: &ParameterStore, meta: &[(String, String)]) -> Result<()> {
    let file = TensorFile {
        seed: store.seed(),
        meta: meta.to_vec(),
        tensors: store
            .iter()
            .map(|(k, t)| {
                let plain = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
                Ok((k.to_string(), plain))
            })
            .collect::<Result<_>>()?,
    };
    write_tensors(stem, &file)
}

/// Loads a parameter store; every loaded tensor is trainable.
pub fn load_store(stem: &Path) -> Result<(ParameterStore, Vec<(String, String)>)> {
    let file = read_tensors(stem)?;
    let mut store = ParameterStore::new(file.seed);
    for (k, t) in file.tensors {
        store.insert(k, t.with_requires_grad(true));
    }
    Ok((store, file.meta))
}
