//! Checkpoint directories: one raw little-endian f32 file per array plus a
//! `manifest.json` describing names, shapes, the config hash and which arrays
//! are frozen.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::synthdata::{read_json, write_json};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    /// False for buffers such as BatchNorm running statistics.
    pub optimized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
    /// Names held fixed while this checkpoint was produced.
    pub frozen: Vec<String>,
    /// Names the producing run was allowed to update.
    pub trainable: Vec<String>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Manifest {
    pub fn entry(&self, name: &str) -> Option<&ArrayEntry> {
        self.arrays.iter().find(|a| a.name == name)
    }
}

/// SHA-256 of the compact JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// One parameter store to be written under `prefix`.
pub struct StoreSection<'a> {
    pub prefix: &'a str,
    pub store: &'a ParamStore<f32>,
    pub frozen: bool,
}

fn file_name(index: usize, name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '_' })
        .collect();
    format!("{index:04}_{safe}.f32")
}

fn checkpoint_err(dir: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: dir.to_path_buf(),
        message: message.into(),
    }
}

pub fn write_checkpoint(
    dir: &Path,
    kind: &str,
    config: &serde_json::Value,
    sections: &[StoreSection<'_>],
    extra: serde_json::Value,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut arrays = Vec::new();
    let mut frozen = Vec::new();
    let mut trainable = Vec::new();
    for sec in sections {
        let store = sec.store;
        if !store.all_finite() {
            return Err(checkpoint_err(dir, format!("non-finite values in {}", sec.prefix)));
        }
        for i in 0..store.len() {
            let name = format!("{}{}", sec.prefix, store.name(i));
            let file = file_name(arrays.len(), &name);
            let v = store.value(i);
            let bytes: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            if sec.frozen {
                frozen.push(name.clone());
            } else {
                trainable.push(name.clone());
            }
            arrays.push(ArrayEntry {
                name,
                shape: v.shape().to_vec(),
                file,
                optimized: store.is_trainable(i),
            });
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        config_hash: config_hash(config),
        config: config.clone(),
        arrays,
        frozen,
        trainable,
        extra,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(checkpoint_err(dir, "no manifest.json (missing checkpoint?)"));
    }
    let m: Manifest = read_json(&path)?;
    if m.format_version != FORMAT_VERSION {
        return Err(checkpoint_err(dir, format!("unsupported format version {}", m.format_version)));
    }
    if config_hash(&m.config) != m.config_hash {
        return Err(checkpoint_err(dir, "config hash does not match the stored config"));
    }
    Ok(m)
}

pub fn read_array(dir: &Path, entry: &ArrayEntry) -> Result<Tensor<f32>> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let n: usize = entry.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(checkpoint_err(
            dir,
            format!("{}: {} bytes, expected {}", entry.name, bytes.len(), 4 * n),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(checkpoint_err(dir, format!("{}: non-finite values", entry.name)));
    }
    Ok(Tensor::new(&entry.shape, data))
}

/// Fill every array of `store` from the entries named `prefix + name`.
pub fn load_section(dir: &Path, manifest: &Manifest, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
    for i in 0..store.len() {
        let name = format!("{prefix}{}", store.name(i));
        let entry = manifest
            .entry(&name)
            .ok_or_else(|| checkpoint_err(dir, format!("missing array {name}")))?;
        if entry.shape != store.value(i).shape() {
            return Err(checkpoint_err(
                dir,
                format!("{name}: shape {:?}, model expects {:?}", entry.shape, store.value(i).shape()),
            ));
        }
        store.set(i, read_array(dir, entry)?);
    }
    Ok(())
}

/// Digest of every file in `dir` (sorted by name), for byte-level
/// before/after comparisons.
pub fn dir_digest(dir: &Path) -> Result<String> {
    let mut names: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name())
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for n in names {
        let p = dir.join(&n);
        h.update(n.to_string_lossy().as_bytes());
        h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(hex::encode(h.finalize()))
}
