//! Checkpoints: one tar archive holding a JSON manifest and every parameter
//! and Adam moment as a raw little-endian f32 array.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub adam: Adam,
    /// Optimizer steps taken.
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    step: u64,
    config: TrainConfig,
    adam_config: AdamConfig,
    adam_step: u64,
    tensors: Vec<Entry>,
}

const GROUPS: [&str; 3] = ["params", "adam_m", "adam_v"];

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn append(builder: &mut tar::Builder<Vec<u8>>, path: &str, bytes: &[u8]) -> Result<()> {
    let mut h = tar::Header::new_gnu();
    h.set_size(bytes.len() as u64);
    h.set_mode(0o644);
    h.set_mtime(0);
    h.set_uid(0);
    h.set_gid(0);
    h.set_entry_type(tar::EntryType::Regular);
    builder.append_data(&mut h, path, bytes)?;
    Ok(())
}

impl Checkpoint {
    fn groups(&self) -> [Vec<(&str, &Tensor<f32>)>; 3] {
        let moments = |m: &'static str| -> Vec<(&str, &Tensor<f32>)> {
            let map = if m == "m" { &self.adam.m } else { &self.adam.v };
            map.iter().map(|(k, v)| (k.as_str(), v)).collect()
        };
        [self.params.iter().collect(), moments("m"), moments("v")]
    }

    /// Archive bytes; identical checkpoints give identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut files = Vec::new();
        for (group, tensors) in GROUPS.iter().zip(self.groups()) {
            for (name, t) in tensors {
                let file = format!("{group}/{name}.f32");
                let mut bytes = Vec::with_capacity(t.len() * 4);
                for v in t.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                entries.push(Entry {
                    group: group.to_string(),
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    file: file.clone(),
                });
                files.push((file, bytes));
            }
        }
        let manifest = Manifest {
            format: FORMAT,
            step: self.step,
            config: self.config.clone(),
            adam_config: self.adam.config,
            adam_step: self.adam.step,
            tensors: entries,
        };
        let mut builder = tar::Builder::new(Vec::new());
        append(&mut builder, MANIFEST, &serde_json::to_vec_pretty(&manifest)?)?;
        for (file, bytes) in &files {
            append(&mut builder, file, bytes)?;
        }
        Ok(builder.into_inner()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut archive = tar::Archive::new(Cursor::new(bytes));
        let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        for entry in archive.entries()? {
            let mut entry = entry?;
            let path = entry.path()?.to_string_lossy().into_owned();
            let mut data = Vec::new();
            entry.read_to_end(&mut data)?;
            files.insert(path, data);
        }
        let manifest: Manifest =
            serde_json::from_slice(files.get(MANIFEST).ok_or_else(|| bad("missing manifest.json"))?)?;
        if manifest.format != FORMAT {
            return Err(bad(format!("unsupported format {}", manifest.format)));
        }
        let mut params = ParamStore::new();
        let mut adam = Adam::new(manifest.adam_config);
        adam.step = manifest.adam_step;
        for e in manifest.tensors {
            let raw = files.get(&e.file).ok_or_else(|| bad(format!("missing {}", e.file)))?;
            let n: usize = e.shape.iter().product();
            if raw.len() != 4 * n {
                return Err(bad(format!("{} holds {} bytes, shape {:?} needs {}", e.file, raw.len(), e.shape, 4 * n)));
            }
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&e.shape, data);
            match e.group.as_str() {
                "params" => params.insert(e.name, t)?,
                "adam_m" => {
                    adam.m.insert(e.name, t);
                }
                "adam_v" => {
                    adam.v.insert(e.name, t);
                }
                other => return Err(bad(format!("unknown tensor group {other}"))),
            }
        }
        manifest.config.validate()?;
        Ok(Self {
            config: manifest.config,
            params,
            adam,
            step: manifest.step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
