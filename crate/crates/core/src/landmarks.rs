//! Anatomical landmark sets and their CSV files (`Landmark,X,Y,Z`, world mm).

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: i64,
    /// World coordinates `(x, y, z)` in mm.
    pub pos: [f64; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    entries: Vec<Landmark>,
}

#[derive(Serialize, Deserialize)]
struct Row {
    #[serde(rename = "Landmark")]
    id: i64,
    #[serde(rename = "X")]
    x: f64,
    #[serde(rename = "Y")]
    y: f64,
    #[serde(rename = "Z")]
    z: f64,
}

impl LandmarkSet {
    pub fn new(entries: Vec<Landmark>) -> Result<Self> {
        let mut seen = HashSet::new();
        for lm in &entries {
            if !seen.insert(lm.id) {
                return Err(Error::DuplicateLandmark(lm.id));
            }
            if lm.pos.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidVolume(format!("landmark {} is not finite", lm.id)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[Landmark] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: i64) -> Option<&Landmark> {
        self.entries.iter().find(|l| l.id == id)
    }

    pub fn ids(&self) -> Vec<i64> {
        self.entries.iter().map(|l| l.id).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let malformed = |reason: String| Error::MalformedLandmarks {
            path: path.to_path_buf(),
            reason,
        };
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| malformed(e.to_string()))?;
        let headers = reader.headers().map_err(|e| malformed(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["Landmark", "X", "Y", "Z"] {
            return Err(malformed(format!("unexpected header {headers:?}")));
        }
        let mut entries = Vec::new();
        for row in reader.deserialize::<Row>() {
            let row = row.map_err(|e| malformed(e.to_string()))?;
            entries.push(Landmark {
                id: row.id,
                pos: [row.x, row.y, row.z],
            });
        }
        Self::new(entries)
    }

    /// Writes with shortest round-trip decimal formatting, so reloading is
    /// bit-exact.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::MalformedLandmarks {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        for lm in &self.entries {
            writer
                .serialize(Row {
                    id: lm.id,
                    x: lm.pos[0],
                    y: lm.pos[1],
                    z: lm.pos[2],
                })
                .map_err(|e| Error::MalformedLandmarks {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })?;
        }
        writer.flush()?;
        Ok(())
    }
}
