//! Versioned JSON persistence with atomic writes.
//!
//! Every artifact is a single JSON object carrying a `version` tag. Writes go
//! to a sibling temp file that is renamed into place, so readers never see a
//! half-written document.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// An artifact stored as a versioned JSON document.
pub trait Artifact: Serialize + DeserializeOwned {
    const VERSION: &'static str;

    fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut value = serde_json::to_value(self).map_err(|e| Error::Schema {
            path: path.as_ref().to_path_buf(),
            message: e.to_string(),
        })?;
        match value.as_object_mut() {
            Some(obj) => {
                obj.insert("version".into(), Self::VERSION.into());
            }
            None => {
                return Err(Error::Schema {
                    path: path.as_ref().to_path_buf(),
                    message: "artifact must serialize to a JSON object".into(),
                })
            }
        }
        write_json_atomic(path, &value)
    }

    fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Schema {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        let obj = value.as_object_mut().ok_or_else(|| Error::Schema {
            path: path.to_path_buf(),
            message: "top level is not an object".into(),
        })?;
        match obj.remove("version") {
            Some(serde_json::Value::String(v)) if v == Self::VERSION => {}
            Some(serde_json::Value::String(v)) => {
                return Err(Error::Version {
                    path: path.to_path_buf(),
                    expected: Self::VERSION,
                    found: v,
                })
            }
            Some(other) => {
                return Err(Error::Version {
                    path: path.to_path_buf(),
                    expected: Self::VERSION,
                    found: other.to_string(),
                })
            }
            None => {
                return Err(Error::Schema {
                    path: path.to_path_buf(),
                    message: "missing version tag".into(),
                })
            }
        }
        serde_json::from_value(value).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Serializes `value` and atomically replaces `path` with it.
pub fn write_json_atomic<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let bytes = serde_json::to_vec(value).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    write_bytes_atomic(path, &bytes)
}

pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".into());
    let tmp = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(bytes).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)
}

/// Serde adapter storing an `Array2<f64>` as nested rows.
pub mod matrix {
    use ndarray::Array2;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(rows).map_err(D::Error::custom)
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Array2<f64>, String> {
        let n = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err("ragged matrix rows".into());
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Array2::from_shape_vec((n, cols), flat).map_err(|e| e.to_string())
    }
}
