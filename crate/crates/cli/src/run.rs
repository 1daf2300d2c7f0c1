//! Run directories, manifests and content hashes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use stac_core::{Error, Result};

use crate::settings::Settings;

pub fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub settings: Value,
    pub args: Vec<String>,
    pub outputs: Value,
}

pub struct RunDir {
    pub path: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    /// Claim `path` for this run. An existing non-empty directory is refused
    /// unless `overwrite` is set, in which case files are replaced in place.
    pub fn create(
        path: &Path,
        overwrite: bool,
        command: &str,
        config_path: Option<&Path>,
        settings: &Settings,
    ) -> Result<Self> {
        if path.exists() {
            if !path.is_dir() {
                return Err(Error::Config(format!("output '{}' is not a directory", path.display())));
            }
            let occupied = fs::read_dir(path).map_err(|e| io_err(path, e))?.next().is_some();
            if occupied && !overwrite {
                return Err(Error::Config(format!(
                    "output directory '{}' is not empty; pass --overwrite to reuse it",
                    path.display()
                )));
            }
        }
        fs::create_dir_all(path).map_err(|e| io_err(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                config_path: config_path.map(Path::to_path_buf),
                seed: settings.get("seed", 0u64)?,
                out_dir: path.to_path_buf(),
                started_unix: unix_now(),
                finished_unix: 0,
                settings: serde_json::to_value(settings.values()).unwrap_or(Value::Null),
                args: std::env::args().collect(),
                outputs: Value::Object(Default::default()),
            },
        })
    }

    pub fn join(&self, rel: &str) -> PathBuf {
        self.path.join(rel)
    }

    /// Record a named output in the manifest.
    pub fn record(&mut self, key: &str, value: impl Serialize) {
        if let Value::Object(m) = &mut self.manifest.outputs {
            m.insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
        }
    }

    pub fn write_json(&self, rel: &str, value: &impl Serialize) -> Result<PathBuf> {
        let path = self.join(rel);
        write_json(&path, value)?;
        Ok(path)
    }

    pub fn write_text(&self, rel: &str, text: &str) -> Result<PathBuf> {
        let path = self.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    pub fn finish(mut self) -> Result<()> {
        self.manifest.finished_unix = unix_now();
        write_json(&self.path.join("manifest.json"), &self.manifest)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Hash of an annotation file and every image it references, in file order.
pub fn dataset_hash(annotations: &Path) -> Result<String> {
    let records = stac_core::data::load_annotations(annotations)?;
    let mut h = Sha256::new();
    h.update(fs::read(annotations).map_err(|e| io_err(annotations, e))?);
    for r in &records {
        h.update(fs::read(&r.path).map_err(|e| io_err(&r.path, e))?);
    }
    Ok(hex(&h.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
