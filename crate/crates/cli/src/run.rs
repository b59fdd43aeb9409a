//! Run directories and their manifests.
//!
//! A command collects its outputs in memory, then `Run::finish` names the
//! run directory after a hash of the manifest and moves everything into
//! place at once. Identical invocations therefore land in the same directory
//! with the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use refset_vpr::config::write_atomic;
use refset_vpr::dataset::{write_dataset, Dataset};
use refset_vpr::{Result, VprError};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize)]
pub struct InputRecord {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
    pub details: BTreeMap<String, serde_json::Value>,
}

enum Output {
    Bytes(Vec<u8>),
    Dataset(Box<Dataset>),
}

pub struct Run {
    root: PathBuf,
    manifest: ExperimentManifest,
    outputs: Vec<(String, Output)>,
}

/// SHA-256 of a file, or of a directory's sorted relative paths and contents.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = walkdir::WalkDir::new(path)
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .map(|e| e.into_path())
            .collect();
        files.sort();
        for file in files {
            let rel = file.strip_prefix(path).unwrap_or(&file);
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update([0]);
            hasher.update(fs::read(&file)?);
        }
    } else {
        hasher.update(fs::read(path)?);
    }
    Ok(hex::encode(hasher.finalize()))
}

impl Run {
    pub fn new(root: &Path, command: &str, seed: Option<u64>, config: impl Serialize) -> Self {
        Self {
            root: root.to_path_buf(),
            manifest: ExperimentManifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                seed,
                config: serde_json::to_value(config).expect("configs serialize to JSON"),
                inputs: Vec::new(),
                outputs: Vec::new(),
                details: BTreeMap::new(),
            },
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(VprError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{role} `{}` does not exist", path.display()),
            )));
        }
        self.manifest.inputs.push(InputRecord {
            role: role.to_string(),
            path: path.to_string_lossy().into_owned(),
            sha256: hash_path(path)?,
        });
        Ok(())
    }

    pub fn detail(&mut self, key: &str, value: impl Serialize) {
        self.manifest.details.insert(
            key.to_string(),
            serde_json::to_value(value).expect("details serialize to JSON"),
        );
    }

    pub fn output(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.manifest.outputs.push(name.to_string());
        self.outputs
            .push((name.to_string(), Output::Bytes(bytes.into())));
    }

    pub fn output_dataset(&mut self, name: &str, dataset: Dataset) {
        self.manifest.outputs.push(format!("{name}/"));
        self.outputs
            .push((name.to_string(), Output::Dataset(Box::new(dataset))));
    }

    /// Writes everything under `<root>/<run id>/` and returns that directory.
    pub fn finish(self) -> Result<PathBuf> {
        let body = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        let run_id = hex::encode(&Sha256::digest(&body)[..8]);
        let final_dir = self.root.join(&run_id);
        let staging = self
            .root
            .join(format!(".{run_id}.partial{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        for (name, output) in &self.outputs {
            match output {
                Output::Bytes(bytes) => write_atomic(&staging.join(name), bytes)?,
                Output::Dataset(ds) => write_dataset(ds, &staging.join(name))?,
            }
        }
        let mut record = serde_json::to_value(&self.manifest).expect("manifest serializes");
        record["run_id"] = serde_json::Value::String(run_id);
        let mut text = serde_json::to_vec_pretty(&record).expect("manifest serializes");
        text.push(b'\n');
        write_atomic(&staging.join(MANIFEST_FILE), &text)?;
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir)?;
        }
        fs::rename(&staging, &final_dir).map_err(|e| {
            let _ = fs::remove_dir_all(&staging);
            VprError::Io(e)
        })?;
        Ok(final_dir)
    }
}
