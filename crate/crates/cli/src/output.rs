//! Atomic output files and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// One written file as listed in the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct OutputRecord {
    pub file: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub step: String,
    pub seconds: f64,
}

/// Inputs, outputs and timings of one command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub outputs: Vec<OutputRecord>,
    pub timings: Vec<Timing>,
    /// Command-specific scalar results.
    pub summary: serde_json::Value,
}

/// Writes files into one directory, each through a temporary file and a
/// rename, and collects the manifest.
pub struct OutputDir {
    dir: PathBuf,
    manifest: RunManifest,
    clock: Instant,
}

impl OutputDir {
    pub fn create(dir: &Path, command: &str, seed: u64, config: serde_json::Value) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                tool: env!("CARGO_PKG_NAME"),
                version: env!("CARGO_PKG_VERSION"),
                command: command.to_string(),
                seed,
                config,
                outputs: Vec::new(),
                timings: Vec::new(),
                summary: serde_json::Value::Null,
            },
            clock: Instant::now(),
        })
    }

    /// Records the time since the previous mark under `step`.
    pub fn mark(&mut self, step: &str) {
        self.manifest.timings.push(Timing { step: step.to_string(), seconds: self.clock.elapsed().as_secs_f64() });
        self.clock = Instant::now();
    }

    pub fn set_summary(&mut self, summary: serde_json::Value) {
        self.manifest.summary = summary;
    }

    fn write_atomic(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let target = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp-{}", std::process::id()));
        {
            let mut file = fs::File::create(&tmp)?;
            file.write_all(bytes)?;
            file.sync_all()?;
        }
        fs::rename(&tmp, &target)?;
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        self.write_atomic(name, bytes)?;
        self.manifest.outputs.push(OutputRecord {
            file: name.to_string(),
            bytes: bytes.len(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    /// Serializes `rows` as CSV with the given header.
    pub fn write_csv<R>(&mut self, name: &str, header: &[&str], rows: R) -> Result<(), CliError>
    where
        R: IntoIterator,
        R::Item: IntoIterator,
        <R::Item as IntoIterator>::Item: AsRef<[u8]>,
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(csv_error)?;
        for row in rows {
            w.write_record(row).map_err(csv_error)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
        self.write(name, &bytes)
    }

    /// Writes the manifest last and returns its path.
    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        self.mark("write");
        let bytes = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        self.write_atomic("manifest.json", &bytes)?;
        Ok(self.dir.join("manifest.json"))
    }
}

fn csv_error(e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::Io(io),
        other => CliError::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Shortest round-trip representation of a float.
pub fn num(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_outputs_with_hashes() {
        let tmp = tempfile::tempdir().unwrap();
        let mut dir = OutputDir::create(tmp.path(), "test", 3, serde_json::json!({})).unwrap();
        dir.write_csv("a.csv", &["x", "y"], [["1", "2"]]).unwrap();
        let path = dir.finish().unwrap();
        let bytes = fs::read(tmp.path().join("a.csv")).unwrap();
        assert_eq!(bytes, b"x,y\n1,2\n");
        let manifest: serde_json::Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
        assert_eq!(manifest["outputs"][0]["sha256"], hex::encode(Sha256::digest(&bytes)));
        assert_eq!(manifest["seed"], 3);
        // No temporary files are left behind.
        let names: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 2);
    }
}
