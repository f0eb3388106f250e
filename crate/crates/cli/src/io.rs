//! Artifact writing. Finished files appear under their final name only once
//! complete; telemetry is written to `<name>.partial` and renamed at the end.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = sibling(path, ".tmp");
    let run = || -> std::io::Result<()> {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    run().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CliError::io(path, e)
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Line-delimited JSON records, flushed after every row.
pub struct TelemetryLog {
    path: PathBuf,
    partial: PathBuf,
    out: BufWriter<File>,
}

impl TelemetryLog {
    pub fn create(path: &Path) -> Result<Self> {
        let partial = sibling(path, ".partial");
        let file = File::create(&partial).map_err(|e| CliError::io(&partial, e))?;
        Ok(TelemetryLog {
            path: path.to_path_buf(),
            partial,
            out: BufWriter::new(file),
        })
    }

    pub fn append<T: Serialize>(&mut self, row: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, row).map_err(|e| CliError::io(&self.partial, e))?;
        self.out
            .write_all(b"\n")
            .and_then(|_| self.out.flush())
            .map_err(|e| CliError::io(&self.partial, e))
    }

    /// Moves the finished log to its final name.
    pub fn commit(self) -> Result<PathBuf> {
        let file = self.out.into_inner().map_err(|e| CliError::io(&self.partial, e.error()))?;
        file.sync_all().map_err(|e| CliError::io(&self.partial, e))?;
        fs::rename(&self.partial, &self.path).map_err(|e| CliError::io(&self.path, e))?;
        Ok(self.path)
    }
}
