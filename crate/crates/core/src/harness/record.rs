//! Run records and the append-only JSON Lines sink.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::Family;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Pretrained,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub family: Family,
    pub size_label: String,
    pub params: u64,
    /// Forward FLOPs at `n_enc`/`n_dec`.
    pub flops_forward: u64,
    pub n_enc: usize,
    pub n_dec: usize,
    pub steps_per_sec: f64,
    /// Negative validation cross-entropy per target token, natural log.
    pub upstream_neg_log_ppl: Option<f64>,
    pub initial_loss: Option<f64>,
    /// Exact-match accuracy per task.
    pub downstream: BTreeMap<String, f64>,
    /// Mean of `downstream`.
    pub downstream_mean: Option<f64>,
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    pub skipped_steps: u64,
    pub seed: u64,
    pub status: RunStatus,
    pub failure: Option<String>,
}

impl RunRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Serializes appends from concurrent runs into one JSON Lines file.
#[derive(Debug)]
pub struct ResultsSink {
    path: PathBuf,
    file: Mutex<File>,
}

impl ResultsSink {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(ResultsSink { path: path.to_path_buf(), file: Mutex::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, rec: &RunRecord) -> Result<()> {
        let line = rec.to_json_line()?;
        let mut f = self.file.lock().expect("sink lock poisoned");
        writeln!(f, "{}", line)?;
        f.flush()?;
        Ok(())
    }
}

/// Parses JSON Lines, skipping blank lines; errors carry 1-based line numbers.
pub fn parse_records<R: BufRead>(reader: R) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            other => {
                return Err(Error::Parse { line: i + 1, message: format!("unsupported schema version {:?}", other) })
            }
        }
        out.push(serde_json::from_value(value).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    parse_records(BufReader::new(File::open(path)?))
}
