//! Output directories: files are staged next to the target and moved into
//! place only when the command succeeds, together with a run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub threads: usize,
    /// Effective configuration after merging the config file and flags.
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
    pub stages: Vec<StageTiming>,
}

pub struct OutputDir {
    target: PathBuf,
    staging: tempfile::TempDir,
    written: Vec<String>,
    started: Instant,
    stages: Vec<StageTiming>,
}

impl OutputDir {
    pub fn new(target: &Path) -> Result<Self> {
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let staging = tempfile::Builder::new()
            .prefix(".fdm-staging-")
            .tempdir_in(&parent)
            .with_context(|| format!("creating a staging directory in {}", parent.display()))?;
        Ok(Self {
            target: target.to_path_buf(),
            staging,
            written: Vec::new(),
            started: Instant::now(),
            stages: Vec::new(),
        })
    }

    /// Time one stage of the command.
    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f().with_context(|| format!("stage `{name}` failed"))?;
        self.stages.push(StageTiming {
            stage: name.to_string(),
            seconds: t0.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.staging.path().join(name)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).with_context(|| format!("writing {name}"))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.write_text(name, &text)
    }

    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<()> {
        self.write_csv_with_header(name, &[], rows)
    }

    /// Like [`OutputDir::write_csv`], but writes `header` when there are no rows
    /// so empty tables keep their columns.
    pub fn write_csv_with_header<T: Serialize>(
        &mut self,
        name: &str,
        header: &[&str],
        rows: impl IntoIterator<Item = T>,
    ) -> Result<()> {
        let p = self.path(name);
        let mut w = csv::Writer::from_path(&p).with_context(|| format!("writing {name}"))?;
        let mut empty = true;
        for r in rows {
            w.serialize(r)?;
            empty = false;
        }
        if empty && !header.is_empty() {
            w.write_record(header)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Write the manifest and move every staged file into the target directory.
    pub fn finish(mut self, command: &str, seed: u64, config: serde_json::Value, inputs: &[&Path]) -> Result<Vec<String>> {
        let mut outputs = self.written.clone();
        outputs.push(MANIFEST_FILE.to_string());
        let manifest = Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            threads: rayon::current_num_threads(),
            config,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: outputs.clone(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            stages: std::mem::take(&mut self.stages),
        };
        self.write_json(MANIFEST_FILE, &manifest)?;
        fs::create_dir_all(&self.target).with_context(|| format!("creating {}", self.target.display()))?;
        for name in &outputs {
            let from = self.staging.path().join(name);
            let to = self.target.join(name);
            fs::rename(&from, &to)
                .or_else(|_| fs::copy(&from, &to).map(|_| ()))
                .with_context(|| format!("moving {name} into {}", self.target.display()))?;
        }
        Ok(outputs)
    }
}
