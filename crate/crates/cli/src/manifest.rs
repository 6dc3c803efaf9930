//! Run manifests and output plumbing. Every experiment writes `manifest.json`
//! (fully deterministic given the config) and `timings.json` (wall-clock
//! observations, the one file excluded from reproducibility comparisons).

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::Resolved;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub observed: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, observed: String) -> Self {
        Check { name: name.into(), passed, observed }
    }
}

#[derive(Serialize)]
pub struct RunManifest {
    pub experiment: String,
    pub code_version: String,
    pub config: Resolved,
    /// Per-replica RNG seeds, pairwise distinct, derived from the base seed.
    pub seeds: Vec<u64>,
    /// Events processed per replica (collisions for gas runs, jumps for
    /// jump-process runs, Monte Carlo samples for measure estimates).
    pub event_counts: Vec<u64>,
    pub checks: Vec<Check>,
    /// Every file this run wrote, relative to the output directory, sorted.
    pub files: Vec<String>,
    /// Unit and estimator conventions needed to read the outputs.
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new(config: &Resolved) -> Self {
        RunManifest {
            experiment: config.experiment.clone(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            seeds: Vec::new(),
            event_counts: Vec::new(),
            checks: Vec::new(),
            files: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Serialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub per_replica_seconds: Vec<f64>,
}

/// Where results land and which formats are enabled.
pub struct OutputCtx {
    pub dir: PathBuf,
    pub csv: bool,
    pub json: bool,
    files: Vec<String>,
}

impl OutputCtx {
    pub fn new(dir: &Path, formats: &[String]) -> Result<Self, String> {
        fs::create_dir_all(dir)
            .map_err(|e| format!("cannot create output directory {}: {e}", dir.display()))?;
        Ok(OutputCtx {
            dir: dir.to_path_buf(),
            csv: formats.iter().any(|f| f == "csv"),
            json: formats.iter().any(|f| f == "json"),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), String> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)
                .map_err(|e| format!("cannot create {}: {e}", parent.display()))?;
        }
        fs::write(&path, contents).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Write a CSV file (when the csv format is enabled): a header line plus
    /// preformatted rows.
    pub fn write_csv(&mut self, name: &str, header: &str, rows: &[String]) -> Result<(), String> {
        if !self.csv {
            return Ok(());
        }
        let mut text = String::with_capacity(rows.len() * 64 + header.len() + 1);
        text.push_str(header);
        text.push('\n');
        for row in rows {
            text.push_str(row);
            text.push('\n');
        }
        self.write(name, text.as_bytes())
    }

    /// Write a JSON document (when the json format is enabled).
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), String> {
        if !self.json {
            return Ok(());
        }
        self.write_json_always(name, value)
    }

    /// Write a JSON document regardless of the format selection (manifests
    /// and timings are always JSON).
    pub fn write_json_always<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), String> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| format!("cannot serialize {name}: {e}"))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Write arbitrary text (state dumps).
    pub fn write_text(&mut self, name: &str, contents: &str) -> Result<(), String> {
        self.write(name, contents.as_bytes())
    }

    /// Finish the run: records the timings file and the sorted inventory in
    /// the manifest, then writes `manifest.json` itself.
    pub fn finish(mut self, mut manifest: RunManifest, timings: Timings) -> Result<RunManifest, String> {
        self.write_json_always("timings.json", &timings)?;
        let mut files = self.files.clone();
        files.push("manifest.json".to_string());
        files.sort();
        manifest.files = files;
        self.write_json_always("manifest.json", &manifest)?;
        Ok(manifest)
    }
}

/// Format a float for CSV output: round-trip exact and locale-independent.
pub fn csv_f64(x: f64) -> String {
    format!("{x:.16e}")
}
