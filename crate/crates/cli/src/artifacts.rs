//! Output directories that appear only once complete: everything is written
//! into a sibling staging directory that is renamed into place at the end.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde_json::Value;
use steer_core::density::{write_csv, Grid, GridMeta};
use steer_core::Result;

pub struct Staging {
    root: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl Staging {
    pub fn new(target: &Path) -> Result<Self> {
        let name = target
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into());
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent)?;
        let root = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if root.exists() {
            fs::remove_dir_all(&root)?;
        }
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            target: target.to_path_buf(),
            committed: false,
        })
    }

    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(p)
    }

    pub fn json(&self, rel: &str, value: &Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.path(rel)?, text)?;
        Ok(())
    }

    /// Node values as CSV, without a sidecar.
    pub fn field(&self, rel: &str, grid: &Grid, values: &[f64]) -> Result<()> {
        let f = fs::File::create(self.path(&format!("{rel}.csv"))?)?;
        write_csv(grid, values, BufWriter::new(f))
    }

    /// Density CSV plus its JSON sidecar.
    pub fn density(&self, rel: &str, grid: &Grid, values: &[f64], provenance: &str) -> Result<()> {
        self.field(rel, grid, values)?;
        let meta = GridMeta::new(grid, values, provenance);
        self.json(&format!("{rel}.json"), &serde_json::to_value(meta)?)
    }

    pub fn convergence(&self, rel: &str, history: &[(f64, f64)]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path(rel)?)?;
        w.write_record(["iteration", "residual_h0", "residual_h1"])?;
        for (k, (a, b)) in history.iter().enumerate() {
            w.write_record([(k + 1).to_string(), a.to_string(), b.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Moves the staged tree onto the target, replacing any previous run.
    pub fn commit(mut self) -> Result<PathBuf> {
        let old = self.target.with_file_name(format!(
            ".{}.old-{}",
            self.target
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            std::process::id()
        ));
        let had_old = self.target.exists();
        if had_old {
            fs::rename(&self.target, &old)?;
        }
        fs::rename(&self.root, &self.target)?;
        if had_old {
            fs::remove_dir_all(&old)?;
        }
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.root);
        }
    }
}

/// File-name tag of a snapshot time.
pub fn time_tag(t: f64) -> String {
    format!("t{t:.3}")
}
