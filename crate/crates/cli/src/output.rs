//! Artifact files. Every file starts with the resolved config and versions:
//! `#` comment lines for CSV, an envelope object for JSON.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rnbounds::Result;
use serde::Serialize;

use crate::config::RunConfig;

pub struct Artifacts<'a> {
    dir: PathBuf,
    cfg: &'a RunConfig,
}

impl<'a> Artifacts<'a> {
    pub fn new(cfg: &'a RunConfig) -> Result<Self> {
        Self::in_dir(cfg, &cfg.output)
    }

    pub fn in_dir(cfg: &'a RunConfig, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), cfg })
    }

    pub fn sub(&self, name: &str) -> Result<Self> {
        Self::in_dir(self.cfg, &self.dir.join(name))
    }

    /// `body` receives the writer and the header lines it must emit first.
    pub fn csv<F>(&self, name: &str, body: F) -> Result<()>
    where
        F: FnOnce(&mut dyn Write, &[String]) -> Result<()>,
    {
        let mut w = BufWriter::new(File::create(self.dir.join(name))?);
        body(&mut w, &self.cfg.header_lines())?;
        w.flush()?;
        Ok(())
    }

    /// CSV with header comments, a column line and preformatted rows.
    pub fn table(&self, name: &str, columns: &str, rows: &[String]) -> Result<()> {
        self.csv(name, |w, header| {
            for line in header {
                writeln!(w, "# {line}")?;
            }
            writeln!(w, "{columns}")?;
            for r in rows {
                writeln!(w, "{r}")?;
            }
            Ok(())
        })
    }

    pub fn json<T: Serialize>(&self, name: &str, result: &T) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.dir.join(name))?);
        serde_json::to_writer_pretty(&mut w, &self.cfg.envelope(result))?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

/// Makes free text safe for a CSV cell.
pub fn cell(s: Option<&str>) -> String {
    s.unwrap_or("").replace([',', '\n'], ";")
}
