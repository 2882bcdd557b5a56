use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::CliError;

const PARTIAL: &str = ".partial";

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Output directory of one command. Files are written under a `.partial`
/// name and only renamed once the whole command has succeeded, so a failed
/// run leaves its incomplete outputs clearly marked.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    pending: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            pending: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn partial_path(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}{PARTIAL}"))
    }

    /// Writes `name` directly, bypassing the partial mechanism.
    pub fn write_final(&self, name: &str, contents: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    /// Writes `name.partial` through `fill`; the file becomes `name` on
    /// [`OutputDir::commit`]. A stale `name` from an earlier run is removed.
    pub fn write<F>(&mut self, name: &str, fill: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
    {
        let stale = self.path(name);
        if stale.exists() {
            fs::remove_file(&stale).map_err(|e| io_err(&stale, e))?;
        }
        let path = self.partial_path(name);
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        let mut out = BufWriter::new(file);
        fill(&mut out)
            .and_then(|()| out.flush())
            .map_err(|e| io_err(&path, e))?;
        if !self.pending.iter().any(|n| n == name) {
            self.pending.push(name.to_owned());
        }
        Ok(())
    }

    /// Renames every pending `.partial` file to its final name.
    pub fn commit(mut self) -> Result<(), CliError> {
        for name in std::mem::take(&mut self.pending) {
            let from = self.partial_path(&name);
            let to = self.path(&name);
            fs::rename(&from, &to).map_err(|e| io_err(&from, e))?;
        }
        Ok(())
    }
}
