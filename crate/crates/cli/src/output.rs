//! Writers for the files a command produces. Every file goes through a
//! temporary sibling and an atomic rename.

use std::path::{Path, PathBuf};

use eightport::grid::PhaseSpaceGrid;
use eightport::io::{version_line, write_atomic};
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// A file waiting to be written.
pub struct Artifact {
    name: String,
    bytes: Vec<u8>,
}

/// Collects a command's files so nothing is written until all of them are
/// ready.
pub struct Outputs {
    dir: PathBuf,
    binary: bool,
    plot: bool,
    pending: Vec<Artifact>,
}

impl Outputs {
    pub fn new(dir: PathBuf, binary: bool, plot: bool) -> Self {
        Self {
            dir,
            binary,
            plot,
            pending: Vec::new(),
        }
    }

    /// CSV with the version line prepended.
    pub fn csv<F>(&mut self, name: &str, body: F) -> CliResult<()>
    where
        F: FnOnce(&mut Vec<u8>) -> eightport::Result<()>,
    {
        let mut bytes = format!("{}\n", version_line()).into_bytes();
        body(&mut bytes)?;
        self.push(name, bytes);
        Ok(())
    }

    /// Whitespace-separated columns for gnuplot, only with `--emit-plot-data`.
    pub fn plot<F>(&mut self, name: &str, body: F) -> CliResult<()>
    where
        F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    {
        if !self.plot {
            return Ok(());
        }
        let mut bytes = format!("{}\n", version_line()).into_bytes();
        body(&mut bytes).map_err(eightport::Error::from)?;
        self.push(name, bytes);
        Ok(())
    }

    /// `<stem>.csv`, or `<stem>.bin` with `--binary`; plus `<stem>.dat` for plotting.
    pub fn grid(&mut self, stem: &str, g: &PhaseSpaceGrid) -> CliResult<()> {
        if self.binary {
            let mut bytes = Vec::new();
            g.write_binary(&mut bytes)?;
            self.push(&format!("{stem}.bin"), bytes);
        } else {
            self.csv(&format!("{stem}.csv"), |w| g.write_csv(w))?;
        }
        if self.plot {
            let mut bytes = format!("{}\n", version_line()).into_bytes();
            g.write_plot_data(&mut bytes)?;
            self.push(&format!("{stem}.dat"), bytes);
        }
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(eightport::Error::from)?;
        bytes.push(b'\n');
        self.push(name, bytes);
        Ok(())
    }

    fn push(&mut self, name: &str, bytes: Vec<u8>) {
        self.pending.push(Artifact {
            name: name.to_owned(),
            bytes,
        });
    }

    /// Writes every pending file and returns their paths.
    pub fn commit(self) -> CliResult<Vec<PathBuf>> {
        std::fs::create_dir_all(&self.dir)
            .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", self.dir.display())))?;
        let mut written = Vec::new();
        for a in self.pending {
            let path = self.dir.join(&a.name);
            write_atomic(&path, |w| Ok(w.write_all(&a.bytes)?))?;
            written.push(path);
        }
        Ok(written)
    }
}

pub fn read_grid(path: &Path) -> CliResult<PhaseSpaceGrid> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    Ok(PhaseSpaceGrid::read_any(std::io::BufReader::new(file))?)
}
