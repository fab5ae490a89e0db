//! Run artifacts on disk: atomic writes, the output-directory lock, DOT and
//! JSON exports.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dot::genome_to_dot;
use crate::error::{Error, Result};
use crate::ga::{CellType, Individual};
use crate::genome::{CellGenome, SearchSpaceSpec};
use crate::supernet::op_names;

pub const BEST_SCHEMA: &str = "gnas.best.v1";
pub const LOCK_FILE: &str = ".gnas.lock";

/// Writes to a sibling temporary file, syncs it and renames it over `path`,
/// so readers see either the old or the new content.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn dot_file_name(cell: CellType) -> String {
    format!("{}_cell.dot", cell.name())
}

/// `input_cell.dot`, `normal_cell.dot` and `reduction_cell.dot`.
pub fn export_dot_files(
    spec: &SearchSpaceSpec,
    ind: &Individual,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    ind.validate(spec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let names = op_names();
    CellType::ALL
        .iter()
        .map(|&cell| {
            let dot = genome_to_dot(
                spec,
                ind.genome(cell),
                &names,
                &format!("{} cell", cell.name()),
            )?;
            let path = out_dir.join(dot_file_name(cell));
            write_atomic(&path, dot.as_bytes())?;
            Ok(path)
        })
        .collect()
}

/// The best individual as written to `best.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestIndividual {
    pub schema: String,
    pub spec: SearchSpaceSpec,
    pub input: CellGenome,
    pub normal: CellGenome,
    pub reduction: CellGenome,
    pub fitness: Option<f64>,
}

impl BestIndividual {
    pub fn new(spec: SearchSpaceSpec, ind: &Individual) -> Self {
        BestIndividual {
            schema: BEST_SCHEMA.into(),
            spec,
            input: ind.genome(CellType::Input).clone(),
            normal: ind.genome(CellType::Normal).clone(),
            reduction: ind.genome(CellType::Reduction).clone(),
            fitness: ind.fitness,
        }
    }

    pub fn individual(&self) -> Individual {
        Individual {
            genomes: [
                self.input.clone(),
                self.normal.clone(),
                self.reduction.clone(),
            ],
            fitness: self.fitness,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let best: BestIndividual = serde_json::from_str(&text)?;
        if best.schema != BEST_SCHEMA {
            return Err(Error::Format(format!(
                "unsupported individual schema {}",
                best.schema
            )));
        }
        best.spec.check()?;
        best.individual().validate(&best.spec)?;
        Ok(best)
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::Config(format!(
                        "{} is in use by another run (remove {} if that run is gone)",
                        dir.display(),
                        path.display()
                    ))
                } else {
                    Error::io(&path, e)
                }
            })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(RunLock { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
