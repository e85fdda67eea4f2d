//! Provenance manifests written next to every primary output.
//!
//! A manifest lists the stage, the argv that produced it, the digest of each
//! input and output, and the seeds used. Before a stage reads a file it
//! looks for manifests in the same directory that list the file as an
//! output and checks the newest one's digest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use memaudit::digest::sha256_file;
use memaudit::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SUFFIX: &str = ".manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Command-line flag that named the file, e.g. `--out`.
    pub flag: String,
    /// Absolute value given to the flag (a directory for multi-file outputs).
    pub arg: PathBuf,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    pub seeds: BTreeMap<String, u64>,
    pub created: DateTime<Utc>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

fn absolute(path: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(path)?)
}

/// Collects inputs and outputs for one stage.
pub struct Provenance {
    manifest: Manifest,
}

impl Provenance {
    pub fn new(stage: &str) -> Result<Self> {
        Ok(Provenance {
            manifest: Manifest {
                stage: stage.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                argv: std::env::args().skip(1).collect(),
                cwd: std::env::current_dir()?,
                inputs: Vec::new(),
                outputs: Vec::new(),
                seeds: BTreeMap::new(),
                created: Utc::now(),
            },
        })
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.manifest.seeds.insert(name.to_string(), value);
    }

    /// Check `path` against any manifest that produced it, then record it.
    pub fn input(&mut self, flag: &str, path: &Path) -> Result<()> {
        let abs = absolute(path)?;
        let sha256 = sha256_file(&abs)?;
        check_against_manifests(&abs, &sha256)?;
        self.manifest.inputs.push(FileEntry {
            flag: flag.to_string(),
            arg: abs.clone(),
            path: abs,
            sha256,
        });
        Ok(())
    }

    pub fn output(&mut self, flag: &str, path: &Path) -> Result<()> {
        self.output_under(flag, path, path)
    }

    /// An output file that lives under the directory given to `flag`.
    pub fn output_under(&mut self, flag: &str, arg: &Path, path: &Path) -> Result<()> {
        let abs = absolute(path)?;
        self.manifest.outputs.push(FileEntry {
            flag: flag.to_string(),
            arg: absolute(arg)?,
            sha256: sha256_file(&abs)?,
            path: abs,
        });
        Ok(())
    }

    /// Write the manifest next to `primary` (inside it when it is a
    /// directory).
    pub fn finish(self, primary: &Path) -> Result<PathBuf> {
        let target = if primary.is_dir() {
            primary.join(format!("{}{SUFFIX}", self.manifest.stage))
        } else {
            let mut name = primary.as_os_str().to_owned();
            name.push(SUFFIX);
            PathBuf::from(name)
        };
        fs::write(&target, serde_json::to_vec_pretty(&self.manifest)?)?;
        log::debug!("wrote {}", target.display());
        Ok(target)
    }
}

fn check_against_manifests(abs: &Path, sha256: &str) -> Result<()> {
    let Some(dir) = abs.parent() else {
        return Ok(());
    };
    let Ok(listing) = fs::read_dir(dir) else {
        return Ok(());
    };
    let mut newest: Option<(DateTime<Utc>, PathBuf, String)> = None;
    for entry in listing.flatten() {
        let p = entry.path();
        if !p.to_string_lossy().ends_with(SUFFIX) || p == abs {
            continue;
        }
        let m = match Manifest::load(&p) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("ignoring unreadable manifest {}: {e}", p.display());
                continue;
            }
        };
        for out in m.outputs.iter().filter(|o| o.path == abs) {
            if newest.as_ref().is_none_or(|n| m.created > n.0) {
                newest = Some((m.created, p.clone(), out.sha256.clone()));
            }
        }
    }
    match newest {
        Some((_, manifest, expected)) if expected != sha256 => Err(Error::integrity(format!(
            "{} does not match the digest recorded in {}",
            abs.display(),
            manifest.display()
        ))),
        _ => Ok(()),
    }
}

/// Replace the value of `flag` in `argv`, in either `--flag value` or
/// `--flag=value` form.
pub fn replace_flag(argv: &mut [String], flag: &str, value: &str) -> bool {
    let eq = format!("{flag}=");
    for i in 0..argv.len() {
        if argv[i] == flag && i + 1 < argv.len() {
            argv[i + 1] = value.to_string();
            return true;
        }
        if argv[i].starts_with(&eq) {
            argv[i] = format!("{eq}{value}");
            return true;
        }
    }
    false
}
