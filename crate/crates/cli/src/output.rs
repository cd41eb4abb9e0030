//! Run directories.
//!
//! A command collects its files in memory and publishes them with
//! [`publish`]: the files are written into a hidden sibling directory that
//! is renamed onto the target once complete, so a run directory either
//! holds every output of a run or does not exist.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

/// Environment variable naming the directory under which runs are placed
/// when `--out` is not given.
pub const OUT_ROOT_ENV: &str = "DCMT_OUT_ROOT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

/// Files of one run, relative path to contents. Paths may contain `/`.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct RunFiles {
    files: Vec<(String, Vec<u8>)>,
}

impl RunFiles {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, contents: impl Into<Vec<u8>>) {
        self.files.push((name.into(), contents.into()));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_slice())
    }
}

/// Default run directory: `<root>/<command>-<tag>`, with the root taken from
/// [`OUT_ROOT_ENV`].
pub fn default_out_dir(command: &str, tag: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from);
    root.join(format!("{command}-{tag}"))
}

fn staging_path(out: &Path) -> io::Result<PathBuf> {
    let name = out
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "output path has no final component"))?;
    let mut staged = name.to_os_string();
    staged.push(format!(".partial-{}", std::process::id()));
    Ok(out.with_file_name(format!(".{}", staged.to_string_lossy())))
}

/// Writes `files` to `out`. An existing `out` is an error unless `force`
/// is set, in which case it is replaced.
pub fn publish(out: &Path, files: &RunFiles, force: bool) -> io::Result<()> {
    if out.exists() && !force {
        return Err(io::Error::new(
            io::ErrorKind::AlreadyExists,
            format!("{} exists (pass --force to replace it)", out.display()),
        ));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let staged = staging_path(out)?;
    if staged.exists() {
        fs::remove_dir_all(&staged)?;
    }
    let result = (|| {
        fs::create_dir(&staged)?;
        for (name, contents) in &files.files {
            let path = staged.join(name);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, contents)?;
        }
        if out.exists() {
            fs::remove_dir_all(out)?;
        }
        fs::rename(&staged, out)
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&staged);
    }
    result
}
