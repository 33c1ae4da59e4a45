use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

/// Relative output paths are resolved against this directory when set.
pub const OUTPUT_DIR_ENV: &str = "MADP_OUTPUT_DIR";

pub fn resolve(out: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(base) if out.is_relative() && !base.is_empty() => PathBuf::from(base).join(out),
        _ => out.to_path_buf(),
    }
}

/// A directory that only appears at its final path once everything in it has
/// been written. Dropping it without [`Staged::commit`] removes the partial
/// output.
pub struct Staged {
    tmp: PathBuf,
    target: PathBuf,
    done: bool,
}

impl Staged {
    pub fn new(target: &Path) -> Result<Self> {
        let name = target.file_name().with_context(|| format!("output path {} has no file name", target.display()))?;
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let tmp = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        Ok(Self { tmp, target: target.to_path_buf(), done: false })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    /// Moves the staged directory into place, replacing an older one.
    pub fn commit(mut self) -> Result<PathBuf> {
        if self.target.is_file() {
            bail!("{} exists and is a file", self.target.display());
        }
        if self.target.exists() {
            fs::remove_dir_all(&self.target).with_context(|| format!("replacing {}", self.target.display()))?;
        }
        fs::rename(&self.tmp, &self.target).with_context(|| format!("moving output to {}", self.target.display()))?;
        self.done = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
