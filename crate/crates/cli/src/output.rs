use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "VOLTRISK_OUT";
pub const DEFAULT_OUT: &str = "out";

/// Writes through a temporary file in the target directory and renames it
/// into place only once `fill` succeeds.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("temp file in {}", dir.display()))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Files written for one trained arm, all sharing a stem.
#[derive(Debug, Clone)]
pub struct ArmFiles {
    pub model: PathBuf,
    pub log: PathBuf,
    pub summary: PathBuf,
}

pub const MODEL_SUFFIX: &str = ".model.json";

impl ArmFiles {
    pub fn in_dir(dir: &Path, stem: &str) -> Self {
        Self {
            model: dir.join(format!("{stem}{MODEL_SUFFIX}")),
            log: dir.join(format!("{stem}.log.jsonl")),
            summary: dir.join(format!("{stem}.summary.json")),
        }
    }

    /// Companion files of a `<stem>.model.json` path.
    pub fn from_model(model: &Path) -> Result<Self> {
        let name = model
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(MODEL_SUFFIX))
            .with_context(|| format!("{} does not end in {MODEL_SUFFIX}", model.display()))?;
        let dir = model.parent().unwrap_or(Path::new(""));
        Ok(Self::in_dir(dir, name))
    }
}

/// File-system friendly form of an arm name.
pub fn stem_for(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
