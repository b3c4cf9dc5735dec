use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split `{other}`"))),
        }
    }
}

/// One row of the slide manifest. `label` is 1 for five-year survival, 0 otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideManifestEntry {
    pub slide_id: String,
    pub image_path: PathBuf,
    pub label: u8,
    pub split: Split,
}

#[derive(Deserialize)]
struct RawRow {
    slide_id: String,
    image_path: String,
    label: String,
    split: String,
}

/// Reads a manifest CSV. Relative image paths are resolved against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<SlideManifestEntry>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers()?.clone();
    let expected = ["slide_id", "image_path", "label", "split"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Manifest(format!(
            "expected header `{}`, got `{}`",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, row) in rdr.deserialize::<RawRow>().enumerate() {
        let row = row?;
        let label = match row.label.trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Manifest(format!(
                    "row {}: label must be 0 or 1, got `{other}`",
                    line + 1
                )))
            }
        };
        let split: Split = row.split.trim().parse()?;
        if row.slide_id.is_empty() || !seen.insert(row.slide_id.clone()) {
            return Err(Error::Manifest(format!(
                "row {}: slide id `{}` empty or duplicated",
                line + 1,
                row.slide_id
            )));
        }
        let p = PathBuf::from(row.image_path.trim());
        let image_path = if p.is_absolute() { p } else { base.join(p) };
        out.push(SlideManifestEntry {
            slide_id: row.slide_id,
            image_path,
            label,
            split,
        });
    }
    if out.is_empty() {
        return Err(Error::Manifest(format!("{} has no rows", path.display())));
    }
    Ok(out)
}

/// Writes a manifest; image paths are written as given.
pub fn write_manifest(path: &Path, entries: &[SlideManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["slide_id", "image_path", "label", "split"])?;
    for e in entries {
        w.write_record([
            e.slide_id.as_str(),
            &e.image_path.to_string_lossy(),
            &e.label.to_string(),
            &e.split.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
