use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::read_header;
use crate::error::{Error, Result};

/// One annotated training pair. Paths are resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub subject: String,
    pub split: Option<String>,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub lesion_class_id: u32,
    pub modality_tag: String,
    /// SHA-256 of the manifest file contents, used to key cached artifacts.
    pub content_hash: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    image: PathBuf,
    mask: PathBuf,
    subject: String,
    #[serde(default)]
    split: Option<String>,
}

/// Loads a line-delimited JSON manifest and validates every entry: files exist,
/// image and mask share dims and spacing, subject ids are unique, and at least
/// one entry is present.
pub fn load_manifest(path: &Path, lesion_class_id: u32, modality_tag: &str) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let rec: Line = serde_json::from_str(line)
            .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if !seen.insert(rec.subject.clone()) {
            return Err(Error::Manifest(format!("duplicate subject id '{}'", rec.subject)));
        }
        entries.push(ManifestEntry {
            image: base.join(rec.image),
            mask: base.join(rec.mask),
            subject: rec.subject,
            split: rec.split,
        });
    }
    if entries.is_empty() {
        return Err(Error::Manifest(format!("{} lists no annotated pairs", path.display())));
    }
    for e in &entries {
        let img = read_header(&e.image).map_err(|err| err.for_subject(&e.subject))?;
        let seg = read_header(&e.mask).map_err(|err| err.for_subject(&e.subject))?;
        let spacing_ok = (0..3).all(|a| (img.spacing[a] - seg.spacing[a]).abs() <= 1e-5 * img.spacing[a]);
        if img.dims != seg.dims || !spacing_ok {
            return Err(Error::Geometry {
                subject: e.subject.clone(),
                detail: format!(
                    "image dims {:?} spacing {:?} vs mask dims {:?} spacing {:?}",
                    img.dims, img.spacing, seg.dims, seg.spacing
                ),
            });
        }
    }
    Ok(DatasetManifest {
        entries,
        lesion_class_id,
        modality_tag: modality_tag.to_string(),
        content_hash: super::sha256_hex(text.as_bytes()),
    })
}
