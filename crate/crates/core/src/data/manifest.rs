use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::{DataError, Result};

/// One `rgb,depth,gt` line with paths resolved against the manifest directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub gt: PathBuf,
}

/// The id of a sample is the rgb file name up to its first dot.
pub fn id_from_path(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
    name.split('.').next().unwrap_or_default().to_string()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    path: PathBuf,
    records: Vec<Record>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::parse(path, &text)
    }

    /// Parses manifest text as if it had been read from `path`. Referenced
    /// files must exist.
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let err = |line, msg: String| DataError::Manifest {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = content.split(',').map(str::trim).collect();
            if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
                return Err(err(line, format!("expected `rgb,depth,gt`, found {content:?}")));
            }
            let [rgb, depth, gt] = [0, 1, 2].map(|k| dir.join(fields[k]));
            for p in [&rgb, &depth, &gt] {
                if !p.is_file() {
                    return Err(err(line, format!("missing file {}", p.display())));
                }
            }
            let id = id_from_path(&rgb);
            if !seen.insert(id.clone()) {
                return Err(DataError::DuplicateId {
                    path: path.to_path_buf(),
                    line,
                    id,
                });
            }
            records.push(Record { id, rgb, depth, gt });
        }
        Ok(Self {
            path: path.to_path_buf(),
            records,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
