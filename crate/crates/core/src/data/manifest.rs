use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::CLASS_NAMES;
use crate::error::{data_err, format_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format_err!("unknown split '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub path: PathBuf,
    pub class_id: usize,
    /// `None` until [`super::stratified_split`] assigns one.
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
    pub class_names: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == Some(split)).count()
    }

    /// Per-class record counts, optionally restricted to one split.
    pub fn class_counts(&self, split: Option<Split>) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for r in &self.records {
            if split.is_none() || r.split == split {
                counts[r.class_id] += 1;
            }
        }
        counts
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "bmp"))
}

/// Scans `<root>/<ClassName>/*.{png,bmp}` for every name in the class table.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    Ok(load_dataset_with_report(root)?.0)
}

/// Like [`load_dataset`], also returning files that were skipped because
/// their header could not be read.
pub fn load_dataset_with_report(root: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<SkippedFile>)> {
    let root = root.as_ref();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (class_id, name) in CLASS_NAMES.iter().enumerate() {
        let dir = root.join(name);
        if !dir.is_dir() {
            return Err(data_err!("missing class directory '{name}' under {}", root.display()));
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        files.sort();
        let mut found = 0;
        for path in files {
            let readable = image::ImageReader::open(&path)
                .and_then(|r| r.with_guessed_format())
                .map_err(|e| e.to_string())
                .and_then(|r| r.into_dimensions().map_err(|e| e.to_string()));
            match readable {
                Ok(_) => {
                    found += 1;
                    records.push(Record {
                        path,
                        class_id,
                        split: None,
                    });
                }
                Err(reason) => skipped.push(SkippedFile { path, reason }),
            }
        }
        if found == 0 {
            return Err(data_err!("class '{name}' has no readable images in {}", dir.display()));
        }
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        records,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        seed: 0,
    };
    Ok((manifest, skipped))
}

const HEADER: [&str; 3] = ["path", "class_id", "split"];

/// Writes `path,class_id,split` rows; paths are relative to the manifest
/// root where possible. Unassigned records have an empty split.
pub fn write_manifest_csv(manifest: &DatasetManifest) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| format_err!("manifest csv: {e}");
    w.write_record(HEADER).map_err(csv_err)?;
    for r in &manifest.records {
        let rel = r.path.strip_prefix(&manifest.root).unwrap_or(&r.path);
        let path = rel
            .to_str()
            .ok_or_else(|| data_err!("path {} is not valid UTF-8", rel.display()))?;
        let split = r.split.map_or("", Split::as_str);
        w.write_record([path, &r.class_id.to_string(), split]).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| format_err!("manifest csv: {e}"))?;
    String::from_utf8(bytes).map_err(|e| format_err!("manifest csv: {e}"))
}

/// Parses manifest CSV text. Relative paths are resolved against `root`.
pub fn parse_manifest_csv(text: &str, root: &Path) -> Result<DatasetManifest> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| format_err!("manifest csv header: {e}"))?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(format_err!("manifest csv header must be path,class_id,split"));
    }
    let mut records = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| format_err!("manifest csv row {}: {e}", line + 1))?;
        if row.len() != 3 {
            return Err(format_err!("manifest csv row {} has {} fields", line + 1, row.len()));
        }
        let class_id: usize = row[1]
            .parse()
            .map_err(|_| format_err!("manifest csv row {}: bad class_id '{}'", line + 1, &row[1]))?;
        if class_id >= CLASS_NAMES.len() {
            return Err(data_err!("manifest csv row {}: class_id {class_id} out of range", line + 1));
        }
        let split = match &row[2] {
            "" => None,
            s => Some(s.parse()?),
        };
        let p = PathBuf::from(&row[0]);
        let path = if p.is_absolute() { p } else { root.join(p) };
        records.push(Record { path, class_id, split });
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        records,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        seed: 0,
    })
}

pub fn read_manifest_csv(path: &Path, root: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest_csv(&text, root)
}
