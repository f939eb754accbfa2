//! Line-oriented manifest: one tab-separated record per image,
//! `relative_path identity camera split resolution_tag r`.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::{ImageRecord, Split};
use crate::error::{Error, Result};
use crate::imaging::ResolutionTag;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub record: ImageRecord,
    pub tag: ResolutionTag,
    /// Down-sampling rate applied at synthesis time (1 when untouched).
    pub rate: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Every record tagged HR at rate 1.
    pub fn all_hr(records: &[ImageRecord]) -> Self {
        Self {
            entries: records
                .iter()
                .map(|r| ManifestEntry {
                    record: r.clone(),
                    tag: ResolutionTag::HR,
                    rate: 1,
                })
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let path = e.record.path.to_string_lossy().replace('\\', "/");
            s.push_str(&format!(
                "{path}\t{}\t{}\t{}\t{}\t{}\n",
                e.record.identity, e.record.camera, e.record.split, e.tag, e.rate
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| Error::Manifest { line: i + 1, reason };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 6 {
                return Err(bad(format!("expected 6 tab-separated fields, found {}", cols.len())));
            }
            let num = |s: &str, what: &str| s.parse::<u32>().map_err(|e| bad(format!("{what} {s:?}: {e}")));
            let tag: ResolutionTag = cols[4].parse().map_err(|e: Error| bad(e.to_string()))?;
            let rate = num(cols[5], "rate")?;
            if tag.rate().is_some_and(|r| r != rate) {
                return Err(bad(format!("tag {tag} disagrees with rate {rate}")));
            }
            entries.push(ManifestEntry {
                record: ImageRecord {
                    path: PathBuf::from(cols[0]),
                    identity: num(cols[1], "identity")?,
                    camera: num(cols[2], "camera")?,
                    split: cols[3].parse().map_err(|e: Error| bad(e.to_string()))?,
                },
                tag,
                rate,
            });
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ingest(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    /// Manifest at `root/manifest.tsv`, or every scanned image as HR.
    pub fn load_or_scan(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if path.is_file() {
            Self::read(&path)
        } else {
            Ok(Self::all_hr(&crate::data::scan_root(root)?))
        }
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.record.split == split).collect()
    }
}
