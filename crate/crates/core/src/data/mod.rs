//! Identity-labelled image corpora on disk.
//!
//! Layout: `root/{train,gallery,query}/<identity>_<camera>_<index>.<ext>`,
//! optionally with a `manifest.tsv` listing every image with its resolution
//! tag and down-sampling rate.

pub mod batch;
pub mod manifest;
pub mod synth;
pub mod toy;

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{BatchSampler, MiniBatch, MultiResolutionSample, PersonGroup, TrainItem, TrainSet};
pub use manifest::{Manifest, ManifestEntry, MANIFEST_FILE};
pub use synth::{materialize, plan_mlr, synthesize_mlr, SynthOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Gallery,
    Query,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Gallery, Split::Query];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Gallery => "gallery",
            Split::Query => "query",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "gallery" => Ok(Split::Gallery),
            "query" => Ok(Split::Query),
            other => Err(Error::Argument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ImageRecord {
    /// Path relative to the dataset root.
    pub path: PathBuf,
    pub identity: u32,
    pub camera: u32,
    pub split: Split,
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Parses `<identity>_<camera>_<index>.<ext>`.
pub fn parse_file_name(name: &str) -> Option<(u32, u32, u32)> {
    let (stem, ext) = name.rsplit_once('.')?;
    if !IMAGE_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) {
        return None;
    }
    let mut parts = stem.split('_');
    let id = parts.next()?.parse().ok()?;
    let cam = parts.next()?.parse().ok()?;
    let idx = parts.next()?.parse().ok()?;
    parts.next().is_none().then_some((id, cam, idx))
}

pub fn file_name(identity: u32, camera: u32, index: u32, ext: &str) -> String {
    format!("{identity}_{camera}_{index}.{ext}")
}

/// Lists every image under the split directories, sorted by path.
pub fn scan_root(root: &Path) -> Result<Vec<ImageRecord>> {
    let mut out = Vec::new();
    for split in Split::ALL {
        let dir = root.join(split.dir_name());
        if !dir.is_dir() {
            continue;
        }
        for entry in std::fs::read_dir(&dir)? {
            let entry = entry?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Some((identity, camera, _)) = parse_file_name(name) {
                out.push(ImageRecord {
                    path: PathBuf::from(split.dir_name()).join(name),
                    identity,
                    camera,
                    split,
                });
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Checks that no identity appears both in training and in test splits.
pub fn check_disjoint_identities(records: &[ImageRecord]) -> Result<()> {
    let train: BTreeSet<u32> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.identity)
        .collect();
    if let Some(r) = records.iter().find(|r| r.split != Split::Train && train.contains(&r.identity)) {
        return Err(Error::Dataset(format!(
            "identity {} appears in both train and {}",
            r.identity, r.split
        )));
    }
    Ok(())
}
