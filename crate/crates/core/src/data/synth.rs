//! Multi-low-resolution (MLR) corpus synthesis: every image of one camera
//! is down-sampled at a rate drawn uniformly from {2, 3, 4} and resized
//! back; images of all other cameras are copied unchanged.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::manifest::{Manifest, ManifestEntry, MANIFEST_FILE};
use crate::data::{ImageRecord, IMAGE_EXTENSIONS};
use crate::error::{Error, Result};
use crate::imaging::{self, ResolutionTag};

#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    pub lr_camera: u32,
    pub seed: u64,
    /// Forces one rate for every designated image instead of drawing it.
    pub rate_override: Option<u32>,
}

/// Draws the per-image rates. Pure: the same corpus and options always give
/// the same manifest.
pub fn plan_mlr(corpus: &[ImageRecord], opts: &SynthOptions) -> Result<Manifest> {
    let cameras: BTreeSet<u32> = corpus.iter().map(|r| r.camera).collect();
    if cameras.len() < 2 {
        return Err(Error::Config(format!(
            "MLR synthesis needs at least 2 cameras, corpus has {}",
            cameras.len()
        )));
    }
    if !cameras.contains(&opts.lr_camera) {
        return Err(Error::Config(format!(
            "camera {} not present; cameras are {cameras:?}",
            opts.lr_camera
        )));
    }
    if let Some(r) = opts.rate_override {
        ResolutionTag::from_rate(r)?;
    }
    let mut sorted = corpus.to_vec();
    sorted.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let entries = sorted
        .into_iter()
        .map(|record| {
            if record.camera != opts.lr_camera {
                return ManifestEntry {
                    record,
                    tag: ResolutionTag::HR,
                    rate: 1,
                };
            }
            let rate = opts.rate_override.unwrap_or_else(|| rng.gen_range(2..=4));
            let mut record = record;
            if rate > 1 {
                record.path.set_extension("png");
            }
            ManifestEntry {
                tag: ResolutionTag::from_rate(rate).expect("validated rate"),
                record,
                rate,
            }
        })
        .collect();
    Ok(Manifest { entries })
}

/// Finds the source image for a manifest path, allowing the extension to
/// differ (synthesized images are always written as PNG).
fn resolve_source(src_root: &Path, rel: &Path) -> Option<PathBuf> {
    let exact = src_root.join(rel);
    if exact.is_file() {
        return Some(exact);
    }
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| src_root.join(rel).with_extension(ext))
        .find(|p| p.is_file())
}

fn materialize_one(entry: &ManifestEntry, src_root: &Path, out_root: &Path) -> Result<()> {
    let rel = &entry.record.path;
    let src = resolve_source(src_root, rel).ok_or_else(|| Error::ingest(src_root.join(rel), "file not found"))?;
    let dst = out_root.join(rel);
    if let Some(parent) = dst.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let img = imaging::load_native(&src)?;
    if entry.rate == 1 {
        std::fs::copy(&src, &dst).map_err(|e| Error::ingest(&src, e))?;
    } else {
        imaging::save_png(&imaging::downsample_resize(&img, entry.rate)?, &dst)?;
    }
    Ok(())
}

/// Writes every manifest entry from `src_root` into `out_root`, using up to
/// `workers` threads, and stores the manifest alongside.
pub fn materialize(manifest: &Manifest, src_root: &Path, out_root: &Path, workers: usize) -> Result<()> {
    std::fs::create_dir_all(out_root)?;
    let workers = workers.max(1);
    let chunk = manifest.entries.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = manifest
            .entries
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || -> Result<()> {
                    for e in part {
                        materialize_one(e, src_root, out_root)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .try_for_each(|h| h.join().expect("synthesis worker panicked"))
    })?;
    manifest.write(&out_root.join(MANIFEST_FILE))
}

/// Scans `src_root`, plans rates and writes the MLR corpus to `out_root`.
pub fn synthesize_mlr(src_root: &Path, out_root: &Path, opts: &SynthOptions, workers: usize) -> Result<Manifest> {
    let corpus = crate::data::scan_root(src_root)?;
    crate::data::check_disjoint_identities(&corpus)?;
    let manifest = plan_mlr(&corpus, opts)?;
    materialize(&manifest, src_root, out_root, workers)?;
    Ok(manifest)
}
