//! Gallery/query feature extraction, Euclidean ranking, CMC and mAP.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_id, Checkpoint};
use crate::data::{Manifest, Split};
use crate::dffn::{FEATURE_DIM, JOINT_DIM};
use crate::error::{Error, Result};
use crate::imaging::{self, ImageTensor};
use crate::model::Mrjl;
use crate::params::ParamStore;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Every image goes through the same reconstruct-then-extract path.
    Unknown,
    /// Gallery images feed the HR branch directly.
    Known,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::Known, Mode::Unknown];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Unknown => "unknown",
            Mode::Known => "known",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Joint,
    HrOnly,
    LrOnly,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::HrOnly, Subset::LrOnly, Subset::Joint];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Joint => "joint",
            Subset::HrOnly => "hr_only",
            Subset::LrOnly => "lr_only",
        }
    }

    /// Row label in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Subset::Joint => "HR+LR",
            Subset::HrOnly => "HR",
            Subset::LrOnly => "LR",
        }
    }

    /// Columns of a joint feature used by this subset.
    pub fn columns(self) -> Range<usize> {
        match self {
            Subset::Joint => 0..JOINT_DIM,
            Subset::HrOnly => 0..FEATURE_DIM,
            Subset::LrOnly => FEATURE_DIM..JOINT_DIM,
        }
    }
}

macro_rules! str_enum {
    ($t:ty, $what:literal, [$($v:expr),*]) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                [$($v),*]
                    .into_iter()
                    .find(|v: &$t| v.as_str() == s)
                    .ok_or_else(|| Error::Argument(format!(concat!("unknown ", $what, " {:?}"), s)))
            }
        }
    };
}

str_enum!(Mode, "mode", [Mode::Unknown, Mode::Known]);
str_enum!(Subset, "subset", [Subset::Joint, Subset::HrOnly, Subset::LrOnly]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalMode {
    pub mode: Mode,
    pub subset: Subset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Gallery,
    Query,
}

/// Dense row-major `f64` matrix, one feature per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

const DUMP_DTYPE: &str = "f64";

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "feature matrix",
                expected: vec![rows, cols],
                got: vec![data.len()],
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Argument("feature rows of unequal length".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn select_columns(&self, cols: Range<usize>) -> Result<Self> {
        if cols.end > self.cols || cols.start > cols.end {
            return Err(Error::Argument(format!("columns {cols:?} outside a {}-column matrix", self.cols)));
        }
        let data = (0..self.rows).flat_map(|i| self.row(i)[cols.clone()].iter().copied()).collect();
        Self::new(self.rows, cols.len(), data)
    }

    /// Writes the text header `n_rows n_cols dtype` and a newline, then the
    /// values little-endian.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{} {} {DUMP_DTYPE}", self.rows, self.cols)?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let bad = |why: &str| Error::Argument(format!("feature dump: {why}"));
        let fields: Vec<&str> = header.split_whitespace().collect();
        let [rows, cols, dtype] = fields[..] else {
            return Err(bad("header must be `n_rows n_cols dtype`"));
        };
        if dtype != DUMP_DTYPE {
            return Err(bad(&format!("unsupported dtype {dtype}")));
        }
        let rows: usize = rows.parse().map_err(|_| bad("bad row count"))?;
        let cols: usize = cols.parse().map_err(|_| bad("bad column count"))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != rows * cols * 8 {
            return Err(bad("payload size disagrees with header"));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::new(rows, cols, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path).map_err(|e| Error::ingest(path, e))?)
    }
}

/// Maps `f` over `items` on up to `workers` threads, keeping input order.
fn par_map<T: Sync, U: Send>(items: &[T], workers: usize, f: impl Fn(usize, &T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, x)| f(c * chunk + i, x))
                        .collect::<Result<Vec<U>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Joint features of `images` in order. Known-mode gallery images take the
/// known-resolution path; everything else is resolution-agnostic.
pub fn extract_all(
    model: &Mrjl,
    store: &ParamStore,
    images: &[ImageTensor],
    role: Role,
    mode: Mode,
    workers: usize,
) -> Result<FeatureMatrix> {
    let rows = par_map(images, workers, |_, img| {
        let f = match (mode, role) {
            (Mode::Known, Role::Gallery) => model.extract_known_gallery(store, img)?,
            _ => model.extract_unknown(store, img)?,
        };
        Ok(f.as_slice().to_vec())
    })?;
    if rows.is_empty() {
        return Err(Error::Argument("nothing to extract".into()));
    }
    FeatureMatrix::from_rows(&rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub identity: u32,
    pub camera: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Every gallery image counts.
    MultiShot,
    /// One randomly chosen gallery image per identity, averaged over trials.
    SingleShot { trials: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankOptions {
    /// Drops gallery entries sharing both identity and camera with the query.
    pub filter_same_camera: bool,
    pub protocol: Protocol,
    pub workers: usize,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self {
            filter_same_camera: true,
            protocol: Protocol::MultiShot,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRanking {
    /// Gallery indices by ascending distance, ties in index order.
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub rankings: Vec<QueryRanking>,
    /// `cmc[k]` is the Rank-(k+1) accuracy.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Queries with at least one admissible true match.
    pub valid_queries: usize,
}

impl RetrievalResult {
    /// Rank-`k` accuracy, 1-based.
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[(k.max(1) - 1).min(self.cmc.len() - 1)]
    }
}

/// Precision-at-hit average and first-hit position of a ranked match list.
fn first_hit_and_ap(matches: impl Iterator<Item = bool>) -> Option<(usize, f64)> {
    let (mut hits, mut sum, mut first) = (0usize, 0.0, None);
    for (i, m) in matches.enumerate() {
        if m {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
            first.get_or_insert(i);
        }
    }
    first.map(|f| (f, sum / hits as f64))
}

struct QueryOutcome {
    ranking: QueryRanking,
    /// `(first hit position, weight)` pairs and the query's AP.
    score: Option<(Vec<(usize, f64)>, f64)>,
}

pub fn rank(
    query: &FeatureMatrix,
    gallery: &FeatureMatrix,
    query_meta: &[ImageMeta],
    gallery_meta: &[ImageMeta],
    opts: &RankOptions,
) -> Result<RetrievalResult> {
    if query.cols() != gallery.cols() {
        return Err(Error::Argument(format!(
            "query features have {} dimensions, gallery {}",
            query.cols(),
            gallery.cols()
        )));
    }
    if query.rows() != query_meta.len() || gallery.rows() != gallery_meta.len() {
        return Err(Error::Argument("feature rows and metadata disagree in length".into()));
    }
    if query.rows() == 0 || gallery.rows() == 0 {
        return Err(Error::Argument("empty query or gallery".into()));
    }
    let qs: Vec<usize> = (0..query.rows()).collect();
    let outcomes = par_map(&qs, opts.workers, |_, &q| {
        let qm = query_meta[q];
        let qf = query.row(q);
        let mut order: Vec<(usize, f64)> = (0..gallery.rows())
            .filter(|&g| !(opts.filter_same_camera && gallery_meta[g] == qm))
            .map(|g| {
                let d2: f64 = qf.iter().zip(gallery.row(g)).map(|(a, b)| (a - b) * (a - b)).sum();
                (g, d2.sqrt())
            })
            .collect();
        order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let ranking = QueryRanking {
            indices: order.iter().map(|o| o.0).collect(),
            distances: order.iter().map(|o| o.1).collect(),
        };
        let is_match = |g: usize| gallery_meta[g].identity == qm.identity;
        let score = match opts.protocol {
            Protocol::MultiShot => {
                first_hit_and_ap(ranking.indices.iter().map(|&g| is_match(g))).map(|(f, ap)| (vec![(f, 1.0)], ap))
            }
            Protocol::SingleShot { trials, seed } => {
                if !ranking.indices.iter().any(|&g| is_match(g)) {
                    None
                } else {
                    let trials = trials.max(1);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(q as u64);
                    let mut by_id: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
                    for &g in &ranking.indices {
                        by_id.entry(gallery_meta[g].identity).or_default().push(g);
                    }
                    let mut firsts = Vec::with_capacity(trials);
                    let mut ap = 0.0;
                    for _ in 0..trials {
                        let mut keep = vec![false; gallery.rows()];
                        for members in by_id.values() {
                            keep[*members.choose(&mut rng).expect("non-empty")] = true;
                        }
                        let sampled = ranking.indices.iter().filter(|&&g| keep[g]).map(|&g| is_match(g));
                        let (f, a) = first_hit_and_ap(sampled).expect("one match per identity is kept");
                        firsts.push((f, 1.0 / trials as f64));
                        ap += a / trials as f64;
                    }
                    Some((firsts, ap))
                }
            }
        };
        Ok(QueryOutcome { ranking, score })
    })?;
    let mut cmc = vec![0.0; gallery.rows()];
    let (mut ap_sum, mut valid) = (0.0, 0usize);
    for o in &outcomes {
        if let Some((firsts, ap)) = &o.score {
            valid += 1;
            ap_sum += ap;
            for &(f, w) in firsts {
                cmc[f] += w;
            }
        }
    }
    if valid == 0 {
        return Err(Error::Argument("no query has an admissible match in the gallery".into()));
    }
    let mut acc = 0.0;
    for c in cmc.iter_mut() {
        acc += *c;
        *c = (acc / valid as f64).min(1.0);
    }
    Ok(RetrievalResult {
        rankings: outcomes.into_iter().map(|o| o.ranking).collect(),
        cmc,
        map: ap_sum / valid as f64,
        valid_queries: valid,
    })
}

/// Gallery and query images with their identities and cameras, in
/// manifest order.
#[derive(Debug, Clone)]
pub struct EvalData {
    pub gallery: Vec<ImageTensor>,
    pub gallery_meta: Vec<ImageMeta>,
    pub query: Vec<ImageTensor>,
    pub query_meta: Vec<ImageMeta>,
}

impl EvalData {
    /// Loads the gallery and query splits of `root` at `height × width`.
    pub fn load(root: &Path, height: usize, width: usize, workers: usize) -> Result<Self> {
        let manifest = Manifest::load_or_scan(root)?;
        let gallery = manifest.split(Split::Gallery);
        let query = manifest.split(Split::Query);
        if gallery.is_empty() || query.is_empty() {
            return Err(Error::Dataset(format!("{} has no gallery or no query images", root.display())));
        }
        let missing: Vec<_> = gallery
            .iter()
            .chain(&query)
            .map(|e| root.join(&e.record.path))
            .filter(|p| !p.is_file())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingFiles(missing));
        }
        let load = |entries: &[&crate::data::ManifestEntry]| -> Result<(Vec<ImageTensor>, Vec<ImageMeta>)> {
            let images = par_map(entries, workers, |_, e| {
                imaging::load_resized(&root.join(&e.record.path), height, width, e.tag)
            })?;
            let meta = entries
                .iter()
                .map(|e| ImageMeta {
                    identity: e.record.identity,
                    camera: e.record.camera,
                })
                .collect();
            Ok((images, meta))
        };
        let (gallery, gallery_meta) = load(&gallery)?;
        let (query, query_meta) = load(&query)?;
        Ok(Self {
            gallery,
            gallery_meta,
            query,
            query_meta,
        })
    }

    /// Splits `(image, identity, camera)` triples by camera: `query_camera`
    /// images become queries, the rest the gallery.
    pub fn by_camera(images: Vec<(ImageTensor, u32, u32)>, query_camera: u32) -> Self {
        let mut d = Self {
            gallery: Vec::new(),
            gallery_meta: Vec::new(),
            query: Vec::new(),
            query_meta: Vec::new(),
        };
        for (img, identity, camera) in images {
            let meta = ImageMeta { identity, camera };
            if camera == query_camera {
                d.query.push(img);
                d.query_meta.push(meta);
            } else {
                d.gallery.push(img);
                d.gallery_meta.push(meta);
            }
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: Mode,
    pub subset: Subset,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub n_query: usize,
    pub n_gallery: usize,
    pub checkpoint_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn row(&self, mode: Mode, subset: Subset) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.mode == mode && r.subset == subset)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<8} {:<6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>9}\n",
            "mode", "subset", "Rank-1", "Rank-5", "Rank-10", "mAP", "queries", "gallery"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<8} {:<6} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>7} {:>9}\n",
                r.mode.as_str(),
                r.subset.label(),
                100.0 * r.rank1,
                100.0 * r.rank5,
                100.0 * r.rank10,
                100.0 * r.map,
                r.n_query,
                r.n_gallery
            ));
        }
        if let Some(r) = self.rows.first() {
            s.push_str(&format!("checkpoint {}\n", r.checkpoint_id));
        }
        s
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(REPORT_JSON), self.to_json())?;
        std::fs::write(dir.join(REPORT_TEXT), self.to_text())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub modes: Vec<Mode>,
    pub subsets: Vec<Subset>,
    pub rank: RankOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            modes: vec![Mode::Unknown],
            subsets: vec![Subset::Joint],
            rank: RankOptions::default(),
        }
    }
}

/// Joint features of both splits under `mode`, as `(query, gallery)`.
pub fn extract_split_features(
    model: &Mrjl,
    store: &ParamStore,
    data: &EvalData,
    mode: Mode,
    workers: usize,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let q = extract_all(model, store, &data.query, Role::Query, mode, workers)?;
    let g = extract_all(model, store, &data.gallery, Role::Gallery, mode, workers)?;
    Ok((q, g))
}

/// One report row per requested mode and subset. Features are extracted
/// once per mode and sliced for the subsets.
pub fn evaluate(model: &Mrjl, store: &ParamStore, data: &EvalData, opts: &EvalOptions, checkpoint: &str) -> Result<EvalReport> {
    let mut rows = Vec::new();
    let mut query_feats = None;
    for &mode in &opts.modes {
        let q = match &query_feats {
            Some(q) => q,
            None => query_feats.insert(extract_all(model, store, &data.query, Role::Query, mode, opts.rank.workers)?),
        };
        let g = extract_all(model, store, &data.gallery, Role::Gallery, mode, opts.rank.workers)?;
        for &subset in &opts.subsets {
            let cols = subset.columns();
            let r = rank(
                &q.select_columns(cols.clone())?,
                &g.select_columns(cols)?,
                &data.query_meta,
                &data.gallery_meta,
                &opts.rank,
            )?;
            rows.push(ReportRow {
                mode,
                subset,
                rank1: r.rank(1),
                rank5: r.rank(5),
                rank10: r.rank(10),
                map: r.map,
                n_query: q.rows(),
                n_gallery: g.rows(),
                checkpoint_id: checkpoint.to_string(),
            });
        }
    }
    Ok(EvalReport { rows })
}

/// Loads `checkpoint` and evaluates it on the splits under `root`.
pub fn evaluate_checkpoint(root: &Path, checkpoint: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let bytes = std::fs::read(checkpoint).map_err(|e| Error::ingest(checkpoint, e))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let (model, store) = ck.restore()?;
    let data = EvalData::load(root, ck.model.height, ck.model.width, opts.rank.workers)?;
    evaluate(&model, &store, &data, opts, &checkpoint_id(&bytes))
}

#[cfg(test)]
mod tests;
