//! Dataset layouts, per-user splits, the synthetic corpus and the feature cache.

mod cache;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use thiserror::Error;

pub use cache::{kind_dim, CacheKey, FeatureCache, CACHE_MAGIC, CACHE_VERSION};
pub use synth::{generate_synthetic_corpus, render_eye, EyeGeometry, Ripple, SampleParams, SynthConfig, SyntheticCorpus, SyntheticSample, UserSignature, GLINT_LEVEL};

use crate::imaging::{EyeImage, ImagingError, SegMask};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Imaging(#[from] ImagingError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("record `{0}` has no segmentation mask")]
    MissingMask(String),
    #[error("need at least 2 users with 2 or more samples, found {0}")]
    TooFewUsers(usize),
    #[error("need at least 2 samples per user, got {0}")]
    TooFewSamples(usize),
    #[error("test fraction must be in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("no images found under {0}")]
    Empty(PathBuf),
    #[error("frame `{frame}` of sequence `{sequence}` has no gaze vector")]
    MissingGaze { sequence: String, frame: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("gaze vector has zero length")]
    ZeroGaze,
    #[error("feature of kind `{kind}` must have length {expected}, got {found}")]
    DimMismatch { kind: String, expected: usize, found: usize },
    #[error("unknown feature kind `{0}`")]
    UnknownKind(String),
    #[error("cache file {path}: {message}")]
    CacheFormat { path: PathBuf, message: String },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Unit-norm 3-D gaze direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeLabel([f64; 3]);

impl GazeLabel {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (x * x + y * y + z * z).sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(DataError::ZeroGaze);
        }
        Ok(Self([x / n, y / n, z / n]))
    }

    /// Direction for horizontal `yaw` and vertical `pitch` angles (radians).
    pub fn from_angles(yaw: f64, pitch: f64) -> Self {
        Self([pitch.cos() * yaw.sin(), pitch.sin(), pitch.cos() * yaw.cos()])
    }

    pub fn vector(&self) -> [f64; 3] {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub record_id: String,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub gaze: Option<GazeLabel>,
    pub user_id: String,
    /// Class index; users are numbered in lexicographic order.
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
    /// Sorted user ids; position is the class label.
    pub users: Vec<String>,
}

impl DatasetManifest {
    pub fn class_count(&self) -> usize {
        self.users.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Reads every referenced image and mask.
    pub fn load(&self) -> Result<Dataset> {
        let samples = self
            .records
            .iter()
            .map(|r| {
                let image = EyeImage::load_png(&r.image_path, &r.user_id, &r.record_id)?;
                let mask = match &r.mask_path {
                    Some(p) => {
                        let m = SegMask::load(p)?;
                        m.check_aligned(&image)?;
                        Some(m)
                    }
                    None => None,
                };
                Ok(Sample { record_id: r.record_id.clone(), user_id: r.user_id.clone(), label: r.label, split: r.split, image, mask, gaze: r.gaze })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { samples, users: self.users.clone() })
    }
}

/// An in-memory labelled eye image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub record_id: String,
    pub user_id: String,
    pub label: usize,
    pub split: Split,
    pub image: EyeImage,
    pub mask: Option<SegMask>,
    pub gaze: Option<GazeLabel>,
}

impl Sample {
    pub fn mask(&self) -> Result<&SegMask> {
        self.mask.as_ref().ok_or_else(|| DataError::MissingMask(self.record_id.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub users: Vec<String>,
}

impl Dataset {
    pub fn class_count(&self) -> usize {
        self.users.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

/// Per-user test count: `round(fraction · n)` with halves rounded up, kept
/// within `[1, n - 1]`.
pub fn test_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 + 0.5).floor() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Drops users with fewer than two records, numbers the rest in
/// lexicographic order and splits each user's records at random.
///
/// Returns the sorted user list and, for each input, its label and split
/// (`None` when the user was dropped).
pub fn assign_splits<'a>(
    items: impl IntoIterator<Item = (&'a str, &'a str)>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<Option<(usize, Split)>>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::InvalidFraction(test_fraction));
    }
    let items: Vec<(&str, &str)> = items.into_iter().collect();
    let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (user, _)) in items.iter().enumerate() {
        by_user.entry(user).or_default().push(i);
    }
    by_user.retain(|_, v| v.len() >= 2);
    if by_user.len() < 2 {
        return Err(DataError::TooFewUsers(by_user.len()));
    }
    let users: Vec<String> = by_user.keys().map(|u| u.to_string()).collect();
    let mut out = vec![None; items.len()];
    for (label, (user, mut idx)) in by_user.into_iter().enumerate() {
        idx.sort_by(|&a, &b| items[a].1.cmp(items[b].1));
        let mut rng = crate::rng::keyed(seed, &["split", user]);
        idx.shuffle(&mut rng);
        let n_test = test_count(idx.len(), test_fraction);
        for (k, i) in idx.into_iter().enumerate() {
            out[i] = Some((label, if k < n_test { Split::Test } else { Split::Train }));
        }
    }
    Ok((users, out))
}

fn sorted_files(dir: &Path, ext: &[&str]) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().and_then(|e| e.to_str()).is_some_and(|e| ext.contains(&e.to_ascii_lowercase().as_str())))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn find_mask(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["npy", "png"].iter().map(|e| dir.join(format!("{stem}.{e}"))).find(|p| p.is_file())
}

fn read_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| DataError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let headers = reader.headers().map_err(|e| DataError::Parse { path: path.to_path_buf(), line: 1, message: e.to_string() })?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| DataError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let (stem_col, user_col) = (col("stem")?, col("user_id")?);
    let mut out = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| DataError::Parse { path: path.to_path_buf(), line: i + 2, message: e.to_string() })?;
        out.insert(row[stem_col].to_string(), row[user_col].to_string());
    }
    Ok(out)
}

/// Loads `root/images/*.png` with masks from `root/labels/<stem>.{npy,png}`.
///
/// User ids come from `root/meta.csv` (`stem,user_id`) when present and
/// otherwise from the file stem up to the first underscore.
pub fn load_recognition_dataset(root: &Path, test_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    let images = root.join("images");
    if !images.is_dir() {
        return Err(DataError::Empty(images));
    }
    let files = sorted_files(&images, &["png"])?;
    if files.is_empty() {
        return Err(DataError::Empty(images));
    }
    let meta_path = root.join("meta.csv");
    let meta = if meta_path.is_file() { Some(read_meta(&meta_path)?) } else { None };
    let labels = root.join("labels");
    let mut entries = Vec::with_capacity(files.len());
    for path in files {
        let id = stem(&path);
        let mask = find_mask(&labels, &id).ok_or_else(|| DataError::MissingMask(id.clone()))?;
        let user = match &meta {
            Some(m) => m.get(&id).cloned().ok_or_else(|| DataError::Parse {
                path: meta_path.clone(),
                line: 0,
                message: format!("no user for `{id}`"),
            })?,
            None => id.split('_').next().unwrap_or(&id).to_string(),
        };
        entries.push((id, user, path, mask));
    }
    let (users, assigned) = assign_splits(entries.iter().map(|(id, user, _, _)| (user.as_str(), id.as_str())), test_fraction, seed)?;
    let records = entries
        .into_iter()
        .zip(assigned)
        .filter_map(|((record_id, user_id, image_path, mask), a)| {
            a.map(|(label, split)| Record { record_id, image_path, mask_path: Some(mask), gaze: None, user_id, label, split })
        })
        .collect();
    Ok(DatasetManifest { records, users })
}

fn read_gaze_labels(path: &Path) -> Result<BTreeMap<String, GazeLabel>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| DataError::Parse { path: path.to_path_buf(), line: i + 1, message };
        let parts: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
        if parts.len() != 4 {
            return Err(err(format!("expected `frame_id x y z`, got `{line}`")));
        }
        let v: Vec<f64> = parts[1..].iter().map(|s| s.parse::<f64>().map_err(|e| err(e.to_string()))).collect::<Result<_>>()?;
        let label = GazeLabel::new(v[0], v[1], v[2]).map_err(|e| err(e.to_string()))?;
        out.insert(parts[0].to_string(), label);
    }
    Ok(out)
}

fn load_gaze_split(root: &Path, split: Split, users: &mut Vec<String>, records: &mut Vec<Record>) -> Result<()> {
    let sequences = root.join("sequences");
    if !sequences.is_dir() {
        return Ok(());
    }
    let mut seqs: Vec<PathBuf> = std::fs::read_dir(&sequences)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    seqs.sort();
    for seq in seqs {
        let seq_id = seq.file_name().unwrap().to_string_lossy().into_owned();
        let label_path = root.join("labels").join(format!("{seq_id}.txt"));
        let labels = if label_path.is_file() { Some(read_gaze_labels(&label_path)?) } else { None };
        let masks = root.join("masks").join(&seq_id);
        for frame in sorted_files(&seq, &["png"])? {
            let frame_id = stem(&frame);
            let gaze = match &labels {
                Some(l) => Some(*l.get(&frame_id).ok_or_else(|| DataError::MissingGaze { sequence: seq_id.clone(), frame: frame_id.clone() })?),
                None if split == Split::Test => None,
                None => return Err(DataError::MissingGaze { sequence: seq_id.clone(), frame: frame_id }),
            };
            records.push(Record {
                record_id: format!("{seq_id}/{frame_id}"),
                mask_path: find_mask(&masks, &frame_id),
                image_path: frame,
                gaze,
                user_id: seq_id.clone(),
                label: 0,
                split,
            });
        }
        users.push(seq_id);
    }
    Ok(())
}

/// Loads a sequence layout (`sequences/<seq>/*.png`, `labels/<seq>.txt`),
/// either directly under `root` (all train) or under `root/{train,validation,test}`.
/// Optional masks are read from `masks/<seq>/<frame>.{npy,png}`.
pub fn load_gaze_dataset(root: &Path) -> Result<DatasetManifest> {
    let mut users = Vec::new();
    let mut records = Vec::new();
    let partitioned = [Split::Train, Split::Validation, Split::Test].iter().any(|s| root.join(s.name()).is_dir());
    if partitioned {
        for split in [Split::Train, Split::Validation, Split::Test] {
            load_gaze_split(&root.join(split.name()), split, &mut users, &mut records)?;
        }
    } else {
        load_gaze_split(root, Split::Train, &mut users, &mut records)?;
    }
    if records.is_empty() {
        return Err(DataError::Empty(root.to_path_buf()));
    }
    users.sort();
    users.dedup();
    for r in &mut records {
        r.label = users.binary_search(&r.user_id).expect("user listed");
    }
    Ok(DatasetManifest { records, users })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_rule() {
        assert_eq!(test_count(10, 0.2), 2);
        assert_eq!(test_count(2, 0.2), 1);
        assert_eq!(test_count(5, 0.5), 3);
        assert_eq!(test_count(7, 0.2), 1);
        assert_eq!(test_count(8, 0.2), 2);
        assert_eq!(test_count(3, 0.9), 2);
    }

    #[test]
    fn splits_drop_singletons_and_are_deterministic() {
        let items = [("b", "b1"), ("a", "a1"), ("a", "a2"), ("b", "b2"), ("c", "c1"), ("a", "a3")];
        let (users, a) = assign_splits(items.iter().copied(), 0.2, 42).unwrap();
        assert_eq!(users, vec!["a", "b"]);
        assert!(a[4].is_none());
        assert_eq!(a[0].unwrap().0, 1);
        let tests = a.iter().flatten().filter(|(_, s)| *s == Split::Test).count();
        assert_eq!(tests, 2);
        let (_, b) = assign_splits(items.iter().copied(), 0.2, 42).unwrap();
        assert_eq!(a, b);
        assert!(matches!(assign_splits([("a", "1"), ("a", "2")], 0.2, 1), Err(DataError::TooFewUsers(1))));
        assert!(matches!(assign_splits(items.iter().copied(), 1.0, 1), Err(DataError::InvalidFraction(_))));
    }

    #[test]
    fn gaze_label_normalises() {
        let g = GazeLabel::new(3.0, 0.0, 4.0).unwrap();
        assert_eq!(g.vector(), [0.6, 0.0, 0.8]);
        assert!(GazeLabel::new(0.0, 0.0, 0.0).is_err());
        let v = GazeLabel::from_angles(0.3, -0.2).vector();
        assert!(((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaze_layout_with_partitions() {
        let dir = tempfile::tempdir().unwrap();
        let img = EyeImage::new(32, 32, vec![100; 1024], "s", "f").unwrap();
        for (split, seq) in [("train", "s01"), ("test", "s02")] {
            let base = dir.path().join(split);
            img.save_png(&base.join(format!("sequences/{seq}/000.png"))).unwrap();
            img.save_png(&base.join(format!("sequences/{seq}/001.png"))).unwrap();
            if split == "train" {
                std::fs::create_dir_all(base.join("labels")).unwrap();
                std::fs::write(base.join(format!("labels/{seq}.txt")), "000 0 0 2\n001 0.1 0.2 0.9\n").unwrap();
            }
        }
        let m = load_gaze_dataset(dir.path()).unwrap();
        assert_eq!(m.records.len(), 4);
        assert_eq!(m.users, vec!["s01", "s02"]);
        assert_eq!(m.records[0].gaze.unwrap().vector(), [0.0, 0.0, 1.0]);
        assert!(m.split(Split::Test).all(|r| r.gaze.is_none()));

        std::fs::write(dir.path().join("train/labels/s01.txt"), "000 0 0 1\n").unwrap();
        assert!(matches!(load_gaze_dataset(dir.path()), Err(DataError::MissingGaze { .. })));
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_gaze_dataset(empty.path()), Err(DataError::Empty(_))));
    }
}
