//! Dataset layouts, file-name conventions and the split manifest.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::{io_err, write_atomic, PipelineError};
use crate::evalkit::{Split, DISTRACTOR_ID, JUNK_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Market1501,
    Cuhk03Np,
}

impl std::str::FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "market1501" | "market-1501" | "market" => Ok(DatasetKind::Market1501),
            "cuhk03np" | "cuhk03-np" | "cuhk03" => Ok(DatasetKind::Cuhk03Np),
            other => Err(format!("unknown dataset {other:?}")),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::Market1501 => "market1501",
            DatasetKind::Cuhk03Np => "cuhk03np",
        })
    }
}

/// Published split sizes: (images, identities) for train, query, gallery.
struct Expected {
    train: (usize, usize),
    query: (usize, usize),
    gallery: (usize, usize),
}

impl DatasetKind {
    fn expected(self) -> Expected {
        match self {
            DatasetKind::Market1501 => Expected {
                train: (12_936, 751),
                query: (3_368, 750),
                gallery: (19_732, 750),
            },
            DatasetKind::Cuhk03Np => Expected {
                train: (7_365, 767),
                query: (1_400, 700),
                gallery: (5_332, 700),
            },
        }
    }
}

const SPLIT_DIRS: [(&str, Split); 3] = [
    ("bounding_box_train", Split::Train),
    ("query", Split::Query),
    ("bounding_box_test", Split::Gallery),
];

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

/// One image of the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonSample {
    pub path: PathBuf,
    /// Raw dataset identity; −1 marks junk and 0 distractors.
    pub identity: i64,
    pub camera: i64,
    pub split: Split,
    pub image_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    pub images: usize,
    /// Distinct identities excluding junk and distractors.
    pub identities: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset: DatasetKind,
    pub root: PathBuf,
    /// Number of training identities.
    pub num_identities: usize,
    pub train: SplitCounts,
    pub query: SplitCounts,
    pub gallery: SplitCounts,
    pub graph_store: Option<PathBuf>,
    pub feature_store: Option<PathBuf>,
    pub samples: Vec<PersonSample>,
}

fn split_name(name: &str) -> Option<(&str, &str)> {
    let (stem, ext) = name.rsplit_once('.')?;
    IMAGE_EXTENSIONS
        .iter()
        .any(|e| e.eq_ignore_ascii_case(ext))
        .then_some((stem, ext))
}

fn parse_camera(field: &str, allow_bare: bool) -> Option<i64> {
    let rest = field.strip_prefix('c')?;
    let digits_end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
    let (cam, tail) = rest.split_at(digits_end);
    if cam.is_empty() {
        return None;
    }
    let valid_tail = if allow_bare && tail.is_empty() {
        true
    } else {
        tail.strip_prefix('s').is_some_and(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()))
    };
    valid_tail.then(|| cam.parse().ok()).flatten()
}

fn parse_identity(field: &str) -> Option<i64> {
    let digits = field.strip_prefix('-').unwrap_or(field);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    field.parse().ok()
}

/// Parses `<pid>_c<cam>s<seq>_<frame>_<box>.jpg` into `(identity, camera)`.
pub fn parse_market_filename(name: &str) -> Result<(i64, i64), PipelineError> {
    let bad = || PipelineError::FilenameFormat(name.to_string());
    let (stem, _) = split_name(name).ok_or_else(bad)?;
    let fields: Vec<&str> = stem.split('_').collect();
    if fields.len() != 4 || !fields[2..].iter().all(|f| !f.is_empty() && f.bytes().all(|b| b.is_ascii_digit())) {
        return Err(bad());
    }
    let identity = parse_identity(fields[0]).ok_or_else(bad)?;
    let camera = parse_camera(fields[1], false).ok_or_else(bad)?;
    Ok((identity, camera))
}

/// CUHK03-np releases use `<pid>_c<cam>_<index>` as well as the Market
/// convention; both are accepted.
pub fn parse_cuhk03_filename(name: &str) -> Result<(i64, i64), PipelineError> {
    if let Ok(parsed) = parse_market_filename(name) {
        return Ok(parsed);
    }
    let bad = || PipelineError::FilenameFormat(name.to_string());
    let (stem, _) = split_name(name).ok_or_else(bad)?;
    let mut fields = stem.split('_');
    let identity = fields.next().and_then(parse_identity).ok_or_else(bad)?;
    let camera = fields.next().and_then(|f| parse_camera(f, true)).ok_or_else(bad)?;
    if fields.next().is_none_or(|f| f.is_empty()) {
        return Err(bad());
    }
    Ok((identity, camera))
}

fn resolve_root(root: &Path, kind: DatasetKind) -> PathBuf {
    if kind == DatasetKind::Cuhk03Np && !root.join(SPLIT_DIRS[0].0).is_dir() && root.join("detected").is_dir() {
        info!("using the detected subset under {}", root.display());
        return root.join("detected");
    }
    root.to_path_buf()
}

fn is_identity(id: i64) -> bool {
    id != JUNK_ID && id != DISTRACTOR_ID
}

fn counts(samples: &[PersonSample], split: Split) -> SplitCounts {
    let in_split: Vec<&PersonSample> = samples.iter().filter(|s| s.split == split).collect();
    let ids: BTreeSet<i64> = in_split.iter().map(|s| s.identity).filter(|&id| is_identity(id)).collect();
    SplitCounts {
        images: in_split.len(),
        identities: ids.len(),
    }
}

fn warn_on_mismatch(kind: DatasetKind, name: &str, got: SplitCounts, expected: (usize, usize)) {
    if (got.images, got.identities) != expected {
        warn!(
            "{kind} {name}: {} images / {} identities (published split: {} / {})",
            got.images, got.identities, expected.0, expected.1
        );
    }
}

/// Reads the three split directories under `root`.
///
/// Fails on a missing directory, an unparseable file name, a duplicate image
/// id, train/test identity overlap, or a query identity absent from the
/// gallery. Deviations from the published split sizes only warn.
pub fn ingest(root: &Path, kind: DatasetKind) -> Result<DatasetManifest, PipelineError> {
    let root = resolve_root(root, kind);
    let parse = match kind {
        DatasetKind::Market1501 => parse_market_filename,
        DatasetKind::Cuhk03Np => parse_cuhk03_filename,
    };
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (dir_name, split) in SPLIT_DIRS {
        let dir = root.join(dir_name);
        if !dir.is_dir() {
            return Err(PipelineError::MissingDirectory(dir));
        }
        let mut names = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.path().is_file() && split_name(&name).is_some() {
                names.push(name);
            }
        }
        names.sort();
        for name in names {
            let (identity, camera) = parse(&name)?;
            let image_id = split_name(&name).expect("filtered on extension").0.to_string();
            if !seen.insert(image_id.clone()) {
                return Err(PipelineError::DuplicateImageId(image_id));
            }
            samples.push(PersonSample {
                path: dir.join(&name),
                identity,
                camera,
                split,
                image_id,
            });
        }
    }
    DatasetManifest::from_samples(kind, root, samples)
}

impl DatasetManifest {
    /// Builds and validates a manifest.
    pub fn from_samples(kind: DatasetKind, root: PathBuf, samples: Vec<PersonSample>) -> Result<Self, PipelineError> {
        let ids_of = |split: Split| -> BTreeSet<i64> {
            samples
                .iter()
                .filter(|s| s.split == split && is_identity(s.identity))
                .map(|s| s.identity)
                .collect()
        };
        let (train_ids, query_ids, gallery_ids) = (ids_of(Split::Train), ids_of(Split::Query), ids_of(Split::Gallery));
        let overlap: Vec<i64> = train_ids
            .iter()
            .copied()
            .filter(|id| query_ids.contains(id) || gallery_ids.contains(id))
            .collect();
        if !overlap.is_empty() {
            return Err(PipelineError::IdentityOverlap(overlap));
        }
        let uncovered: Vec<i64> = query_ids.difference(&gallery_ids).copied().collect();
        if !uncovered.is_empty() {
            return Err(PipelineError::QueryNotInGallery(uncovered));
        }
        let manifest = Self {
            dataset: kind,
            root,
            num_identities: train_ids.len(),
            train: counts(&samples, Split::Train),
            query: counts(&samples, Split::Query),
            gallery: counts(&samples, Split::Gallery),
            graph_store: None,
            feature_store: None,
            samples,
        };
        let expected = kind.expected();
        warn_on_mismatch(kind, "train", manifest.train, expected.train);
        warn_on_mismatch(kind, "query", manifest.query, expected.query);
        warn_on_mismatch(kind, "gallery", manifest.gallery, expected.gallery);
        Ok(manifest)
    }

    pub fn samples_in(&self, split: Split) -> impl Iterator<Item = &PersonSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Sorted training identities; position is the dense class label.
    pub fn class_ids(&self) -> Vec<i64> {
        let ids: BTreeSet<i64> = self
            .samples_in(Split::Train)
            .map(|s| s.identity)
            .filter(|&id| is_identity(id))
            .collect();
        ids.into_iter().collect()
    }

    /// Raw identity to dense label.
    pub fn label_map(&self) -> BTreeMap<i64, usize> {
        self.class_ids().into_iter().enumerate().map(|(i, id)| (id, i)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Store(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn market_names() {
        assert_eq!(parse_market_filename("0473_c4s2_050698_00.jpg").unwrap(), (473, 4));
        assert_eq!(parse_market_filename("-1_c1s1_000000_00.jpg").unwrap(), (-1, 1));
        assert_eq!(parse_market_filename("0000_c6s3_094992_01.jpg").unwrap(), (0, 6));
        for bad in ["garbage.jpg", "0473_c4_050698_00.jpg", "0473_c4s2_050698.jpg", "0473_c4s2_050698_00.txt", "x_c1s1_0_0.jpg"] {
            assert!(matches!(parse_market_filename(bad), Err(PipelineError::FilenameFormat(_))), "{bad}");
        }
    }

    #[test]
    fn cuhk03_names() {
        assert_eq!(parse_cuhk03_filename("0001_c1_1.png").unwrap(), (1, 1));
        assert_eq!(parse_cuhk03_filename("0012_c2s1_000123_00.jpg").unwrap(), (12, 2));
        assert!(parse_cuhk03_filename("0001_c1.png").is_err());
    }
}
