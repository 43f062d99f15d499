//! JSONL manifests, seeded split construction and batching.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::load_preprocessed;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestNormal,
    TestAnomaly,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestNormal, Split::TestAnomaly];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestNormal => "test_normal",
            Split::TestAnomaly => "test_anomaly",
        }
    }

    /// Comma-separated split names; `test` means both test splits.
    pub fn parse_list(list: &str) -> Result<Vec<Split>> {
        let mut out = Vec::new();
        for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part == "test" {
                out.extend([Split::TestNormal, Split::TestAnomaly]);
            } else {
                out.push(part.parse()?);
            }
        }
        out.sort();
        out.dedup();
        if out.is_empty() {
            return Err(Error::arg("no splits given"));
        }
        Ok(out)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::arg(format!(
                    "unknown split {s:?}; valid: train, val, test_normal, test_anomaly, test"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub path: String,
    pub label: String,
    pub split: Split,
}

/// Records plus the directory relative paths are resolved against.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>, root: impl Into<PathBuf>) -> Self {
        Self {
            records,
            root: root.into(),
        }
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::Manifest(format!("line {}: {e}", i + 1)))?;
            if rec.label.is_empty() {
                return Err(Error::Manifest(format!("line {}: empty label", i + 1)));
            }
            records.push(rec);
        }
        Ok(Self::new(records, root))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let mut text = String::new();
        for line in BufReader::new(file).lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn resolve(&self, rec: &ManifestRecord) -> PathBuf {
        self.root.join(&rec.path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Check that train/val hold only `normal_label`, paths are unique and
    /// every file exists.
    pub fn validate(&self, normal_label: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for rec in &self.records {
            if !seen.insert(&rec.path) {
                return Err(Error::Manifest(format!("{} appears more than once", rec.path)));
            }
            if matches!(rec.split, Split::Train | Split::Val | Split::TestNormal)
                && rec.label != normal_label
            {
                return Err(Error::Manifest(format!(
                    "{} has label {:?} in split {} (only {normal_label:?} allowed)",
                    rec.path, rec.label, rec.split
                )));
            }
            if rec.split == Split::TestAnomaly && rec.label == normal_label {
                return Err(Error::Manifest(format!(
                    "{} is labeled normal but placed in test_anomaly",
                    rec.path
                )));
            }
            if !self.resolve(rec).is_file() {
                return Err(Error::Ingestion {
                    path: self.resolve(rec),
                    msg: "file not found".into(),
                });
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> BTreeMap<&str, &str> {
        self.records
            .iter()
            .map(|r| (r.path.as_str(), r.label.as_str()))
            .collect()
    }
}

/// Requested split sizes. `test_normal` images are taken out of the `val`
/// pool, so the final val split holds `val − test_normal` images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test_normal: usize,
    pub test_anomaly_per_class: usize,
}

/// Seeded protocol: shuffle the normal class, take `train` then a val pool
/// of `val` images from which `test_normal` are held out; draw
/// `test_anomaly_per_class` images from every other label. Records not
/// selected are dropped. Input order does not matter.
pub fn make_splits(
    manifest: &DatasetManifest,
    normal_label: &str,
    seed: u64,
    counts: SplitCounts,
) -> Result<DatasetManifest> {
    if counts.test_normal > counts.val {
        return Err(Error::arg(format!(
            "test_normal ({}) is drawn from val and cannot exceed it ({})",
            counts.test_normal, counts.val
        )));
    }
    let mut by_class: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for rec in &manifest.records {
        by_class.entry(&rec.label).or_default().push(&rec.path);
    }
    for paths in by_class.values_mut() {
        paths.sort_unstable();
        paths.dedup();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normals = by_class.remove(normal_label).unwrap_or_default();
    let need = counts.train + counts.val;
    if normals.len() < need {
        return Err(Error::Split {
            class: normal_label.to_string(),
            available: normals.len(),
            requested: need,
        });
    }
    normals.shuffle(&mut rng);
    let rec = |path: &str, label: &str, split| ManifestRecord {
        path: path.to_string(),
        label: label.to_string(),
        split,
    };
    let mut records = Vec::new();
    let (train, rest) = normals.split_at(counts.train);
    let (test_normal, val) = rest[..counts.val].split_at(counts.test_normal);
    records.extend(train.iter().map(|p| rec(p, normal_label, Split::Train)));
    records.extend(val.iter().map(|p| rec(p, normal_label, Split::Val)));
    records.extend(test_normal.iter().map(|p| rec(p, normal_label, Split::TestNormal)));
    for (label, mut paths) in by_class {
        if paths.len() < counts.test_anomaly_per_class {
            return Err(Error::Split {
                class: label.to_string(),
                available: paths.len(),
                requested: counts.test_anomaly_per_class,
            });
        }
        paths.shuffle(&mut rng);
        records.extend(
            paths[..counts.test_anomaly_per_class]
                .iter()
                .map(|p| rec(p, label, Split::TestAnomaly)),
        );
    }
    Ok(DatasetManifest::new(records, manifest.root.clone()))
}

/// A preprocessed image: `pixels` is `[C, H, W]` in `[−1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord<T> {
    pub id: String,
    pub pixels: Tensor<T>,
    pub label: String,
}

/// Load and preprocess every record in `splits`, in manifest order. The
/// image id is the manifest path.
pub fn load_records<T: Real>(
    manifest: &DatasetManifest,
    splits: &[Split],
    image_size: usize,
    channels: usize,
) -> Result<Vec<ImageRecord<T>>> {
    manifest
        .records
        .iter()
        .filter(|r| splits.contains(&r.split))
        .map(|r| {
            let img = load_preprocessed(&manifest.resolve(r), image_size, channels)?;
            Ok(ImageRecord {
                id: r.path.clone(),
                pixels: img.to_tensor(),
                label: r.label.clone(),
            })
        })
        .collect()
}

/// Index batches for one epoch: a permutation seeded by `(seed, epoch)`, cut
/// into chunks of `batch_size` with the partial batch last.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::arg("cannot batch an empty split"));
    }
    if batch_size == 0 {
        return Err(Error::arg("batch size must be at least 1"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    idx.shuffle(&mut rng);
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stack the selected records into `[B, C, H, W]`.
pub fn stack_batch<T: Real>(records: &[ImageRecord<T>], indices: &[usize]) -> Result<Tensor<T>> {
    let items: Vec<&Tensor<T>> = indices.iter().map(|i| &records[*i].pixels).collect();
    Tensor::stack(&items)
}

/// Shuffled batches over `records` for one epoch.
pub fn batch_iter<T: Real>(
    records: &[ImageRecord<T>],
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Tensor<T>> + '_> {
    let order = batch_order(records.len(), batch_size, shuffle_seed, epoch)?;
    Ok(order
        .into_iter()
        .map(move |idx| stack_batch(records, &idx).expect("records share one shape")))
}
