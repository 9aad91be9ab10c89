//! On-disk dataset layout.
//!
//! ```text
//! <root>/labels.json                 { "<building_id>": <year> | null, … }
//! <root>/splits.json                 { "train": [ids…], "validation": [ids…], "test": [ids…] }
//! <root>/<split>/<building_id>/<year>.png   8-bit RGB
//! ```
//!
//! [`load_flat_dataset`] adapts a flat per-building layout with a CSV of
//! labels, for externally collected imagery; see its docs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::Image;
use super::preprocess::{preprocess, IMAGE_SIZE};
use super::{DatasetSplit, ImageSequence, ReroofLabel};
use crate::error::{Error, Result};
use crate::exec;

pub const LABELS_FILE: &str = "labels.json";
pub const SPLITS_FILE: &str = "splits.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Validation, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SplitName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown split `{s}`")))
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, ReroofLabel>> {
    read_json(path)
}

pub fn write_labels(path: &Path, labels: &BTreeMap<String, ReroofLabel>) -> Result<()> {
    write_json(path, labels)
}

pub fn read_splits(path: &Path) -> Result<BTreeMap<SplitName, Vec<String>>> {
    read_json(path)
}

/// Writes `split` under `root` in the layout above, creating directories.
pub fn write_dataset(root: &Path, split: &DatasetSplit) -> Result<()> {
    split.validate()?;
    fs::create_dir_all(root).map_err(Error::io(root))?;
    let mut labels = BTreeMap::new();
    let mut splits = BTreeMap::new();
    for name in SplitName::ALL {
        let seqs = split.get(name);
        splits.insert(name, seqs.iter().map(|s| s.building_id.clone()).collect::<Vec<_>>());
        exec::try_map(seqs, |seq| {
            let dir = root.join(name.as_str()).join(&seq.building_id);
            fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
            for (year, img) in seq.years.iter().zip(&seq.images) {
                img.write_png(&dir.join(format!("{year}.png")))?;
            }
            Ok::<_, Error>(())
        })?;
        for seq in seqs {
            labels.insert(seq.building_id.clone(), seq.label);
        }
    }
    write_labels(&root.join(LABELS_FILE), &labels)?;
    write_json(&root.join(SPLITS_FILE), &splits)
}

/// Year images found in one building directory, sorted by year.
fn year_images(dir: &Path, extensions: &[&str]) -> Result<Vec<(i32, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| {
        Error::Dataset(format!("cannot read building directory {}: {e}", dir.display()))
    })?;
    let mut found = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(Error::io(dir))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| extensions.contains(&e.as_str())) {
            continue;
        }
        let Some(year) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<i32>().ok())
        else {
            continue;
        };
        if found.insert(year, path.clone()).is_some() {
            return Err(Error::Dataset(format!("{}: more than one image for {year}", dir.display())));
        }
    }
    Ok(found.into_iter().collect())
}

fn load_image(path: &Path) -> Result<Image> {
    let raw = Image::read(path)?;
    if raw.height() == IMAGE_SIZE && raw.width() == IMAGE_SIZE {
        Ok(raw)
    } else {
        preprocess(&raw, None)
    }
}

struct Pending {
    split: SplitName,
    id: String,
    dir: PathBuf,
    label: ReroofLabel,
}

fn load_buildings(pending: Vec<Pending>, extensions: &[&str]) -> Result<DatasetSplit> {
    let listed = exec::try_map(&pending, |p| year_images(&p.dir, extensions))?;
    let all_years: BTreeSet<i32> = listed.iter().flatten().map(|(y, _)| *y).collect();
    let (Some(&first), Some(&last)) = (all_years.first(), all_years.last()) else {
        return Ok(DatasetSplit::default());
    };
    for (p, files) in pending.iter().zip(&listed) {
        if files.is_empty() {
            return Err(Error::Dataset(format!("{}: no year images in {}", p.id, p.dir.display())));
        }
        for year in first..=last {
            if !files.iter().any(|(y, _)| *y == year) {
                return Err(Error::Dataset(format!("{}: missing image for {year}", p.id)));
            }
        }
        p.label
            .check_observable(first, last)
            .map_err(|e| Error::Dataset(format!("{}: {e}", p.id)))?;
    }

    let jobs: Vec<(&Pending, &Vec<(i32, PathBuf)>)> = pending.iter().zip(&listed).collect();
    let sequences = exec::try_map(&jobs, |(p, files)| {
        let images = files.iter().map(|(_, path)| load_image(path)).collect::<Result<Vec<_>>>()?;
        let years = files.iter().map(|(y, _)| *y).collect();
        ImageSequence::new(p.id.clone(), years, images, p.label)
    })?;
    let mut split = DatasetSplit::default();
    for (p, seq) in pending.iter().zip(sequences) {
        split.get_mut(p.split).push(seq);
    }
    split.validate()?;
    Ok(split)
}

fn check_ids(splits: &BTreeMap<SplitName, Vec<String>>, labels: &BTreeMap<String, ReroofLabel>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in splits.values().flatten() {
        if !seen.insert(id.as_str()) {
            return Err(Error::Dataset(format!("duplicate building id `{id}`")));
        }
        if !labels.contains_key(id) {
            return Err(Error::Dataset(format!("building `{id}` has no label")));
        }
    }
    if let Some(extra) = labels.keys().find(|id| !seen.contains(id.as_str())) {
        return Err(Error::Dataset(format!("label for `{extra}` which is in no split")));
    }
    Ok(())
}

/// Loads and validates a dataset written in the standard layout.
///
/// Every building must have an image for every year in the dataset-wide year
/// span. Images that are not 64×64 are centre-cropped and resized.
pub fn load_dataset(root: &Path) -> Result<DatasetSplit> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} does not exist", root.display())));
    }
    let labels = read_labels(&root.join(LABELS_FILE))?;
    let splits = read_splits(&root.join(SPLITS_FILE))?;
    check_ids(&splits, &labels)?;
    let pending = splits
        .iter()
        .flat_map(|(name, ids)| {
            ids.iter().map(|id| Pending {
                split: *name,
                id: id.clone(),
                dir: root.join(name.as_str()).join(id),
                label: labels[id],
            })
        })
        .collect();
    load_buildings(pending, &["png"])
}

/// Adapter for a flat layout without split directories:
///
/// ```text
/// <root>/labels.csv                  building_id,reroof_year   (year or empty)
/// <root>/<building_id>/<year>.(png|jpg|jpeg)
/// <root>/splits.json                 optional, same schema as the standard layout
/// ```
///
/// Without `splits.json`, buildings sorted by id are assigned to train,
/// validation and test in 150 : 25 : 55 proportion.
pub fn load_flat_dataset(root: &Path) -> Result<DatasetSplit> {
    let csv_path = root.join("labels.csv");
    let text = fs::read_to_string(&csv_path).map_err(Error::io(&csv_path))?;
    let mut labels = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, year) = line
            .split_once(',')
            .ok_or_else(|| Error::Dataset(format!("labels.csv line {}: expected two columns", i + 1)))?;
        let year = year.trim();
        let label = if year.is_empty() || year.eq_ignore_ascii_case("none") || year.eq_ignore_ascii_case("null") {
            ReroofLabel::NoReroof
        } else {
            ReroofLabel::ReroofYear(year.parse().map_err(|_| {
                Error::Dataset(format!("labels.csv line {}: bad year `{year}`", i + 1))
            })?)
        };
        if labels.insert(id.trim().to_string(), label).is_some() {
            return Err(Error::Dataset(format!("duplicate building id `{}`", id.trim())));
        }
    }
    let splits_path = root.join(SPLITS_FILE);
    let splits = if splits_path.exists() {
        read_splits(&splits_path)?
    } else {
        let ids: Vec<String> = labels.keys().cloned().collect();
        let n = ids.len();
        let val = (n as f64 * 25.0 / 230.0).round() as usize;
        let test = ((n as f64 * 55.0 / 230.0).round() as usize).min(n - val);
        let train = n - val - test;
        BTreeMap::from([
            (SplitName::Train, ids[..train].to_vec()),
            (SplitName::Validation, ids[train..train + val].to_vec()),
            (SplitName::Test, ids[train + val..].to_vec()),
        ])
    };
    check_ids(&splits, &labels)?;
    let pending = splits
        .iter()
        .flat_map(|(name, ids)| {
            ids.iter().map(|id| Pending {
                split: *name,
                id: id.clone(),
                dir: root.join(id),
                label: labels[id],
            })
        })
        .collect();
    load_buildings(pending, &["png", "jpg", "jpeg"])
}
