//! Rooftop image sequences: types, on-disk layout, preprocessing,
//! augmentation, and the synthetic generator.

mod augment;
mod dataset;
mod image;
mod preprocess;
mod synth;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

pub use self::augment::{adjust_brightness, adjust_contrast, adjust_saturation, augment, AugmentConfig};
pub use self::dataset::{
    load_dataset, load_flat_dataset, read_labels, read_splits, write_dataset, write_labels,
    SplitName, LABELS_FILE, SPLITS_FILE,
};
pub use self::image::Image;
pub use self::preprocess::{preprocess, resize_bilinear, CropSpec, IMAGE_SIZE};
pub use self::synth::{generate_synthetic, Material, SynthConfig};
use crate::error::{Error, Result};

/// Ground truth (or prediction) for one building.
///
/// Serialized as an integer year or `null`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "Option<i32>", into = "Option<i32>")]
pub enum ReroofLabel {
    NoReroof,
    ReroofYear(i32),
}

impl From<Option<i32>> for ReroofLabel {
    fn from(v: Option<i32>) -> Self {
        v.map_or(ReroofLabel::NoReroof, ReroofLabel::ReroofYear)
    }
}

impl From<ReroofLabel> for Option<i32> {
    fn from(l: ReroofLabel) -> Self {
        l.year()
    }
}

impl ReroofLabel {
    pub fn year(self) -> Option<i32> {
        match self {
            ReroofLabel::NoReroof => None,
            ReroofLabel::ReroofYear(y) => Some(y),
        }
    }

    pub fn is_reroof(self) -> bool {
        matches!(self, ReroofLabel::ReroofYear(_))
    }

    /// A transition is only observable between two consecutive images, so
    /// the year must lie in `(first_year, last_year]`.
    pub fn check_observable(self, first_year: i32, last_year: i32) -> Result<()> {
        match self {
            ReroofLabel::ReroofYear(y) if y <= first_year || y > last_year => Err(Error::Dataset(format!(
                "reroof year {y} is not observable in ({first_year}, {last_year}]"
            ))),
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for ReroofLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReroofLabel::NoReroof => f.write_str("none"),
            ReroofLabel::ReroofYear(y) => write!(f, "{y}"),
        }
    }
}

/// One building: yearly images in ascending year order plus its label.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSequence {
    pub building_id: String,
    pub years: Vec<i32>,
    pub images: Vec<Image>,
    pub label: ReroofLabel,
}

impl ImageSequence {
    pub fn new(building_id: String, years: Vec<i32>, images: Vec<Image>, label: ReroofLabel) -> Result<Self> {
        let seq = ImageSequence {
            building_id,
            years,
            images,
            label,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.building_id;
        if id.is_empty() || id.contains(['/', '\\']) || id.contains(char::is_whitespace) {
            return Err(Error::Dataset(format!("invalid building id `{id}`")));
        }
        if self.years.is_empty() {
            return Err(Error::Dataset(format!("{id}: no images")));
        }
        if self.years.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Dataset(format!("{id}: years {:?} are not strictly increasing", self.years)));
        }
        if self.years.len() != self.images.len() {
            return Err(Error::Dataset(format!(
                "{id}: {} years but {} images",
                self.years.len(),
                self.images.len()
            )));
        }
        self.label
            .check_observable(self.first_year(), self.last_year())
            .map_err(|e| Error::Dataset(format!("{id}: {e}")))
    }

    pub fn first_year(&self) -> i32 {
        self.years[0]
    }

    pub fn last_year(&self) -> i32 {
        *self.years.last().expect("validated non-empty")
    }

    pub fn len(&self) -> usize {
        self.years.len()
    }

    pub fn is_empty(&self) -> bool {
        self.years.is_empty()
    }
}

/// Train / validation / test partition with disjoint building ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ImageSequence>,
    pub validation: Vec<ImageSequence>,
    pub test: Vec<ImageSequence>,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for seq in self.iter() {
            seq.validate()?;
            if !seen.insert(seq.building_id.as_str()) {
                return Err(Error::Dataset(format!("duplicate building id `{}`", seq.building_id)));
            }
        }
        Ok(())
    }

    pub fn get(&self, split: SplitName) -> &[ImageSequence] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }

    pub fn get_mut(&mut self, split: SplitName) -> &mut Vec<ImageSequence> {
        match split {
            SplitName::Train => &mut self.train,
            SplitName::Validation => &mut self.validation,
            SplitName::Test => &mut self.test,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &ImageSequence> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(id: &str, years: &[i32], label: ReroofLabel) -> Result<ImageSequence> {
        let images = years.iter().map(|_| Image::filled(4, 4, [0.5; 3])).collect();
        ImageSequence::new(id.into(), years.to_vec(), images, label)
    }

    #[test]
    fn label_must_be_observable() {
        let years: Vec<i32> = (2012..=2018).collect();
        assert!(seq("a", &years, ReroofLabel::ReroofYear(2012)).is_err());
        assert!(seq("a", &years, ReroofLabel::ReroofYear(2013)).is_ok());
        assert!(seq("a", &years, ReroofLabel::ReroofYear(2018)).is_ok());
        assert!(seq("a", &years, ReroofLabel::ReroofYear(2019)).is_err());
        assert!(seq("a", &years, ReroofLabel::NoReroof).is_ok());
    }

    #[test]
    fn years_must_increase() {
        assert!(seq("a", &[2012, 2012], ReroofLabel::NoReroof).is_err());
        assert!(seq("a", &[2013, 2012], ReroofLabel::NoReroof).is_err());
    }

    #[test]
    fn split_rejects_shared_ids() {
        let s = DatasetSplit {
            train: vec![seq("x", &[2012, 2013], ReroofLabel::NoReroof).unwrap()],
            validation: vec![],
            test: vec![seq("x", &[2012, 2013], ReroofLabel::NoReroof).unwrap()],
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn label_serializes_as_year_or_null() {
        assert_eq!(serde_json::to_string(&ReroofLabel::ReroofYear(2015)).unwrap(), "2015");
        assert_eq!(serde_json::to_string(&ReroofLabel::NoReroof).unwrap(), "null");
        let l: ReroofLabel = serde_json::from_str("null").unwrap();
        assert_eq!(l, ReroofLabel::NoReroof);
    }
}
