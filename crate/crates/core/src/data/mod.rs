//! Manifests, dataset assembly and image preprocessing.

pub mod covidx;
pub mod image;
pub mod synth;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use self::covidx::{apply_config, build_covidx, CovidxTargets, DatasetConfig, DatasetMode};
pub use self::image::{
    apply_recipe, augment, decode, load_entry, load_image, normalize, resize, AugRecipe, AugSpec, Image, RawImage,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Pneumonia,
    #[serde(rename = "COVID19")]
    Covid19,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Normal, Label::Pneumonia, Label::Covid19];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "Normal",
            Label::Pneumonia => "Pneumonia",
            Label::Covid19 => "COVID19",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Manifest(format!("unknown label `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "RSNA")]
    Rsna,
    #[serde(rename = "COVIDCollection")]
    CovidCollection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(rename = "path")]
    pub image_path: String,
    pub label: Label,
    pub source: Source,
    pub partition: Partition,
    /// Empty for originals; a transform recipe for augmented copies, whose
    /// `image_path` is the original they derive from.
    #[serde(with = "recipe_field")]
    pub aug_recipe: Option<AugRecipe>,
}

impl ManifestEntry {
    pub fn new(path: impl Into<String>, label: Label, source: Source, partition: Partition) -> Self {
        Self {
            image_path: path.into(),
            label,
            source,
            partition,
            aug_recipe: None,
        }
    }

    pub fn is_augmented(&self) -> bool {
        self.aug_recipe.is_some()
    }
}

mod recipe_field {
    use super::AugRecipe;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<AugRecipe>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(r) => s.serialize_str(&r.to_string()),
            None => s.serialize_str(""),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<AugRecipe>, D::Error> {
        let s = String::deserialize(d)?;
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(serde::de::Error::custom)
        }
    }
}

/// Ordered list of entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter()
    }

    /// `(Normal, Pneumonia, COVID19)` counts.
    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for e in &self.entries {
            c[e.label as usize] += 1;
        }
        c
    }

    pub fn partition(&self, p: Partition) -> Manifest {
        Manifest::new(self.entries.iter().filter(|e| e.partition == p).cloned().collect())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.entries.is_empty() {
            w.write_record(["path", "label", "source", "partition", "aug_recipe"])?;
        }
        for e in &self.entries {
            w.serialize(e)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Manifest(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["path", "label", "source", "partition", "aug_recipe"] {
            return Err(Error::Manifest(format!(
                "expected header `path,label,source,partition,aug_recipe`, found `{}`",
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let entries = r
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        Ok(Self { entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Root,
    Leaf,
}

/// Root: COVID19 folds into Pneumonia. Leaf: Normal is dropped.
pub fn hierarchical_relabel(manifest: &Manifest, level: Level) -> Manifest {
    let entries = manifest
        .entries
        .iter()
        .filter_map(|e| match (level, e.label) {
            (Level::Root, Label::Covid19) => Some(ManifestEntry {
                label: Label::Pneumonia,
                ..e.clone()
            }),
            (Level::Leaf, Label::Normal) => None,
            _ => Some(e.clone()),
        })
        .collect();
    Manifest::new(entries)
}

/// Mapping between labels and class indices for a classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSpace {
    /// Normal 0, Pneumonia 1, COVID19 2.
    Flat,
    /// Normal 0, Pneumonia (incl. COVID19) 1.
    Root,
    /// Pneumonia 0, COVID19 1; Normal has no index.
    Leaf,
}

impl LabelSpace {
    pub fn num_classes(self) -> usize {
        match self {
            LabelSpace::Flat => 3,
            LabelSpace::Root | LabelSpace::Leaf => 2,
        }
    }

    pub fn index(self, label: Label) -> Option<usize> {
        match (self, label) {
            (LabelSpace::Flat, l) => Some(l as usize),
            (LabelSpace::Root, Label::Normal) => Some(0),
            (LabelSpace::Root, _) => Some(1),
            (LabelSpace::Leaf, Label::Normal) => None,
            (LabelSpace::Leaf, Label::Pneumonia) => Some(0),
            (LabelSpace::Leaf, Label::Covid19) => Some(1),
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            LabelSpace::Flat => &["Normal", "Pneumonia", "COVID19"],
            LabelSpace::Root => &["Normal", "Pneumonia"],
            LabelSpace::Leaf => &["Pneumonia", "COVID19"],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_size_train() -> Manifest {
        let mut v = Vec::new();
        for (label, n) in Label::ALL.into_iter().zip([7966, 5421, 152]) {
            let src = if label == Label::Covid19 {
                Source::CovidCollection
            } else {
                Source::Rsna
            };
            for i in 0..n {
                v.push(ManifestEntry::new(
                    format!("{label}/{i}.png"),
                    label,
                    src,
                    Partition::Train,
                ));
            }
        }
        Manifest::new(v)
    }

    #[test]
    fn relabel_counts() {
        let m = full_size_train();
        assert_eq!(hierarchical_relabel(&m, Level::Root).counts(), [7966, 5573, 0]);
        assert_eq!(hierarchical_relabel(&m, Level::Leaf).counts(), [0, 5421, 152]);
        let empty = Manifest::default();
        assert!(hierarchical_relabel(&empty, Level::Root).is_empty());
        assert!(hierarchical_relabel(&empty, Level::Leaf).is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let mut m = full_size_train();
        m.entries.truncate(3);
        m.entries[1].aug_recipe = Some(AugRecipe {
            rotation_deg: -3.5,
            zoom: 1.125,
            flip: true,
        });
        let text = m.to_csv_string().unwrap();
        assert!(text.starts_with("path,label,source,partition,aug_recipe\n"));
        assert!(text.contains("Normal/0.png,Normal,RSNA,train,\n"));
        assert_eq!(Manifest::from_csv_str(&text).unwrap(), m);
        let empty = Manifest::default().to_csv_string().unwrap();
        assert_eq!(Manifest::from_csv_str(&empty).unwrap(), Manifest::default());
    }

    #[test]
    fn bad_header_rejected() {
        assert!(Manifest::from_csv_str("file,label\nx,Normal\n").is_err());
        assert!(Manifest::from_csv_str("path,label,source,partition,aug_recipe\nx,Cat,RSNA,train,\n").is_err());
    }

    #[test]
    fn label_spaces() {
        assert_eq!(LabelSpace::Root.index(Label::Covid19), Some(1));
        assert_eq!(LabelSpace::Leaf.index(Label::Normal), None);
        assert_eq!(LabelSpace::Flat.index(Label::Covid19), Some(2));
    }
}
