//! Manifest ingestion, label derivation and deterministic splits.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Columns every manifest must carry.
pub const REQUIRED_COLUMNS: [&str; 4] = ["id", "relative_path", "species", "confidence"];
/// Optional annotator column with the clear / damaged judgement.
pub const CATEGORY_COLUMN: &str = "category";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest is missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row_id}: unknown species `{value}`")]
    UnknownSpeciesValue { row_id: String, value: String },
    #[error("row {row_id}: unknown confidence `{value}`")]
    UnknownConfidenceValue { row_id: String, value: String },
    #[error("row {row_id}: unknown category `{value}`")]
    UnknownCategoryValue { row_id: String, value: String },
    #[error("unreadable images for rows {}", row_ids.join(", "))]
    UnreadableImage { row_ids: Vec<String> },
    #[error("duplicate {field} `{value}`")]
    DuplicateId { field: &'static str, value: String },
    #[error("image root {0} does not exist")]
    ImageRootMissing(PathBuf),
    #[error("need at least {needed} eligible records, have {eligible}")]
    TooFewRecords { eligible: usize, needed: usize },
    #[error("fold count must be at least 2, got {0}")]
    InvalidFoldCount(usize),
    #[error("eligible records contain a single class")]
    SingleClassInput,
    #[error("no not_classified records to test on")]
    EmptyTestSet,
    #[error("requested sample of {requested} from {available} eligible records")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("manifest: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => Err(other.to_string()),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Species {
    Albopictus,
    Aegypti,
    Other,
    CannotTell,
}

text_enum!(Species {
    Albopictus => "albopictus",
    Aegypti => "aegypti",
    Other => "other",
    CannotTell => "cannot_tell",
});

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    Confirmed,
    Probable,
    NotClassified,
}

text_enum!(Confidence {
    Confirmed => "confirmed",
    Probable => "probable",
    NotClassified => "not_classified",
});

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryLabel {
    Tiger,
    NonTiger,
    Excluded,
}

text_enum!(BinaryLabel {
    Tiger => "tiger",
    NonTiger => "non_tiger",
    Excluded => "excluded",
});

/// Network output class. The index is the logit position: non-tiger is 0,
/// tiger (the positive class) is 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    NonTiger = 0,
    Tiger = 1,
}

text_enum!(Class {
    NonTiger => "non_tiger",
    Tiger => "tiger",
});

impl Class {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Class {
        if i == 1 {
            Class::Tiger
        } else {
            Class::NonTiger
        }
    }
}

/// Annotator judgement of image quality, kept only when the manifest supplies it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageCategory {
    Clear,
    DamagedOrOccluded,
}

text_enum!(ImageCategory {
    Clear => "clear",
    DamagedOrOccluded => "damaged_or_occluded",
});

/// Positive iff a confirmed albopictus; negative for any aegypti/other image.
pub fn derive_label(species: Species, confidence: Confidence) -> BinaryLabel {
    match (species, confidence) {
        (Species::Albopictus, Confidence::Confirmed) => BinaryLabel::Tiger,
        (Species::Aegypti | Species::Other, _) => BinaryLabel::NonTiger,
        _ => BinaryLabel::Excluded,
    }
}

/// Which records count as labelled training/evaluation data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelPolicy {
    /// Treat `probable` albopictus images as positives.
    pub include_probable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Resolved location (image root joined with the manifest path).
    pub path: PathBuf,
    pub relative_path: String,
    pub species: Species,
    pub confidence: Confidence,
    pub binary_label: BinaryLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<ImageCategory>,
}

impl ImageRecord {
    pub fn new(
        id: impl Into<String>,
        path: impl Into<PathBuf>,
        species: Species,
        confidence: Confidence,
    ) -> Self {
        let path = path.into();
        Self {
            id: id.into(),
            relative_path: path.to_string_lossy().into_owned(),
            path,
            species,
            confidence,
            binary_label: derive_label(species, confidence),
            category: None,
        }
    }

    /// Class used for expert-labelled (cross-validation) training, or `None`
    /// if the record does not take part.
    pub fn training_class(&self, policy: &LabelPolicy) -> Option<Class> {
        if self.confidence == Confidence::NotClassified {
            return None;
        }
        match self.binary_label {
            BinaryLabel::Tiger => Some(Class::Tiger),
            BinaryLabel::NonTiger => Some(Class::NonTiger),
            BinaryLabel::Excluded => (policy.include_probable
                && self.species == Species::Albopictus
                && self.confidence == Confidence::Probable)
                .then_some(Class::Tiger),
        }
    }

    /// Class read from the species tag alone, used to score unconfirmed images.
    pub fn species_class(&self) -> Option<Class> {
        match self.species {
            Species::Albopictus => Some(Class::Tiger),
            Species::Aegypti | Species::Other => Some(Class::NonTiger),
            Species::CannotTell => None,
        }
    }
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    id: String,
    relative_path: String,
    species: String,
    confidence: String,
    #[serde(default)]
    category: Option<String>,
}

/// Reads and validates a manifest; every image must decode. All unreadable
/// rows are reported together.
pub fn ingest_manifest(csv_path: &Path, image_root: &Path) -> Result<Vec<ImageRecord>> {
    let records = read_manifest(csv_path, image_root)?;
    let bad: Vec<String> = records
        .par_iter()
        .filter(|r| crate::preprocess::decode_rgb(&r.path).is_err())
        .map(|r| r.id.clone())
        .collect();
    if !bad.is_empty() {
        return Err(DatasetError::UnreadableImage { row_ids: bad });
    }
    Ok(records)
}

/// Parses the manifest without decoding images.
pub fn read_manifest(csv_path: &Path, image_root: &Path) -> Result<Vec<ImageRecord>> {
    if !image_root.is_dir() {
        return Err(DatasetError::ImageRootMissing(image_root.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(csv_path)?;
    let headers = reader.headers()?.clone();
    for col in REQUIRED_COLUMNS {
        if !headers.iter().any(|h| h == col) {
            return Err(DatasetError::MissingColumn(col.to_string()));
        }
    }

    let mut ids = HashSet::new();
    let mut paths = HashSet::new();
    let mut records = Vec::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row?;
        let species = row.species.parse().map_err(|value| DatasetError::UnknownSpeciesValue {
            row_id: row.id.clone(),
            value,
        })?;
        let confidence = row
            .confidence
            .parse()
            .map_err(|value| DatasetError::UnknownConfidenceValue {
                row_id: row.id.clone(),
                value,
            })?;
        let category = match row.category.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(v) => Some(v.parse().map_err(|value| DatasetError::UnknownCategoryValue {
                row_id: row.id.clone(),
                value,
            })?),
        };
        if !ids.insert(row.id.clone()) {
            return Err(DatasetError::DuplicateId {
                field: "id",
                value: row.id,
            });
        }
        if !paths.insert(row.relative_path.clone()) {
            return Err(DatasetError::DuplicateId {
                field: "relative_path",
                value: row.relative_path,
            });
        }
        records.push(ImageRecord {
            path: image_root.join(&row.relative_path),
            relative_path: row.relative_path,
            binary_label: derive_label(species, confidence),
            id: row.id,
            species,
            confidence,
            category,
        });
    }
    Ok(records)
}

/// Counts per label and confidence tier, as printed by `ingest`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub total: usize,
    pub tiger: usize,
    pub non_tiger: usize,
    pub excluded: usize,
    pub eligible: usize,
    pub by_confidence: BTreeMap<String, usize>,
    pub by_species: BTreeMap<String, usize>,
}

impl ManifestSummary {
    pub fn of(records: &[ImageRecord], policy: &LabelPolicy) -> Self {
        let mut s = ManifestSummary {
            total: records.len(),
            ..Default::default()
        };
        for r in records {
            match r.binary_label {
                BinaryLabel::Tiger => s.tiger += 1,
                BinaryLabel::NonTiger => s.non_tiger += 1,
                BinaryLabel::Excluded => s.excluded += 1,
            }
            if r.training_class(policy).is_some() {
                s.eligible += 1;
            }
            *s.by_confidence.entry(r.confidence.to_string()).or_default() += 1;
            *s.by_species.entry(r.species.to_string()).or_default() += 1;
        }
        s
    }
}

/// Assignment of every eligible record to one of `k` folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// (train, validation) records for one fold; records outside the plan are skipped.
    pub fn split<'a>(&self, records: &'a [ImageRecord], fold: usize) -> (Vec<&'a ImageRecord>, Vec<&'a ImageRecord>) {
        records
            .iter()
            .filter_map(|r| self.fold_of(&r.id).map(|f| (r, f)))
            .fold((Vec::new(), Vec::new()), |(mut train, mut val), (r, f)| {
                if f == fold {
                    val.push(r);
                } else {
                    train.push(r);
                }
                (train, val)
            })
    }
}

pub fn make_folds(records: &[ImageRecord], k: usize, seed: u64) -> Result<FoldPlan> {
    make_folds_with(records, k, seed, &LabelPolicy::default())
}

/// Stratified k-fold assignment. Each class is shuffled independently, the
/// positives are followed by the negatives, and the concatenation is dealt
/// round-robin, which keeps fold sizes and per-fold class counts within one.
pub fn make_folds_with(records: &[ImageRecord], k: usize, seed: u64, policy: &LabelPolicy) -> Result<FoldPlan> {
    if k < 2 {
        return Err(DatasetError::InvalidFoldCount(k));
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for r in records {
        match r.training_class(policy) {
            Some(Class::Tiger) => positives.push(r.id.as_str()),
            Some(Class::NonTiger) => negatives.push(r.id.as_str()),
            None => {}
        }
    }
    let eligible = positives.len() + negatives.len();
    if eligible < k {
        return Err(DatasetError::TooFewRecords { eligible, needed: k });
    }
    if positives.is_empty() || negatives.is_empty() {
        return Err(DatasetError::SingleClassInput);
    }
    // input order must not matter
    positives.sort_unstable();
    negatives.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    positives.shuffle(&mut rng);
    negatives.shuffle(&mut rng);

    let assignments = positives
        .into_iter()
        .chain(negatives)
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % k))
        .collect();
    Ok(FoldPlan { k, seed, assignments })
}

/// Expert-labelled records for training, unconfirmed records for testing.
pub fn split_protocol_b(records: &[ImageRecord]) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    split_protocol_b_with(records, &LabelPolicy::default())
}

pub fn split_protocol_b_with(
    records: &[ImageRecord],
    policy: &LabelPolicy,
) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    let train: Vec<ImageRecord> = records
        .iter()
        .filter(|r| r.training_class(policy).is_some())
        .cloned()
        .collect();
    let test: Vec<ImageRecord> = records
        .iter()
        .filter(|r| r.confidence == Confidence::NotClassified && r.species_class().is_some())
        .cloned()
        .collect();
    if test.is_empty() {
        return Err(DatasetError::EmptyTestSet);
    }
    Ok((train, test))
}
