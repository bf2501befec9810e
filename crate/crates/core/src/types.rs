//! Shared domain vocabulary: coordinates, labels, samples and manifests.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::SystemTime;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Plot diameter in meters.
pub const SAMPLE_DIAMETER_M: f64 = 30.0;
/// Default projected CRS.
pub const DEFAULT_CRS: &str = "EPSG:25832";
/// Inclusive range of acquisition years.
pub const YEAR_RANGE: std::ops::RangeInclusive<i32> = 2019..=2023;

/// A location in a projected metric CRS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub easting: f64,
    pub northing: f64,
}

impl GeoPoint {
    pub const fn new(easting: f64, northing: f64) -> Self {
        Self { easting, northing }
    }

    pub fn is_finite(&self) -> bool {
        self.easting.is_finite() && self.northing.is_finite()
    }

    /// Planar Euclidean distance.
    pub fn distance(&self, other: &GeoPoint) -> f64 {
        distance(*self, *other)
    }
}

/// Planar Euclidean distance in meters.
pub fn distance(a: GeoPoint, b: GeoPoint) -> f64 {
    (a.easting - b.easting).hypot(a.northing - b.northing)
}

/// Coarse biodiversity-potential label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BioLabel {
    Low,
    High,
}

impl BioLabel {
    pub const ALL: [BioLabel; 2] = [BioLabel::Low, BioLabel::High];

    /// Maps an HNV index to a label. Indices 1-3 are low, 8-10 high, and
    /// everything else (0, 4-7, 11) belongs to neither class.
    pub fn from_hnv(index: i64) -> Option<BioLabel> {
        match index {
            1..=3 => Some(BioLabel::Low),
            8..=10 => Some(BioLabel::High),
            _ => None,
        }
    }

    pub fn accepts_hnv(self, index: i64) -> bool {
        BioLabel::from_hnv(index) == Some(self)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BioLabel::Low => "low",
            BioLabel::High => "high",
        }
    }

    /// Position in a `(low, high)` probability pair.
    pub fn index(self) -> usize {
        match self {
            BioLabel::Low => 0,
            BioLabel::High => 1,
        }
    }

    pub fn other(self) -> BioLabel {
        match self {
            BioLabel::Low => BioLabel::High,
            BioLabel::High => BioLabel::Low,
        }
    }
}

impl fmt::Display for BioLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BioLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "low" => Ok(BioLabel::Low),
            "high" => Ok(BioLabel::High),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One circular plot.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub center: GeoPoint,
    pub diameter: f64,
    pub year: i32,
    pub label: BioLabel,
    pub patch_id: String,
    pub split: Split,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        center: GeoPoint,
        year: i32,
        label: BioLabel,
        patch_id: impl Into<String>,
        split: Split,
    ) -> Self {
        Self { id: id.into(), center, diameter: SAMPLE_DIAMETER_M, year, label, patch_id: patch_id.into(), split }
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("patch {patch_id:?} has samples in both {first} and {second}")]
    SplitConflict { patch_id: String, first: Split, second: Split },
    #[error("invalid sample {id:?}: {reason}")]
    InvalidSample { id: String, reason: String },
    #[error("manifest csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ManifestError {
    pub fn name(&self) -> &'static str {
        match self {
            ManifestError::DuplicateId(_) => "DuplicateId",
            ManifestError::SplitConflict { .. } => "SplitConflict",
            ManifestError::InvalidSample { .. } => "InvalidSample",
            ManifestError::Csv(_) => "ManifestCsv",
            ManifestError::Parse { .. } => "ManifestParse",
            ManifestError::Io(_) => "IoError",
        }
    }
}

/// Ordered set of samples sharing one CRS.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub samples: Vec<Sample>,
    pub crs_code: String,
    pub created: SystemTime,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    easting: f64,
    northing: f64,
    year: i32,
    label: BioLabel,
    patch_id: String,
    split: Split,
}

impl Manifest {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples, crs_code: DEFAULT_CRS.to_string(), created: SystemTime::now() }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn by_id(&self) -> HashMap<&str, &Sample> {
        self.samples.iter().map(|s| (s.id.as_str(), s)).collect()
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Checks id uniqueness, per-patch split consistency and sample fields.
    pub fn validate(&self) -> Result<(), ManifestError> {
        let mut ids = HashSet::new();
        let mut patch_split: HashMap<&str, Split> = HashMap::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(ManifestError::DuplicateId(s.id.clone()));
            }
            let invalid = |reason: String| ManifestError::InvalidSample { id: s.id.clone(), reason };
            if s.diameter != SAMPLE_DIAMETER_M {
                return Err(invalid(format!("diameter {} != {SAMPLE_DIAMETER_M}", s.diameter)));
            }
            if !YEAR_RANGE.contains(&s.year) {
                return Err(invalid(format!("year {} outside 2019-2023", s.year)));
            }
            if !s.center.is_finite() || s.center.easting < 0.0 || s.center.northing < 0.0 {
                return Err(invalid("center must be finite and non-negative".into()));
            }
            match patch_split.get(s.patch_id.as_str()) {
                Some(&first) if first != s.split => {
                    return Err(ManifestError::SplitConflict { patch_id: s.patch_id.clone(), first, second: s.split })
                }
                Some(_) => {}
                None => {
                    patch_split.insert(&s.patch_id, s.split);
                }
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ManifestError> {
        let mut w = csv::Writer::from_writer(writer);
        for s in &self.samples {
            w.serialize(ManifestRow {
                id: s.id.clone(),
                easting: s.center.easting,
                northing: s.center.northing,
                year: s.year,
                label: s.label,
                patch_id: s.patch_id.clone(),
                split: s.split,
            })?;
        }
        if self.samples.is_empty() {
            w.write_record(["id", "easting", "northing", "year", "label", "patch_id", "split"])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, ManifestError> {
        let mut r = csv::Reader::from_reader(reader);
        let expected = ["id", "easting", "northing", "year", "label", "patch_id", "split"];
        let headers = r.headers()?.clone();
        if headers.iter().ne(expected.iter().copied()) {
            return Err(ManifestError::Parse { line: 1, reason: format!("unexpected header {headers:?}") });
        }
        let mut samples = Vec::new();
        for row in r.deserialize::<ManifestRow>() {
            let row = row?;
            samples.push(Sample::new(
                row.id,
                GeoPoint::new(row.easting, row.northing),
                row.year,
                row.label,
                row.patch_id,
                row.split,
            ));
        }
        let manifest = Manifest::new(samples);
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid class probabilities ({p_low}, {p_high})")]
pub struct InvalidProbs {
    pub p_low: f64,
    pub p_high: f64,
}

/// Two-class probability vector `(low, high)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProbs {
    p_low: f64,
    p_high: f64,
}

/// Allowed deviation of `p_low + p_high` from one.
pub const PROB_SUM_TOL: f64 = 1e-6;

impl ClassProbs {
    pub fn new(p_low: f64, p_high: f64) -> Result<Self, InvalidProbs> {
        let in_unit = |p: f64| (0.0..=1.0).contains(&p);
        if in_unit(p_low) && in_unit(p_high) && ((p_low + p_high) - 1.0).abs() <= PROB_SUM_TOL {
            Ok(Self { p_low, p_high })
        } else {
            Err(InvalidProbs { p_low, p_high })
        }
    }

    /// All probability mass on `label`.
    pub fn certain(label: BioLabel) -> Self {
        match label {
            BioLabel::Low => Self { p_low: 1.0, p_high: 0.0 },
            BioLabel::High => Self { p_low: 0.0, p_high: 1.0 },
        }
    }

    pub fn p_low(&self) -> f64 {
        self.p_low
    }

    pub fn p_high(&self) -> f64 {
        self.p_high
    }

    pub fn get(&self, label: BioLabel) -> f64 {
        match label {
            BioLabel::Low => self.p_low,
            BioLabel::High => self.p_high,
        }
    }

    pub fn argmax(&self) -> BioLabel {
        argmax_class(*self)
    }

    /// Probability of the predicted class.
    pub fn confidence(&self) -> f64 {
        self.get(self.argmax())
    }
}

/// Predicted class; an exact tie resolves to `Low`.
pub fn argmax_class(p: ClassProbs) -> BioLabel {
    if p.p_high > p.p_low {
        BioLabel::High
    } else {
        BioLabel::Low
    }
}
