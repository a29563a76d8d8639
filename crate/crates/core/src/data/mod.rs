//! Dataset ingestion, validation and synthetic generation.
//!
//! Two on-disk layouts are understood:
//!
//! * the canonical layout written by [`write_dataset`]: `manifest.csv` with
//!   columns `sample_id,band,environment,user_1..user_6` (activity name or
//!   `null`) and one `amplitude/<sample_id>.npy` array per sample;
//! * the public WiMANS release: `annotation.csv` plus `wifi_csi/amp/<label>.npy`.
//!
//! Arrays are `T×3×3×30`, stored as `f32`, `f64` or complex; complex values
//! are converted to magnitude when loaded.

mod layout;
mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array4, ArrayD, Ix4};
use ndarray_npy::{ReadNpyError, ReadNpyExt};
use num_complex::Complex;
use serde::{Deserialize, Serialize};

pub use layout::{load_manifest, write_dataset, CANONICAL_MANIFEST, WIMANS_ANNOTATION};
pub use synthetic::{generate_synthetic, SlotAssignment, SyntheticSpec};

use crate::labels::{Activity, SlotLabels};
use crate::{Error, Result, Scalar};

pub const TX: usize = 3;
pub const RX: usize = 3;
pub const SUBCARRIERS: usize = 30;
/// Antenna pairs × subcarriers.
pub const CHANNELS: usize = TX * RX * SUBCARRIERS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Band {
    #[serde(rename = "2.4")]
    GHz2_4,
    #[serde(rename = "5")]
    GHz5,
}

impl Band {
    pub fn as_str(self) -> &'static str {
        match self {
            Band::GHz2_4 => "2.4",
            Band::GHz5 => "5",
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Band {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().trim_end_matches("GHz").trim_end_matches("ghz").trim() {
            "2.4" => Ok(Band::GHz2_4),
            "5" | "5.0" => Ok(Band::GHz5),
            other => Err(format!("unknown band `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Environment {
    Classroom,
    Meeting,
    Empty,
}

impl Environment {
    pub const ALL: [Environment; 3] = [Environment::Classroom, Environment::Meeting, Environment::Empty];

    pub fn as_str(self) -> &'static str {
        match self {
            Environment::Classroom => "classroom",
            Environment::Meeting => "meeting",
            Environment::Empty => "empty",
        }
    }
}

impl fmt::Display for Environment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Environment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "classroom" => Ok(Environment::Classroom),
            "meeting" | "meeting_room" => Ok(Environment::Meeting),
            "empty" | "empty_room" => Ok(Environment::Empty),
            other => Err(format!("unknown environment `{other}`")),
        }
    }
}

/// One amplitude recording with its annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiSample<T> {
    pub sample_id: String,
    pub band: Band,
    pub environment: Environment,
    /// `T×3×3×30` linear amplitude.
    pub amplitude: Array4<T>,
    pub annotation: SlotLabels,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub band: Band,
    pub environment: Environment,
    /// Path of the amplitude array relative to the dataset root.
    pub locator: PathBuf,
    pub labels: SlotLabels,
}

/// Validated index of a dataset. Sample ids are unique.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
    index: HashMap<String, usize>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.sample_id.clone(), i).is_some() {
                return Err(Error::DuplicateSample(e.sample_id.clone()));
            }
            if let Some(w) = e.labels.occupancy_warning() {
                log::warn!("sample {}: {w}", e.sample_id);
            }
        }
        Ok(DatasetManifest {
            root: root.into(),
            entries,
            index,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&ManifestEntry> {
        self.index.get(sample_id).map(|&i| &self.entries[i])
    }

    pub fn activity_vocabulary(&self) -> Vec<String> {
        Activity::vocabulary()
    }

    /// Keeps the entries accepted by `keep`, preserving order.
    pub fn filter(&self, keep: impl Fn(&ManifestEntry) -> bool) -> DatasetManifest {
        let entries = self.entries.iter().filter(|e| keep(e)).cloned().collect();
        DatasetManifest::new(self.root.clone(), entries).expect("subset of unique ids")
    }
}

/// Anything that can hand out samples by id.
pub trait SampleSource<T> {
    fn load(&self, sample_id: &str) -> Result<CsiSample<T>>;
}

impl<T: Scalar> SampleSource<T> for DatasetManifest {
    fn load(&self, sample_id: &str) -> Result<CsiSample<T>> {
        load_sample(self, sample_id)
    }
}

/// Samples held in memory, e.g. freshly generated synthetic data.
pub struct MemorySource<T> {
    samples: HashMap<String, CsiSample<T>>,
}

impl<T: Scalar> MemorySource<T> {
    pub fn new(samples: Vec<CsiSample<T>>) -> Self {
        MemorySource {
            samples: samples.into_iter().map(|s| (s.sample_id.clone(), s)).collect(),
        }
    }
}

impl<T: Scalar> SampleSource<T> for MemorySource<T> {
    fn load(&self, sample_id: &str) -> Result<CsiSample<T>> {
        self.samples.get(sample_id).cloned().ok_or_else(|| Error::Ingestion {
            sample_id: sample_id.to_string(),
            message: "not in memory source".into(),
        })
    }
}

/// Reads and validates one sample's amplitude.
pub fn load_sample<T: Scalar>(manifest: &DatasetManifest, sample_id: &str) -> Result<CsiSample<T>> {
    let entry = manifest.get(sample_id).ok_or_else(|| Error::Ingestion {
        sample_id: sample_id.to_string(),
        message: "not in manifest".into(),
    })?;
    let path = manifest.root.join(&entry.locator);
    let bytes = std::fs::read(&path).map_err(|e| Error::Ingestion {
        sample_id: sample_id.to_string(),
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    let raw = decode_npy(sample_id, &bytes)?;
    let amplitude = validate_amplitude(sample_id, raw)?;
    Ok(CsiSample {
        sample_id: entry.sample_id.clone(),
        band: entry.band,
        environment: entry.environment,
        amplitude,
        annotation: entry.labels,
    })
}

/// Real arrays pass through; complex arrays become their magnitude.
fn decode_npy<T: Scalar>(sample_id: &str, bytes: &[u8]) -> Result<ArrayD<T>> {
    let fail = |e: ReadNpyError| Error::Ingestion {
        sample_id: sample_id.to_string(),
        message: format!("unreadable npy: {e}"),
    };

    let r = ArrayD::<f32>::read_npy(bytes);
    if !wrong_dtype(&r) {
        return r.map(|a| a.mapv(|v| T::lit(v as f64))).map_err(fail);
    }
    let r = ArrayD::<f64>::read_npy(bytes);
    if !wrong_dtype(&r) {
        return r.map(|a| a.mapv(T::lit)).map_err(fail);
    }
    let r = ArrayD::<Complex<f32>>::read_npy(bytes);
    if !wrong_dtype(&r) {
        return r
            .map(|a| a.mapv(|c| T::lit((c.re as f64).hypot(c.im as f64))))
            .map_err(fail);
    }
    ArrayD::<Complex<f64>>::read_npy(bytes)
        .map(|a| a.mapv(|c| T::lit(c.re.hypot(c.im))))
        .map_err(fail)
}

fn wrong_dtype<A>(r: &std::result::Result<A, ReadNpyError>) -> bool {
    matches!(r, Err(ReadNpyError::WrongDescriptor(_)))
}

fn validate_amplitude<T: Scalar>(sample_id: &str, raw: ArrayD<T>) -> Result<Array4<T>> {
    let shape = raw.shape().to_vec();
    if shape.len() != 4 || shape[0] == 0 || shape[1..] != [TX, RX, SUBCARRIERS] {
        return Err(Error::Shape {
            sample_id: sample_id.to_string(),
            expected: format!("T×{TX}×{RX}×{SUBCARRIERS} with T ≥ 1"),
            actual: shape,
        });
    }
    let non_finite = raw.iter().filter(|v| !v.is_finite()).count();
    if non_finite > 0 {
        return Err(Error::NonFinite {
            sample_id: sample_id.to_string(),
            count: non_finite,
        });
    }
    let negative = raw.iter().filter(|&&v| v < T::zero()).count();
    if negative > 0 {
        return Err(Error::NegativeAmplitude {
            sample_id: sample_id.to_string(),
            count: negative,
        });
    }
    Ok(raw.into_dimensionality::<Ix4>().expect("rank checked"))
}
