//! Cell-level dataset handling: manifest i/o, null filtering, class counts
//! and patient-grouped train/validation splitting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Expert annotation for one cell in one labeling round.
///
/// The integer coding is fixed: unfragmented is class 0, fragmented is
/// class 1. `Null` marks cells the expert could not classify and never
/// reaches a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Unfragmented,
    Fragmented,
    Null,
}

impl Label {
    /// Integer class code, `None` for null annotations.
    pub fn class_index(self) -> Option<u8> {
        match self {
            Label::Unfragmented => Some(0),
            Label::Fragmented => Some(1),
            Label::Null => None,
        }
    }

    pub fn is_supervised(self) -> bool {
        self != Label::Null
    }
}

/// One spermatozoon: its image triple and per-round annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell_id: String,
    pub patient_id: String,
    pub phase_contrast: PathBuf,
    #[serde(default)]
    pub bright_field: Option<PathBuf>,
    #[serde(default)]
    pub fluorescence: Option<PathBuf>,
    #[serde(default)]
    pub annotations: BTreeMap<String, Label>,
}

impl CellRecord {
    pub fn label(&self, round: &str) -> Label {
        self.annotations.get(round).copied().unwrap_or(Label::Null)
    }
}

/// Optional first line of a manifest file carrying dataset-level settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestHeader {
    pixel_scale_um: f64,
    #[serde(default)]
    primary_round: Option<String>,
}

/// Default pixel scale when a manifest file carries no header line.
pub const DEFAULT_PIXEL_SCALE_UM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<CellRecord>,
    /// Microns per pixel for all images referenced by this manifest.
    pub pixel_scale_um: f64,
    /// Annotation round used for supervision.
    pub primary_round: String,
}

/// Per-round class tally. Records missing the round count as null.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub unfragmented: usize,
    pub fragmented: usize,
    pub null: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.unfragmented + self.fragmented + self.null
    }
}

impl Manifest {
    pub fn new(records: Vec<CellRecord>, pixel_scale_um: f64, primary_round: &str) -> Result<Self> {
        let m = Manifest {
            records,
            pixel_scale_um,
            primary_round: primary_round.to_string(),
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.pixel_scale_um <= 0.0 || !self.pixel_scale_um.is_finite() {
            return Err(CoreError::InvalidPixelScale(self.pixel_scale_um));
        }
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if !seen.insert(r.cell_id.as_str()) {
                return Err(CoreError::DuplicateCellId {
                    cell_id: r.cell_id.clone(),
                    line: i + 1,
                });
            }
            if r.phase_contrast.as_os_str().is_empty() {
                return Err(CoreError::MissingPhaseContrast {
                    cell_id: r.cell_id.clone(),
                });
            }
            if r.patient_id.is_empty() {
                return Err(CoreError::EmptyPatientId {
                    cell_id: r.cell_id.clone(),
                });
            }
        }
        Ok(())
    }

    /// Distinct patient ids, sorted.
    pub fn patients(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.patient_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn records_for_patients<'a>(&'a self, patients: &HashSet<String>) -> Vec<&'a CellRecord> {
        self.records
            .iter()
            .filter(|r| patients.contains(&r.patient_id))
            .collect()
    }

    /// Keep only records whose label in `round` is fragmented or unfragmented.
    ///
    /// Returns the filtered manifest together with the number of records that
    /// were missing the round entirely (dropped, reported as a warning count).
    pub fn filter_supervised(&self, round: &str) -> (Manifest, usize) {
        let missing = self
            .records
            .iter()
            .filter(|r| !r.annotations.contains_key(round))
            .count();
        let records = self
            .records
            .iter()
            .filter(|r| r.label(round).is_supervised())
            .cloned()
            .collect();
        (
            Manifest {
                records,
                pixel_scale_um: self.pixel_scale_um,
                primary_round: self.primary_round.clone(),
            },
            missing,
        )
    }

    pub fn class_counts(&self, round: &str) -> ClassCounts {
        let mut counts = ClassCounts {
            unfragmented: 0,
            fragmented: 0,
            null: 0,
        };
        for r in &self.records {
            match r.label(round) {
                Label::Unfragmented => counts.unfragmented += 1,
                Label::Fragmented => counts.fragmented += 1,
                Label::Null => counts.null += 1,
            }
        }
        counts
    }

    /// Deterministic patient-grouped split: exactly `val_patient_count`
    /// patients go to validation, the rest to training. Assignment depends
    /// only on the patient set and the seed.
    pub fn grouped_split(&self, val_patient_count: usize, seed: u64) -> Result<SplitManifest> {
        let mut patients = self.patients();
        if val_patient_count == 0 || val_patient_count >= patients.len() {
            return Err(CoreError::InvalidSplitCount {
                requested: val_patient_count,
                available: patients.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        patients.shuffle(&mut rng);
        let val: BTreeSet<String> = patients[..val_patient_count].iter().cloned().collect();
        let train: BTreeSet<String> = patients[val_patient_count..].iter().cloned().collect();
        Ok(SplitManifest {
            seed,
            train_patients: train,
            val_patients: val,
        })
    }
}

/// Patient-level train/validation assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train_patients: BTreeSet<String>,
    pub val_patients: BTreeSet<String>,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("split serializes");
        std::fs::write(path, json).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CoreError::ManifestParse {
            line: 0,
            message: format!("split file {}: {e}", path.display()),
        })
    }
}

/// Load a line-delimited JSON manifest.
///
/// The first line may be a header object (`pixel_scale_um`, `primary_round`);
/// every other line is one cell record. Without a header the pixel scale
/// defaults to [`DEFAULT_PIXEL_SCALE_UM`] and the primary round to the
/// lexicographically first round seen in the records.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let reader = BufReader::new(file);

    let mut header: Option<ManifestHeader> = None;
    let mut records: Vec<CellRecord> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CoreError::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(trimmed).map_err(|e| CoreError::ManifestParse {
                line: line_no,
                message: e.to_string(),
            })?;
        if records.is_empty() && header.is_none() && value.get("cell_id").is_none() {
            header = Some(serde_json::from_value(value).map_err(|e| {
                CoreError::ManifestParse {
                    line: line_no,
                    message: format!("bad header: {e}"),
                }
            })?);
            continue;
        }
        let record: CellRecord =
            serde_json::from_value(value).map_err(|e| CoreError::ManifestParse {
                line: line_no,
                message: e.to_string(),
            })?;
        if !seen.insert(record.cell_id.clone()) {
            return Err(CoreError::DuplicateCellId {
                cell_id: record.cell_id,
                line: line_no,
            });
        }
        records.push(record);
    }

    // Relative image paths are resolved against the manifest's directory so
    // a generated dataset can be moved or copied wholesale.
    if let Some(base) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(p.as_path());
            }
        };
        for record in &mut records {
            resolve(&mut record.phase_contrast);
            if let Some(p) = record.bright_field.as_mut() {
                resolve(p);
            }
            if let Some(p) = record.fluorescence.as_mut() {
                resolve(p);
            }
        }
    }

    let (pixel_scale_um, primary_round) = match header {
        Some(h) => {
            let round = h.primary_round.unwrap_or_else(|| first_round(&records));
            (h.pixel_scale_um, round)
        }
        None => (DEFAULT_PIXEL_SCALE_UM, first_round(&records)),
    };
    Manifest::new(records, pixel_scale_um, &primary_round)
}

fn first_round(records: &[CellRecord]) -> String {
    records
        .iter()
        .flat_map(|r| r.annotations.keys())
        .min()
        .cloned()
        .unwrap_or_else(|| "round_1".to_string())
}

/// Write a manifest as line-delimited JSON with a leading header line.
pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let header = ManifestHeader {
        pixel_scale_um: manifest.pixel_scale_um,
        primary_round: Some(manifest.primary_round.clone()),
    };
    writeln!(
        file,
        "{}",
        serde_json::to_string(&header).expect("header serializes")
    )
    .map_err(|e| CoreError::io(path, e))?;
    for record in &manifest.records {
        writeln!(
            file,
            "{}",
            serde_json::to_string(record).expect("record serializes")
        )
        .map_err(|e| CoreError::io(path, e))?;
    }
    Ok(())
}
