//! Admission records, label derivation, inclusion filtering, patient-level
//! splits and a synthetic cohort generator with planted signals.

mod events_csv;
mod inclusion;
mod label;
mod split;
mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

pub use events_csv::{ingest_event_csv, CptRange, SubgroupMap};
pub use inclusion::{apply_inclusion, InclusionCriteria, InclusionReport};
pub use label::{derive_label, derive_labels};
pub use split::{split_by_patient, Split, SplitSpec};
pub use synth::{generate_synthetic_cohort, SignalKind, SignalManifest, SynthConfig, SynthOutput};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabStatus {
    Normal,
    Abnormal,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub age: f64,
    pub gender: String,
    pub race: String,
    pub ethnicity: String,
}

/// Events recorded on one hospital day, keyed by code subgroup.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DailyEvents {
    #[serde(default)]
    pub cpt_counts: BTreeMap<String, u32>,
    #[serde(default)]
    pub icd_counts: BTreeMap<String, u32>,
    #[serde(default)]
    pub med_counts: BTreeMap<String, u32>,
    #[serde(default)]
    pub labs: BTreeMap<String, LabStatus>,
}

/// One chest radiograph, represented by its precomputed feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagingStudy {
    pub time: NaiveDateTime,
    pub features: Vec<f64>,
}

/// One hospitalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissionRecord {
    pub admission_id: String,
    pub patient_id: String,
    pub admit_time: NaiveDateTime,
    pub discharge_time: NaiveDateTime,
    #[serde(default)]
    pub died_in_hospital: bool,
    pub demographics: Demographics,
    #[serde(default)]
    pub daily_events: Vec<DailyEvents>,
    #[serde(default)]
    pub imaging: Vec<ImagingStudy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lace_plus: Option<u8>,
    #[serde(default)]
    pub label: Option<bool>,
    /// Post-discharge death date, when a registry provides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub death_date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub admission_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discharge_location: Option<String>,
}

impl AdmissionRecord {
    pub fn length_of_stay_hours(&self) -> f64 {
        (self.discharge_time - self.admit_time).num_seconds() as f64 / 3600.0
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.admission_id;
        if self.discharge_time <= self.admit_time {
            return Err(Error::Data(format!("{id}: discharge_time is not after admit_time")));
        }
        if self.imaging.windows(2).any(|w| w[0].time > w[1].time) {
            return Err(Error::Data(format!("{id}: imaging entries are not sorted by time")));
        }
        if let Some(score) = self.lace_plus {
            if score > 90 {
                return Err(Error::Data(format!("{id}: LACE+ score {score} outside [0, 90]")));
            }
        }
        if !self.demographics.age.is_finite() {
            return Err(Error::Data(format!("{id}: non-finite age")));
        }
        if self.imaging.iter().any(|s| s.features.iter().any(|v| !v.is_finite())) {
            return Err(Error::Data(format!("{id}: non-finite imaging feature")));
        }
        Ok(())
    }
}

/// A validated set of admissions.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortDataset {
    pub records: Vec<AdmissionRecord>,
    pub d_img: usize,
}

impl CohortDataset {
    /// Validates every record, id uniqueness and the imaging dimension.
    pub fn new(records: Vec<AdmissionRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut d_img = None;
        for r in &records {
            r.validate()?;
            if !seen.insert(r.admission_id.as_str()) {
                return Err(Error::Data(format!("duplicate admission_id {}", r.admission_id)));
            }
            for study in &r.imaging {
                match d_img {
                    None => d_img = Some(study.features.len()),
                    Some(d) if d != study.features.len() => {
                        return Err(Error::Data(format!(
                            "{}: imaging feature length {} differs from {d}",
                            r.admission_id,
                            study.features.len()
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(CohortDataset { records, d_img: d_img.unwrap_or(0) })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: AdmissionRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Data(format!("{}:{}: {e}", path.display(), n + 1))
            })?;
            records.push(record);
        }
        Self::new(records)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_records(path, &self.records)
    }
}

pub(crate) fn write_records(path: &Path, records: &[AdmissionRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn rejects_discharge_before_admit() {
        let mut r = record("a", "p", 3, 5);
        r.discharge_time = r.admit_time;
        assert!(CohortDataset::new(vec![r]).is_err());
    }

    #[test]
    fn rejects_duplicate_ids_and_ragged_imaging() {
        let r = record("a", "p", 0, 3);
        assert!(CohortDataset::new(vec![r.clone(), r.clone()]).is_err());
        let mut s = record("b", "q", 0, 3);
        s.imaging[1].features.push(2.0);
        assert!(CohortDataset::new(vec![r, s]).is_err());
    }

    #[test]
    fn rejects_lace_out_of_range() {
        let mut r = record("a", "p", 0, 3);
        r.lace_plus = Some(91);
        assert!(r.validate().is_err());
        r.lace_plus = Some(90);
        assert!(r.validate().is_ok());
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut r = record("a", "p", 0, 3);
        r.daily_events[1].labs.insert("LAB_1".into(), LabStatus::Abnormal);
        r.daily_events[0].cpt_counts.insert("CPT_1".into(), 2);
        let ds = CohortDataset::new(vec![r, record("b", "p", 40, 44)]).unwrap();
        ds.write_jsonl(&path).unwrap();
        let back = CohortDataset::read_jsonl(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.d_img, 2);
    }
}
