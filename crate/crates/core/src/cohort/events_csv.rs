use std::collections::HashMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use super::{AdmissionRecord, DailyEvents, LabStatus};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CptRange {
    pub lo: u32,
    pub hi: u32,
    pub name: String,
}

/// Maps raw billing codes to the subgroups used as features.
///
/// ICD-10 codes are truncated to their category prefix; CPT codes are
/// looked up in a range table (non-numeric or unmatched codes go to
/// `CPT_other`). Medication classes and lab ids pass through unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubgroupMap {
    pub icd_prefix_len: usize,
    pub cpt_ranges: Vec<CptRange>,
}

impl Default for SubgroupMap {
    fn default() -> Self {
        let sections = [
            (100, 1999, "CPT_anesthesia"),
            (10004, 69990, "CPT_surgery"),
            (70010, 79999, "CPT_radiology"),
            (80047, 89398, "CPT_pathology_lab"),
            (90281, 99199, "CPT_medicine"),
            (99202, 99499, "CPT_evaluation_management"),
            (99500, 99607, "CPT_medicine"),
        ];
        SubgroupMap {
            icd_prefix_len: 3,
            cpt_ranges: sections
                .iter()
                .map(|&(lo, hi, name)| CptRange { lo, hi, name: name.to_string() })
                .collect(),
        }
    }
}

impl SubgroupMap {
    pub fn icd(&self, code: &str) -> String {
        let clean: String = code.chars().filter(|c| *c != '.').collect::<String>().to_uppercase();
        clean.chars().take(self.icd_prefix_len).collect()
    }

    pub fn cpt(&self, code: &str) -> String {
        code.trim()
            .parse::<u32>()
            .ok()
            .and_then(|v| self.cpt_ranges.iter().find(|r| (r.lo..=r.hi).contains(&v)))
            .map_or_else(|| "CPT_other".to_string(), |r| r.name.clone())
    }
}

#[derive(Debug, Deserialize)]
struct EventRow {
    admission_id: String,
    day: usize,
    kind: String,
    code: String,
    #[serde(default)]
    value: String,
}

/// Merges a flat event table (`admission_id, day, kind, code, value`) into
/// `records`. `kind` is one of `cpt`, `icd`, `med`, `lab`; count rows take
/// an optional integer `value` (default 1), lab rows take `normal` or
/// `abnormal`. Returns the number of rows ingested.
pub fn ingest_event_csv<R: Read>(
    records: &mut [AdmissionRecord],
    reader: R,
    map: &SubgroupMap,
) -> Result<usize> {
    let index: HashMap<String, usize> = records
        .iter()
        .enumerate()
        .map(|(k, r)| (r.admission_id.clone(), k))
        .collect();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut n = 0;
    for row in rdr.deserialize() {
        let row: EventRow = row?;
        let &k = index
            .get(&row.admission_id)
            .ok_or_else(|| Error::Data(format!("event for unknown admission {}", row.admission_id)))?;
        let days = &mut records[k].daily_events;
        if days.len() <= row.day {
            days.resize(row.day + 1, DailyEvents::default());
        }
        let day = &mut days[row.day];
        let count = || -> Result<u32> {
            if row.value.is_empty() {
                Ok(1)
            } else {
                row.value
                    .parse()
                    .map_err(|_| Error::Data(format!("count `{}` is not an integer", row.value)))
            }
        };
        match row.kind.as_str() {
            "cpt" => *day.cpt_counts.entry(map.cpt(&row.code)).or_default() += count()?,
            "icd" => *day.icd_counts.entry(map.icd(&row.code)).or_default() += count()?,
            "med" => *day.med_counts.entry(row.code.clone()).or_default() += count()?,
            "lab" => {
                let status = match row.value.to_ascii_lowercase().as_str() {
                    "normal" => LabStatus::Normal,
                    "abnormal" => LabStatus::Abnormal,
                    other => return Err(Error::Data(format!("lab value `{other}`"))),
                };
                day.labs.insert(row.code.clone(), status);
            }
            other => return Err(Error::Data(format!("unknown event kind `{other}`"))),
        }
        n += 1;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::record;
    use super::*;

    #[test]
    fn maps_codes_to_subgroups() {
        let m = SubgroupMap::default();
        assert_eq!(m.icd("I50.23"), "I50");
        assert_eq!(m.icd("e11"), "E11");
        assert_eq!(m.cpt("71045"), "CPT_radiology");
        assert_eq!(m.cpt("99223"), "CPT_evaluation_management");
        assert_eq!(m.cpt("0001F"), "CPT_other");
    }

    #[test]
    fn ingests_rows_into_days() {
        let mut rs = vec![record("a", "p", 0, 1)];
        rs[0].daily_events.clear();
        let csv = "admission_id,day,kind,code,value\n\
                   a,0,icd,I50.23,\n\
                   a,0,icd,I50.9,2\n\
                   a,2,lab,LAB_NA,abnormal\n\
                   a,1,med,BETA_BLOCKER,1\n\
                   a,1,cpt,71045,\n";
        let n = ingest_event_csv(&mut rs, csv.as_bytes(), &SubgroupMap::default()).unwrap();
        assert_eq!(n, 5);
        let days = &rs[0].daily_events;
        assert_eq!(days.len(), 3);
        assert_eq!(days[0].icd_counts["I50"], 3);
        assert_eq!(days[1].cpt_counts["CPT_radiology"], 1);
        assert_eq!(days[2].labs["LAB_NA"], LabStatus::Abnormal);
    }

    #[test]
    fn unknown_admission_and_bad_values_error() {
        let mut rs = vec![record("a", "p", 0, 1)];
        let bad_id = "admission_id,day,kind,code,value\nz,0,icd,I50,\n";
        assert!(ingest_event_csv(&mut rs, bad_id.as_bytes(), &SubgroupMap::default()).is_err());
        let bad_lab = "admission_id,day,kind,code,value\na,0,lab,X,high\n";
        assert!(ingest_event_csv(&mut rs, bad_lab.as_bytes(), &SubgroupMap::default()).is_err());
    }
}
