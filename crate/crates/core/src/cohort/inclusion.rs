use serde::{Deserialize, Serialize};

use super::AdmissionRecord;

/// Cohort inclusion rules. Admission-type and discharge-location lists are
/// compared case-insensitively and only applied to records carrying the field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InclusionCriteria {
    pub min_stay_hours: f64,
    pub min_radiographs: usize,
    pub excluded_admission_types: Vec<String>,
    pub excluded_discharge_locations: Vec<String>,
}

impl Default for InclusionCriteria {
    fn default() -> Self {
        InclusionCriteria {
            min_stay_hours: 48.0,
            min_radiographs: 2,
            excluded_admission_types: vec![
                "ambulatory observation".into(),
                "eu observation".into(),
                "direct observation".into(),
            ],
            excluded_discharge_locations: vec![
                "acute hospital".into(),
                "healthcare facility".into(),
                "against advice".into(),
            ],
        }
    }
}

/// Exclusion flow: each removed record is counted under the first rule it fails.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionReport {
    pub input: usize,
    pub excluded_short_stay: usize,
    pub excluded_few_radiographs: usize,
    pub excluded_admission_type: usize,
    pub excluded_discharge_location: usize,
    pub retained: usize,
}

fn listed(value: &Option<String>, list: &[String]) -> bool {
    value
        .as_deref()
        .is_some_and(|v| list.iter().any(|x| x.eq_ignore_ascii_case(v.trim())))
}

pub fn apply_inclusion(
    records: &[AdmissionRecord],
    criteria: &InclusionCriteria,
) -> (Vec<AdmissionRecord>, InclusionReport) {
    let mut report = InclusionReport { input: records.len(), ..Default::default() };
    let mut kept = Vec::new();
    for r in records {
        if r.length_of_stay_hours() < criteria.min_stay_hours {
            report.excluded_short_stay += 1;
        } else if r.imaging.len() < criteria.min_radiographs {
            report.excluded_few_radiographs += 1;
        } else if listed(&r.admission_type, &criteria.excluded_admission_types) {
            report.excluded_admission_type += 1;
        } else if listed(&r.discharge_location, &criteria.excluded_discharge_locations) {
            report.excluded_discharge_location += 1;
        } else {
            kept.push(r.clone());
        }
    }
    report.retained = kept.len();
    (kept, report)
}
