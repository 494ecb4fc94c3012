use std::collections::BTreeMap;

use super::AdmissionRecord;
use crate::error::{Error, Result};

/// Readmission window in calendar days, inclusive.
const WINDOW_DAYS: i64 = 30;

/// 30-day readmission label of `record`, given every admission of the same
/// patient in any order.
///
/// Positive when the next admission starts at most 30 calendar days after
/// this discharge date, when the patient died in hospital, or when a
/// post-discharge death date falls inside the same window.
pub fn derive_label(record: &AdmissionRecord, all_records_of_patient: &[AdmissionRecord]) -> Result<bool> {
    let mut stays: Vec<&AdmissionRecord> = all_records_of_patient
        .iter()
        .filter(|r| r.patient_id == record.patient_id)
        .collect();
    stays.sort_by(|a, b| a.admit_time.cmp(&b.admit_time).then(a.admission_id.cmp(&b.admission_id)));
    for pair in stays.windows(2) {
        if pair[1].admit_time < pair[0].discharge_time {
            return Err(Error::Data(format!(
                "patient {}: admissions {} and {} overlap",
                record.patient_id, pair[0].admission_id, pair[1].admission_id
            )));
        }
    }
    if record.died_in_hospital {
        return Ok(true);
    }
    let discharge = record.discharge_time.date();
    if let Some(death) = record.death_date {
        let days = (death - discharge).num_days();
        if (0..=WINDOW_DAYS).contains(&days) {
            return Ok(true);
        }
    }
    let pos = stays
        .iter()
        .position(|r| r.admission_id == record.admission_id)
        .ok_or_else(|| {
            Error::Data(format!("{} missing from its patient's admissions", record.admission_id))
        })?;
    Ok(stays.get(pos + 1).is_some_and(|next| {
        (next.admit_time.date() - discharge).num_days() <= WINDOW_DAYS
    }))
}

/// Fills in `label` for every record that lacks one. Existing labels are kept.
pub fn derive_labels(records: &mut [AdmissionRecord]) -> Result<()> {
    let mut by_patient: BTreeMap<&str, Vec<AdmissionRecord>> = BTreeMap::new();
    for r in records.iter() {
        by_patient.entry(r.patient_id.as_str()).or_default().push(r.clone());
    }
    let mut derived = Vec::with_capacity(records.len());
    for r in records.iter() {
        let label = match r.label {
            Some(l) => l,
            None => derive_label(r, &by_patient[r.patient_id.as_str()])?,
        };
        derived.push(label);
    }
    for (r, l) in records.iter_mut().zip(derived) {
        r.label = Some(l);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::testutil::record;
    use super::*;
    use chrono::Duration;

    #[test]
    fn readmission_on_day_30_is_positive() {
        let a = record("a", "p", 0, 4);
        let b = record("b", "p", 34, 38);
        assert!(derive_label(&a, &[a.clone(), b.clone()]).unwrap());
        assert!(!derive_label(&b, &[a, b.clone()]).unwrap());
    }

    #[test]
    fn readmission_on_day_31_is_negative() {
        let a = record("a", "p", 0, 4);
        let b = record("b", "p", 35, 38);
        let gap = (b.admit_time.date() - a.discharge_time.date()).num_days();
        assert_eq!(gap, 31);
        assert!(!derive_label(&a, &[a.clone(), b]).unwrap());
    }

    #[test]
    fn single_admission_survivor_is_negative() {
        let a = record("a", "p", 0, 4);
        assert!(!derive_label(&a, std::slice::from_ref(&a)).unwrap());
    }

    #[test]
    fn in_hospital_death_and_post_discharge_death_are_positive() {
        let mut a = record("a", "p", 0, 4);
        a.died_in_hospital = true;
        assert!(derive_label(&a, std::slice::from_ref(&a)).unwrap());
        let mut b = record("b", "q", 0, 4);
        b.death_date = Some(b.discharge_time.date() + Duration::days(30));
        assert!(derive_label(&b, std::slice::from_ref(&b)).unwrap());
        b.death_date = Some(b.discharge_time.date() + Duration::days(31));
        assert!(!derive_label(&b, std::slice::from_ref(&b)).unwrap());
    }

    #[test]
    fn overlapping_admissions_are_corrupt() {
        let a = record("a", "p", 0, 10);
        let b = record("b", "p", 5, 12);
        assert!(derive_label(&a, &[a.clone(), b]).is_err());
    }

    #[test]
    fn invariant_to_presentation_order() {
        let a = record("a", "p", 0, 4);
        let b = record("b", "p", 20, 24);
        let c = record("c", "p", 80, 84);
        let orders = [
            vec![a.clone(), b.clone(), c.clone()],
            vec![c.clone(), a.clone(), b.clone()],
            vec![b.clone(), c.clone(), a.clone()],
        ];
        for order in &orders {
            assert!(derive_label(&a, order).unwrap());
            assert!(!derive_label(&b, order).unwrap());
            assert!(!derive_label(&c, order).unwrap());
        }
    }

    #[test]
    fn derive_labels_keeps_explicit_labels() {
        let mut a = record("a", "p", 0, 4);
        a.label = Some(false);
        let b = record("b", "p", 10, 14);
        let mut rs = vec![a, b];
        derive_labels(&mut rs).unwrap();
        assert_eq!(rs[0].label, Some(false));
        assert_eq!(rs[1].label, Some(false));
    }
}
