//! Fixed-shape per-modality sequences built from admission records.
//!
//! EHR rows hold, per hospital day: CPT/ICD/medication counts, a
//! `{normal, abnormal, missing}` one-hot per lab, and the min-max scaled
//! age. Gender, race and ethnicity are kept as category indices and only
//! turned into vectors by [`embed_categoricals`], whose tables are model
//! parameters. Sequences keep the last `T` steps and pad short stays by
//! repeating the last available step.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cohort::{AdmissionRecord, LabStatus};
use crate::error::{Error, Result};
use crate::io::TensorMap;
use crate::tensor::{Tape, Tensor, Var};

pub const MIN_STEPS: usize = 3;
pub const MAX_STEPS: usize = 15;

/// Demographic fields embedded as categories, in column order.
pub const CATEGORICAL_FIELDS: [&str; 3] = ["gender", "race", "ethnicity"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DemographicCategories {
    pub gender: Vec<String>,
    pub race: Vec<String>,
    pub ethnicity: Vec<String>,
}

impl DemographicCategories {
    pub fn fields(&self) -> [&[String]; 3] {
        [&self.gender, &self.race, &self.ethnicity]
    }
}

/// Frozen code orderings; feature index and code are in bijection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EhrVocab {
    pub cpt_subgroups: Vec<String>,
    pub icd_subgroups: Vec<String>,
    pub med_classes: Vec<String>,
    pub lab_ids: Vec<String>,
    pub demographic_categories: DemographicCategories,
    /// Age scaling bounds, taken from the training split.
    pub age_min: f64,
    pub age_max: f64,
}

fn sorted_keys<'a, I: Iterator<Item = &'a String>>(it: I) -> Vec<String> {
    it.collect::<BTreeSet<_>>().into_iter().cloned().collect()
}

impl EhrVocab {
    /// Codes and categories come from every record; age bounds from the
    /// records whose ids are in `age_reference` (all records when empty).
    pub fn build(records: &[AdmissionRecord], age_reference: &[String]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from zero records".into()));
        }
        let days = || records.iter().flat_map(|r| r.daily_events.iter());
        let reference: BTreeSet<&str> = age_reference.iter().map(String::as_str).collect();
        let ages: Vec<f64> = records
            .iter()
            .filter(|r| reference.is_empty() || reference.contains(r.admission_id.as_str()))
            .map(|r| r.demographics.age)
            .collect();
        if ages.is_empty() {
            return Err(Error::Data("no records for age scaling".into()));
        }
        Ok(EhrVocab {
            cpt_subgroups: sorted_keys(days().flat_map(|d| d.cpt_counts.keys())),
            icd_subgroups: sorted_keys(days().flat_map(|d| d.icd_counts.keys())),
            med_classes: sorted_keys(days().flat_map(|d| d.med_counts.keys())),
            lab_ids: sorted_keys(days().flat_map(|d| d.labs.keys())),
            demographic_categories: DemographicCategories {
                gender: sorted_keys(records.iter().map(|r| &r.demographics.gender)),
                race: sorted_keys(records.iter().map(|r| &r.demographics.race)),
                ethnicity: sorted_keys(records.iter().map(|r| &r.demographics.ethnicity)),
            },
            age_min: ages.iter().copied().fold(f64::INFINITY, f64::min),
            age_max: ages.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }

    pub fn scaled_age(&self, age: f64) -> f64 {
        let span = self.age_max - self.age_min;
        if span <= 0.0 {
            return 0.0;
        }
        ((age - self.age_min) / span).clamp(0.0, 1.0)
    }

    /// Table rows per categorical field; row 0 is the reserved unknown row.
    pub fn category_rows(&self) -> [usize; 3] {
        self.demographic_categories.fields().map(|f| f.len() + 1)
    }

    /// Category index for `value` in field `field` (0 when unseen).
    pub fn category_index(&self, field: usize, value: &str) -> usize {
        self.demographic_categories.fields()[field]
            .iter()
            .position(|c| c == value)
            .map_or(0, |p| p + 1)
    }

    pub fn numeric_feature_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        names.extend(self.cpt_subgroups.iter().map(|c| format!("cpt:{c}")));
        names.extend(self.icd_subgroups.iter().map(|c| format!("icd:{c}")));
        names.extend(self.med_classes.iter().map(|c| format!("med:{c}")));
        for lab in &self.lab_ids {
            for state in ["normal", "abnormal", "missing"] {
                names.push(format!("lab:{lab}={state}"));
            }
        }
        names.push("age".into());
        names
    }

    pub fn n_numeric(&self) -> usize {
        self.cpt_subgroups.len() + self.icd_subgroups.len() + self.med_classes.len() + 3 * self.lab_ids.len() + 1
    }
}

fn check_steps(steps: usize, what: &str) -> Result<()> {
    if !(MIN_STEPS..=MAX_STEPS).contains(&steps) {
        return Err(Error::Config(format!("{what} = {steps} outside [{MIN_STEPS}, {MAX_STEPS}]")));
    }
    Ok(())
}

/// Index of every source step kept after last-window truncation and
/// last-value padding: `len = 2, steps = 5` gives `[0, 1, 1, 1, 1]`.
pub fn window_indices(len: usize, steps: usize) -> Vec<usize> {
    let start = len.saturating_sub(steps);
    (0..steps).map(|t| (start + t).min(len - 1)).collect()
}

/// Raw EHR rows of one admission before embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct RawEhrRows {
    /// `steps x n_numeric`, row-major.
    pub numeric: Vec<f64>,
    pub categorical: [usize; 3],
}

fn day_row(day: &crate::cohort::DailyEvents, vocab: &EhrVocab, age: f64) -> Vec<f64> {
    let mut row = Vec::with_capacity(vocab.n_numeric());
    let counts = |m: &BTreeMap<String, u32>, codes: &[String], row: &mut Vec<f64>| {
        row.extend(codes.iter().map(|c| m.get(c).copied().unwrap_or(0) as f64));
    };
    counts(&day.cpt_counts, &vocab.cpt_subgroups, &mut row);
    counts(&day.icd_counts, &vocab.icd_subgroups, &mut row);
    counts(&day.med_counts, &vocab.med_classes, &mut row);
    for lab in &vocab.lab_ids {
        let hot = match day.labs.get(lab) {
            Some(LabStatus::Normal) => [1.0, 0.0, 0.0],
            Some(LabStatus::Abnormal) => [0.0, 1.0, 0.0],
            None => [0.0, 0.0, 1.0],
        };
        row.extend(hot);
    }
    row.push(age);
    row
}

pub fn build_daily_ehr_sequence(record: &AdmissionRecord, vocab: &EhrVocab, t_ehr: usize) -> Result<RawEhrRows> {
    check_steps(t_ehr, "T_EHR")?;
    if record.daily_events.is_empty() {
        return Err(Error::Data(format!("{}: no daily EHR events", record.admission_id)));
    }
    let age = vocab.scaled_age(record.demographics.age);
    let mut numeric = Vec::with_capacity(t_ehr * vocab.n_numeric());
    for idx in window_indices(record.daily_events.len(), t_ehr) {
        numeric.extend(day_row(&record.daily_events[idx], vocab, age));
    }
    let d = &record.demographics;
    let categorical = [
        vocab.category_index(0, &d.gender),
        vocab.category_index(1, &d.race),
        vocab.category_index(2, &d.ethnicity),
    ];
    Ok(RawEhrRows { numeric, categorical })
}

/// Imaging feature rows `[t_cxr, d_img]` for one admission.
pub fn build_imaging_sequence(record: &AdmissionRecord, t_cxr: usize, d_img: usize) -> Result<Vec<f64>> {
    check_steps(t_cxr, "T_CXR")?;
    if record.imaging.is_empty() {
        return Err(Error::Data(format!("{}: no imaging studies", record.admission_id)));
    }
    if let Some(bad) = record.imaging.iter().find(|s| s.features.len() != d_img) {
        return Err(Error::Data(format!(
            "{}: imaging feature length {} != {d_img}",
            record.admission_id,
            bad.features.len()
        )));
    }
    Ok(window_indices(record.imaging.len(), t_cxr)
        .into_iter()
        .flat_map(|i| record.imaging[i].features.iter().copied())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ehr,
    Imaging,
}

/// Node-feature sequences `[N, T, D]` for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceTensor {
    pub data: Tensor,
    pub modality: Modality,
    pub feature_names: Vec<String>,
}

impl SequenceTensor {
    pub fn n_nodes(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        SequenceTensor { data: self.data.select_rows(rows), ..self.clone() }
    }
}

/// Slice at the final step, `[N, D]`.
pub fn last_step_features(seq: &SequenceTensor) -> Tensor {
    seq.data.time_step(seq.steps() - 1)
}

/// All node features of a prepared cohort, aligned to `node_ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub node_ids: Vec<String>,
    pub labels: Vec<f64>,
    /// Numeric EHR block `[N, T_EHR, n_numeric]`.
    pub ehr_numeric: SequenceTensor,
    /// Category indices per node, one column per [`CATEGORICAL_FIELDS`] entry.
    pub ehr_categorical: Vec<[usize; 3]>,
    /// Table rows per categorical field (including the unknown row).
    pub category_rows: [usize; 3],
    pub imaging: SequenceTensor,
}

impl FeatureSet {
    pub fn build(records: &[AdmissionRecord], vocab: &EhrVocab, t_ehr: usize, t_cxr: usize, d_img: usize) -> Result<Self> {
        let n = records.len();
        let dn = vocab.n_numeric();
        let mut ehr = Vec::with_capacity(n * t_ehr * dn);
        let mut img = Vec::with_capacity(n * t_cxr * d_img);
        let mut cats = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for r in records {
            let raw = build_daily_ehr_sequence(r, vocab, t_ehr)?;
            ehr.extend(raw.numeric);
            cats.push(raw.categorical);
            img.extend(build_imaging_sequence(r, t_cxr, d_img)?);
            let label = r
                .label
                .ok_or_else(|| Error::Data(format!("{}: missing label", r.admission_id)))?;
            labels.push(if label { 1.0 } else { 0.0 });
        }
        Ok(FeatureSet {
            node_ids: records.iter().map(|r| r.admission_id.clone()).collect(),
            labels,
            ehr_numeric: SequenceTensor {
                data: Tensor::new(vec![n, t_ehr, dn], ehr)?,
                modality: Modality::Ehr,
                feature_names: vocab.numeric_feature_names(),
            },
            ehr_categorical: cats,
            category_rows: vocab.category_rows(),
            imaging: SequenceTensor {
                data: Tensor::new(vec![n, t_cxr, d_img], img)?,
                modality: Modality::Imaging,
                feature_names: (0..d_img).map(|k| format!("img:{k}")).collect(),
            },
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    /// Rows `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        FeatureSet {
            node_ids: rows.iter().map(|&i| self.node_ids[i].clone()).collect(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            ehr_numeric: self.ehr_numeric.subset(rows),
            ehr_categorical: rows.iter().map(|&i| self.ehr_categorical[i]).collect(),
            category_rows: self.category_rows,
            imaging: self.imaging.subset(rows),
        }
    }

    /// Names of the embedded EHR columns seen by the model.
    pub fn ehr_feature_names(&self, d_cat: usize) -> Vec<String> {
        let mut names = self.ehr_numeric.feature_names.clone();
        for field in CATEGORICAL_FIELDS {
            names.extend((0..d_cat).map(|k| format!("{field}#{k}")));
        }
        names
    }

    pub fn ehr_dim(&self, d_cat: usize) -> usize {
        self.ehr_numeric.dim() + CATEGORICAL_FIELDS.len() * d_cat
    }

    /// Tensor blocks and the metadata needed to restore them.
    pub fn to_parts(&self) -> Result<(TensorMap, FeaturesMeta)> {
        let n = self.n_nodes();
        let cats = self.ehr_categorical.iter().flat_map(|c| c.map(|v| v as f64)).collect();
        let mut map = TensorMap::new();
        map.insert("ehr_numeric".into(), self.ehr_numeric.data.clone());
        map.insert("ehr_categorical".into(), Tensor::new(vec![n, 3], cats)?);
        map.insert("imaging".into(), self.imaging.data.clone());
        map.insert("labels".into(), Tensor::new(vec![n], self.labels.clone())?);
        let meta = FeaturesMeta {
            node_ids: self.node_ids.clone(),
            ehr_feature_names: self.ehr_numeric.feature_names.clone(),
            imaging_feature_names: self.imaging.feature_names.clone(),
            category_rows: self.category_rows,
        };
        Ok((map, meta))
    }

    pub fn from_parts(mut map: TensorMap, meta: FeaturesMeta) -> Result<Self> {
        let mut take = |name: &str| map.remove(name).ok_or_else(|| Error::Data(format!("feature block `{name}` missing")));
        let (ehr, cats, img, labels) = (take("ehr_numeric")?, take("ehr_categorical")?, take("imaging")?, take("labels")?);
        let n = meta.node_ids.len();
        let ok = ehr.ndim() == 3
            && img.ndim() == 3
            && ehr.shape()[0] == n
            && img.shape()[0] == n
            && cats.shape() == [n, 3]
            && labels.shape() == [n]
            && ehr.shape()[2] == meta.ehr_feature_names.len()
            && img.shape()[2] == meta.imaging_feature_names.len();
        if !ok {
            return Err(Error::Data("feature blocks disagree with their metadata".into()));
        }
        Ok(FeatureSet {
            labels: labels.into_data(),
            ehr_categorical: cats.data().chunks(3).map(|c| [c[0] as usize, c[1] as usize, c[2] as usize]).collect(),
            category_rows: meta.category_rows,
            ehr_numeric: SequenceTensor { data: ehr, modality: Modality::Ehr, feature_names: meta.ehr_feature_names },
            imaging: SequenceTensor { data: img, modality: Modality::Imaging, feature_names: meta.imaging_feature_names },
            node_ids: meta.node_ids,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturesMeta {
    pub node_ids: Vec<String>,
    pub ehr_feature_names: Vec<String>,
    pub imaging_feature_names: Vec<String>,
    pub category_rows: [usize; 3],
}

/// Per-step EHR inputs `[N, n_numeric + 3 * d_cat]`: the numeric block of
/// step `t` followed by each categorical field's embedding rows. `tables`
/// are the embedding matrices in [`CATEGORICAL_FIELDS`] order.
pub fn embed_categoricals(
    tape: &mut Tape,
    numeric: &Tensor,
    categorical: &[[usize; 3]],
    tables: [Var; 3],
) -> Result<Vec<Var>> {
    let mut embedded = Vec::with_capacity(3);
    for (field, table) in tables.into_iter().enumerate() {
        let idx: Vec<usize> = categorical.iter().map(|c| c[field]).collect();
        // Out-of-range indices fall back to the reserved unknown row.
        let rows = tape.shape(table)[0];
        let idx: Vec<usize> = idx.into_iter().map(|i| if i < rows { i } else { 0 }).collect();
        embedded.push(tape.gather_rows(table, &idx)?);
    }
    sequence_steps(tape, numeric)
        .into_iter()
        .map(|x| tape.concat(&[x, embedded[0], embedded[1], embedded[2]]))
        .collect()
}

/// Per-step constant inputs of a sequence.
pub fn sequence_steps(tape: &mut Tape, seq: &Tensor) -> Vec<Var> {
    (0..seq.shape()[1]).map(|t| tape.constant(seq.time_step(t))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::testutil::{at, record};
    use crate::cohort::{DailyEvents, ImagingStudy};

    fn vocab_for(rs: &[AdmissionRecord]) -> EhrVocab {
        EhrVocab::build(rs, &[]).unwrap()
    }

    fn counted(id: &str, days: usize) -> AdmissionRecord {
        let mut r = record(id, id, 0, days as u32 - 1);
        r.daily_events = (0..days)
            .map(|d| {
                let mut ev = DailyEvents::default();
                ev.med_counts.insert("M".into(), d as u32 + 1);
                ev
            })
            .collect();
        r
    }

    fn med_column(raw: &RawEhrRows, vocab: &EhrVocab) -> Vec<f64> {
        raw.numeric.chunks(vocab.n_numeric()).map(|row| row[0]).collect()
    }

    #[test]
    fn window_truncates_and_pads() {
        assert_eq!(window_indices(2, 5), vec![0, 1, 1, 1, 1]);
        assert_eq!(window_indices(9, 5), vec![4, 5, 6, 7, 8]);
        assert_eq!(window_indices(5, 5), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn short_stay_pads_with_last_day() {
        let r = counted("a", 2);
        let v = vocab_for(std::slice::from_ref(&r));
        let raw = build_daily_ehr_sequence(&r, &v, 5).unwrap();
        assert_eq!(med_column(&raw, &v), vec![1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn long_stay_keeps_last_days() {
        let r = counted("a", 9);
        let v = vocab_for(std::slice::from_ref(&r));
        let raw = build_daily_ehr_sequence(&r, &v, 5).unwrap();
        assert_eq!(med_column(&raw, &v), vec![5.0, 6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn empty_day_is_zero_counts_and_missing_labs() {
        let mut r = counted("a", 3);
        r.daily_events[0].labs.insert("L".into(), LabStatus::Normal);
        r.daily_events[2] = DailyEvents::default();
        let v = vocab_for(std::slice::from_ref(&r));
        let raw = build_daily_ehr_sequence(&r, &v, 3).unwrap();
        let names = v.numeric_feature_names();
        let last = &raw.numeric[2 * v.n_numeric()..];
        let col = |n: &str| last[names.iter().position(|x| x == n).unwrap()];
        assert_eq!(col("med:M"), 0.0);
        assert_eq!((col("lab:L=normal"), col("lab:L=abnormal"), col("lab:L=missing")), (0.0, 0.0, 1.0));
        let first = &raw.numeric[..v.n_numeric()];
        assert_eq!(first[names.iter().position(|x| x == "lab:L=normal").unwrap()], 1.0);
        assert_eq!(raw.categorical, [1, 1, 1]);
    }

    #[test]
    fn bad_inputs_error() {
        let r = counted("a", 3);
        let v = vocab_for(std::slice::from_ref(&r));
        assert!(build_daily_ehr_sequence(&r, &v, 2).is_err());
        assert!(build_daily_ehr_sequence(&r, &v, 16).is_err());
        let mut e = r.clone();
        e.daily_events.clear();
        assert!(build_daily_ehr_sequence(&e, &v, 3).is_err());
        assert!(build_imaging_sequence(&r, 4, 3).is_err());
    }

    #[test]
    fn imaging_pads_and_truncates() {
        let mut r = record("a", "a", 0, 4);
        let pad = build_imaging_sequence(&r, 4, 2).unwrap();
        assert_eq!(pad, vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        r.imaging = (0..7)
            .map(|k| ImagingStudy { time: at(0, k), features: vec![k as f64, -(k as f64)] })
            .collect();
        let tail = build_imaging_sequence(&r, 4, 2).unwrap();
        let expected: Vec<f64> = (3..7).flat_map(|k| [k as f64, -(k as f64)]).collect();
        assert_eq!(tail, expected);
    }

    #[test]
    fn unseen_category_maps_to_unknown_row() {
        let r = counted("a", 3);
        let v = vocab_for(std::slice::from_ref(&r));
        assert_eq!(v.category_index(0, "F"), 1);
        assert_eq!(v.category_index(0, "X"), 0);
        assert_eq!(v.category_rows(), [2, 2, 2]);
    }

    #[test]
    fn age_is_scaled_with_reference_bounds() {
        let mut a = counted("a", 3);
        a.demographics.age = 40.0;
        let mut b = counted("b", 3);
        b.demographics.age = 80.0;
        let mut c = counted("c", 3);
        c.demographics.age = 100.0;
        let v = EhrVocab::build(&[a, b, c], &["a".into(), "b".into()]).unwrap();
        assert_eq!(v.scaled_age(60.0), 0.5);
        assert_eq!(v.scaled_age(100.0), 1.0);
    }

    #[test]
    fn embedding_substitutes_table_rows() {
        let r = counted("a", 3);
        let v = vocab_for(std::slice::from_ref(&r));
        let rs: Vec<AdmissionRecord> = (0..2)
            .map(|k| AdmissionRecord { admission_id: format!("n{k}"), label: Some(true), ..r.clone() })
            .collect();
        let fs = FeatureSet::build(&rs, &v, 3, 3, 2).unwrap();
        let mut tape = Tape::new();
        let tables = [0.3, 0.5, 0.7].map(|x| tape.leaf(Tensor::from_fn(&[2, 1], |k| if k == 1 { x } else { -1.0 })));
        let steps = embed_categoricals(&mut tape, &fs.ehr_numeric.data, &fs.ehr_categorical, tables).unwrap();
        assert_eq!(steps.len(), 3);
        let x = tape.value(steps[0]);
        assert_eq!(x.shape(), &[2, v.n_numeric() + 3]);
        assert_eq!(&x.row(0)[v.n_numeric()..], &[0.3, 0.5, 0.7]);
        assert_eq!(x.row(0), x.row(1));
    }

    #[test]
    fn last_step_matches_index() {
        let seq = SequenceTensor {
            data: Tensor::from_fn(&[3, 4, 2], |k| (k * 7 % 11) as f64),
            modality: Modality::Imaging,
            feature_names: vec!["a".into(), "b".into()],
        };
        let last = last_step_features(&seq);
        for i in 0..3 {
            for d in 0..2 {
                assert_eq!(last.at(i, d), seq.data.data()[(i * 4 + 3) * 2 + d]);
            }
        }
    }

    #[test]
    fn parts_roundtrip_through_disk() {
        let mut rs = vec![record("a", "p1", 1, 4), record("b", "p2", 2, 6)];
        rs[0].label = Some(true);
        rs[1].label = Some(false);
        let f = FeatureSet::build(&rs, &vocab_for(&rs), 3, 3, 2).unwrap();
        let (map, meta) = f.to_parts().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        crate::io::save_tensors(&path, &map).unwrap();
        let back = FeatureSet::from_parts(crate::io::load_tensors(&path).unwrap(), meta.clone()).unwrap();
        assert_eq!(back, f);
        let mut short = meta;
        short.node_ids.pop();
        assert!(FeatureSet::from_parts(map, short).is_err());
    }
}
