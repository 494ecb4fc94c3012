//! Synthetic cohorts whose labels are linked to known, planted features.
//!
//! Labels are drawn first (`label ~ Bernoulli(readmit_rate)`) and features
//! are then drawn conditionally on the label, so the positive rate is exact
//! in expectation and the label/feature link is fully documented in the
//! returned [`SignalManifest`]. With `signal_strength == 0` every feature
//! is independent of the label.
//!
//! Admission timing is made consistent with the label: a positive admission
//! is followed by the patient's next admission within 30 days or, for the
//! patient's last admission, by death (in hospital or within 30 days of
//! discharge). `derive_label` therefore reproduces every generated label.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{AdmissionRecord, CohortDataset, DailyEvents, Demographics, ImagingStudy, LabStatus};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    /// Evidence split between an EHR lab pattern and the imaging mean.
    ModalitySplit,
    /// Label carried only by the day-over-day slope of one count feature.
    TemporalTrend,
    /// Only features 0 and 1 of each modality are informative.
    FeaturePlanted,
}

impl SignalKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SignalKind::ModalitySplit => "modality_split",
            SignalKind::TemporalTrend => "temporal_trend",
            SignalKind::FeaturePlanted => "feature_planted",
        }
    }
}

impl std::str::FromStr for SignalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modality_split" => Ok(SignalKind::ModalitySplit),
            "temporal_trend" => Ok(SignalKind::TemporalTrend),
            "feature_planted" => Ok(SignalKind::FeaturePlanted),
            other => Err(Error::Config(format!("unknown signal `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub readmit_rate: f64,
    pub signal: SignalKind,
    pub signal_strength: f64,
    pub d_img: usize,
    pub seed: u64,
    pub max_admissions_per_patient: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig::new(1000, 0.3, SignalKind::ModalitySplit, 0)
    }
}

impl SynthConfig {
    pub fn new(n_patients: usize, readmit_rate: f64, signal: SignalKind, seed: u64) -> Self {
        SynthConfig {
            n_patients,
            readmit_rate,
            signal,
            signal_strength: 1.0,
            d_img: 8,
            seed,
            max_admissions_per_patient: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients < 20 {
            return Err(Error::Config(format!("n_patients {} < 20", self.n_patients)));
        }
        if !(self.readmit_rate > 0.0 && self.readmit_rate < 1.0) {
            return Err(Error::Config(format!("readmit_rate {} outside (0, 1)", self.readmit_rate)));
        }
        if !(self.signal_strength.is_finite() && self.signal_strength >= 0.0) {
            return Err(Error::Config(format!("signal_strength {}", self.signal_strength)));
        }
        if self.d_img < 2 {
            return Err(Error::Config(format!("d_img {} < 2", self.d_img)));
        }
        if self.max_admissions_per_patient == 0 {
            return Err(Error::Config("max_admissions_per_patient must be >= 1".into()));
        }
        Ok(())
    }
}

/// Ground truth of how labels and features are linked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalManifest {
    pub signal: SignalKind,
    pub signal_strength: f64,
    pub readmit_rate: f64,
    pub seed: u64,
    pub label_model: String,
    pub planted_function: String,
    pub parameters: BTreeMap<String, f64>,
    pub informative_ehr_features: Vec<String>,
    pub informative_imaging_dims: Vec<usize>,
    pub n_admissions: usize,
    pub n_positive: usize,
}

pub struct SynthOutput {
    pub dataset: CohortDataset,
    pub manifest: SignalManifest,
}

const N_CPT: usize = 8;
const N_ICD: usize = 10;
const N_MED: usize = 6;
const N_LAB: usize = 6;
const GENDERS: [&str; 2] = ["F", "M"];
const RACES: [&str; 4] = ["asian", "black", "white", "other"];
const ETHNICITIES: [&str; 2] = ["hispanic", "non_hispanic"];

const BASE_CPT_RATE: f64 = 0.6;
const BASE_ICD_RATE: f64 = 0.3;
const BASE_MED_RATE: f64 = 1.0;
const LAB_MEASURED_PROB: f64 = 0.6;
const LAB_ABNORMAL_PROB: f64 = 0.3;

// modality_split
const SPLIT_LAB_BASE_LOGIT: f64 = -0.405_465_108_108_164_4; // logit(0.4)
const SPLIT_LAB_SHIFT: f64 = 0.8;
const SPLIT_IMG_SHIFT: f64 = 0.15;
// temporal_trend
const TREND_SLOPE: f64 = 1.0;
// feature_planted
const PLANTED_CPT_EXTRA_RATE: f64 = 2.5;
const PLANTED_IMG_SHIFT: f64 = 0.8;

fn code(prefix: &str, k: usize) -> String {
    format!("{prefix}_{k:02}")
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn manifest_for(cfg: &SynthConfig) -> SignalManifest {
    let d = cfg.signal_strength;
    let mut parameters = BTreeMap::new();
    let (planted_function, ehr, img) = match cfg.signal {
        SignalKind::ModalitySplit => {
            parameters.insert("lab_abnormal_base_logit".into(), SPLIT_LAB_BASE_LOGIT);
            parameters.insert("lab_abnormal_logit_shift".into(), SPLIT_LAB_SHIFT * d);
            parameters.insert("imaging_mean_shift".into(), SPLIT_IMG_SHIFT * d);
            (
                "s = +1 if label else -1. EHR: on every measured day, LAB_00 and LAB_01 are \
                 abnormal with probability sigmoid(lab_abnormal_base_logit + lab_abnormal_logit_shift * s). \
                 Imaging: every dimension of every radiograph ~ Normal(imaging_mean_shift * s, 1). \
                 Both modalities carry comparable, conditionally independent evidence."
                    .to_string(),
                vec![
                    "lab:LAB_00=normal".into(),
                    "lab:LAB_00=abnormal".into(),
                    "lab:LAB_01=normal".into(),
                    "lab:LAB_01=abnormal".into(),
                ],
                (0..cfg.d_img).collect(),
            )
        }
        SignalKind::TemporalTrend => {
            parameters.insert("slope_per_day".into(), TREND_SLOPE * d);
            (
                "s = +1 if label else -1. MED_00 count on a day k days before discharge = \
                 max(0, round(level + s * slope_per_day * k + noise)), level ~ U{5..8}, noise ~ U{-1,0,1}. \
                 The discharge-day value has the same law for both labels; only the trend is informative."
                    .to_string(),
                vec!["med:MED_00".into()],
                vec![],
            )
        }
        SignalKind::FeaturePlanted => {
            parameters.insert("cpt_extra_rate".into(), PLANTED_CPT_EXTRA_RATE * d);
            parameters.insert("imaging_shift".into(), PLANTED_IMG_SHIFT * d);
            (
                "y = 1 if label else 0. CPT_00 and CPT_01 daily counts ~ Poisson(0.6 + cpt_extra_rate * y); \
                 imaging dims 0 and 1 ~ Normal(imaging_shift * y, 1). Every other feature is label-independent."
                    .to_string(),
                vec!["cpt:CPT_00".into(), "cpt:CPT_01".into()],
                vec![0, 1],
            )
        }
    };
    SignalManifest {
        signal: cfg.signal,
        signal_strength: d,
        readmit_rate: cfg.readmit_rate,
        seed: cfg.seed,
        label_model: "label ~ Bernoulli(readmit_rate), independently per admission; features are \
                      drawn conditionally on the label"
            .into(),
        planted_function,
        parameters,
        informative_ehr_features: ehr,
        informative_imaging_dims: img,
        n_admissions: 0,
        n_positive: 0,
    }
}

fn poisson(rng: &mut ChaCha8Rng, rate: f64) -> u32 {
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive rate").sample(rng) as u32
}

struct AdmissionDraw<'a> {
    cfg: &'a SynthConfig,
    label: bool,
    stay_days: usize,
}

impl AdmissionDraw<'_> {
    fn sign(&self) -> f64 {
        if self.label {
            1.0
        } else {
            -1.0
        }
    }

    fn indicator(&self) -> f64 {
        if self.label {
            1.0
        } else {
            0.0
        }
    }

    fn daily_events(&self, rng: &mut ChaCha8Rng) -> Vec<DailyEvents> {
        let d = self.cfg.signal_strength;
        let level = rng.random_range(5..=8) as f64;
        (0..self.stay_days)
            .map(|day| {
                let mut ev = DailyEvents::default();
                for k in 0..N_CPT {
                    let mut rate = BASE_CPT_RATE;
                    if self.cfg.signal == SignalKind::FeaturePlanted && k < 2 {
                        rate += PLANTED_CPT_EXTRA_RATE * d * self.indicator();
                    }
                    let c = poisson(rng, rate);
                    if c > 0 {
                        ev.cpt_counts.insert(code("CPT", k), c);
                    }
                }
                for k in 0..N_ICD {
                    let c = poisson(rng, BASE_ICD_RATE);
                    if c > 0 {
                        ev.icd_counts.insert(code("ICD", k), c);
                    }
                }
                for k in 0..N_MED {
                    let c = if self.cfg.signal == SignalKind::TemporalTrend && k == 0 {
                        let before_discharge = (self.stay_days - 1 - day) as f64;
                        let noise = rng.random_range(-1..=1) as f64;
                        (level + self.sign() * TREND_SLOPE * d * before_discharge + noise)
                            .round()
                            .max(0.0) as u32
                    } else {
                        poisson(rng, BASE_MED_RATE)
                    };
                    if c > 0 {
                        ev.med_counts.insert(code("MED", k), c);
                    }
                }
                for k in 0..N_LAB {
                    if rng.random::<f64>() >= LAB_MEASURED_PROB {
                        continue;
                    }
                    let p_abnormal = if self.cfg.signal == SignalKind::ModalitySplit && k < 2 {
                        sigmoid(SPLIT_LAB_BASE_LOGIT + SPLIT_LAB_SHIFT * d * self.sign())
                    } else {
                        LAB_ABNORMAL_PROB
                    };
                    let status = if rng.random::<f64>() < p_abnormal {
                        LabStatus::Abnormal
                    } else {
                        LabStatus::Normal
                    };
                    ev.labs.insert(code("LAB", k), status);
                }
                ev
            })
            .collect()
    }

    fn imaging_features(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let d = self.cfg.signal_strength;
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        (0..self.cfg.d_img)
            .map(|k| {
                let shift = match self.cfg.signal {
                    SignalKind::ModalitySplit => SPLIT_IMG_SHIFT * d * self.sign(),
                    SignalKind::FeaturePlanted if k < 2 => PLANTED_IMG_SHIFT * d * self.indicator(),
                    _ => 0.0,
                };
                shift + noise.sample(rng)
            })
            .collect()
    }
}

pub fn generate_synthetic_cohort(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let epoch: NaiveDateTime = NaiveDate::from_ymd_opt(2019, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    let mut records = Vec::new();
    for p in 0..cfg.n_patients {
        let patient_id = format!("P{p:06}");
        let demographics = Demographics {
            age: (rng.random_range(20.0..90.0_f64) * 10.0).round() / 10.0,
            gender: GENDERS[rng.random_range(0..GENDERS.len())].to_string(),
            race: RACES[rng.random_range(0..RACES.len())].to_string(),
            ethnicity: ETHNICITIES[rng.random_range(0..ETHNICITIES.len())].to_string(),
        };
        let n_adm = if cfg.max_admissions_per_patient > 1 && rng.random::<f64>() < 0.3 {
            rng.random_range(2..=cfg.max_admissions_per_patient)
        } else {
            1
        };
        let mut day = rng.random_range(0..200_i64);
        for k in 0..n_adm {
            let label = rng.random::<f64>() < cfg.readmit_rate;
            let stay_days = rng.random_range(3..=10_usize);
            let admit_time = epoch + Duration::days(day) + Duration::hours(rng.random_range(0..12));
            let discharge_time = epoch
                + Duration::days(day + stay_days as i64 - 1)
                + Duration::hours(rng.random_range(12..=20));
            let draw = AdmissionDraw { cfg, label, stay_days };
            let daily_events = draw.daily_events(&mut rng);
            let n_img = rng.random_range(2..=6_usize);
            let stay_minutes = (discharge_time - admit_time).num_minutes();
            let mut times: Vec<i64> = (0..n_img).map(|_| rng.random_range(0..stay_minutes)).collect();
            times.sort_unstable();
            let imaging = times
                .into_iter()
                .map(|m| ImagingStudy {
                    time: admit_time + Duration::minutes(m),
                    features: draw.imaging_features(&mut rng),
                })
                .collect();
            let last = k + 1 == n_adm;
            let (mut died_in_hospital, mut death_date) = (false, None);
            let discharge_day = day + stay_days as i64 - 1;
            if last && label {
                if rng.random::<f64>() < 0.2 {
                    died_in_hospital = true;
                } else {
                    death_date = Some(discharge_time.date() + Duration::days(rng.random_range(0..=30)));
                }
            }
            let gap = if label { rng.random_range(1..=30) } else { rng.random_range(31..=180) };
            records.push(AdmissionRecord {
                admission_id: format!("{patient_id}-A{k}"),
                patient_id: patient_id.clone(),
                admit_time,
                discharge_time,
                died_in_hospital,
                demographics: demographics.clone(),
                daily_events,
                imaging,
                lace_plus: None,
                label: Some(label),
                death_date,
                admission_type: None,
                discharge_location: None,
            });
            day = discharge_day + gap;
        }
    }
    let mut manifest = manifest_for(cfg);
    manifest.n_admissions = records.len();
    manifest.n_positive = records.iter().filter(|r| r.label == Some(true)).count();
    Ok(SynthOutput { dataset: CohortDataset::new(records)?, manifest })
}
