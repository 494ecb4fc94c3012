use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AdmissionRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Admission ids per split. Every patient's admissions fall in one split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn split_of(&self) -> BTreeMap<&str, Split> {
        let mut map = BTreeMap::new();
        for (ids, s) in [(&self.train_ids, Split::Train), (&self.val_ids, Split::Val), (&self.test_ids, Split::Test)] {
            for id in ids {
                map.insert(id.as_str(), s);
            }
        }
        map
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train_ids,
            Split::Val => &self.val_ids,
            Split::Test => &self.test_ids,
        }
    }
}

/// Patient counts per split by largest remainder, each split getting at
/// least one patient.
fn allocate(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    for k in 0..3 {
        if counts[k] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            counts[donor] -= 1;
            counts[k] += 1;
        }
    }
    counts
}

/// Shuffles unique patients with `seed` and assigns each wholly to one split.
pub fn split_by_patient(records: &[AdmissionRecord], ratios: [f64; 3], seed: u64) -> Result<SplitSpec> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    let patients: Vec<&str> = records
        .iter()
        .map(|r| r.patient_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if patients.len() < 3 {
        return Err(Error::Data(format!("{} patients cannot fill 3 splits", patients.len())));
    }
    let mut shuffled = patients;
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let counts = allocate(shuffled.len(), ratios);
    let mut assignment: BTreeMap<&str, Split> = BTreeMap::new();
    let (train, rest) = shuffled.split_at(counts[0]);
    let (val, test) = rest.split_at(counts[1]);
    for (group, s) in [(train, Split::Train), (val, Split::Val), (test, Split::Test)] {
        for p in group {
            assignment.insert(p, s);
        }
    }
    let mut spec = SplitSpec { train_ids: vec![], val_ids: vec![], test_ids: vec![], seed };
    for r in records {
        let ids = match assignment[r.patient_id.as_str()] {
            Split::Train => &mut spec.train_ids,
            Split::Val => &mut spec.val_ids,
            Split::Test => &mut spec.test_ids,
        };
        ids.push(r.admission_id.clone());
    }
    for ids in [&mut spec.train_ids, &mut spec.val_ids, &mut spec.test_ids] {
        ids.sort();
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::record;
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn cohort(patients: usize, per_patient: usize) -> Vec<AdmissionRecord> {
        let mut out = Vec::new();
        for p in 0..patients {
            for k in 0..per_patient {
                let start = (k * 50) as u32;
                out.push(record(&format!("a{p}_{k}"), &format!("p{p}"), start, start + 4));
            }
        }
        out
    }

    fn patients_of(rs: &[AdmissionRecord], ids: &[String]) -> HashSet<String> {
        let ids: HashSet<&String> = ids.iter().collect();
        rs.iter().filter(|r| ids.contains(&r.admission_id)).map(|r| r.patient_id.clone()).collect()
    }

    #[test]
    fn ten_patients_split_7_1_2() {
        let rs = cohort(10, 2);
        let s = split_by_patient(&rs, [0.72, 0.08, 0.20], 5).unwrap();
        assert_eq!(patients_of(&rs, &s.train_ids).len(), 7);
        assert_eq!(patients_of(&rs, &s.val_ids).len(), 1);
        assert_eq!(patients_of(&rs, &s.test_ids).len(), 2);
        assert_eq!(s.train_ids.len() + s.val_ids.len() + s.test_ids.len(), 20);
    }

    #[test]
    fn same_seed_same_split() {
        let rs = cohort(40, 1);
        assert_eq!(
            split_by_patient(&rs, [0.72, 0.08, 0.2], 9).unwrap(),
            split_by_patient(&rs, [0.72, 0.08, 0.2], 9).unwrap()
        );
    }

    #[test]
    fn errors() {
        let rs = cohort(2, 1);
        assert!(split_by_patient(&rs, [0.72, 0.08, 0.2], 0).is_err());
        let rs = cohort(10, 1);
        assert!(split_by_patient(&rs, [0.5, 0.5, 0.0], 0).is_err());
        assert!(split_by_patient(&rs, [0.5, 0.3, 0.3], 0).is_err());
    }

    proptest! {
        #[test]
        fn no_patient_leakage(seed in any::<u64>(), n in 3usize..60, per in 1usize..4) {
            let rs = cohort(n, per);
            let s = split_by_patient(&rs, [0.72, 0.08, 0.20], seed).unwrap();
            let (a, b, c) = (patients_of(&rs, &s.train_ids), patients_of(&rs, &s.val_ids), patients_of(&rs, &s.test_ids));
            prop_assert!(a.intersection(&b).next().is_none());
            prop_assert!(a.intersection(&c).next().is_none());
            prop_assert!(b.intersection(&c).next().is_none());
            prop_assert_eq!(a.len() + b.len() + c.len(), n);
            for (got, r) in [(a.len(), 0.72), (b.len(), 0.08), (c.len(), 0.20)] {
                // Within one patient of the ratio, except where the
                // at-least-one rule forces a tiny split to exist.
                prop_assert!((got as f64 - r * n as f64).abs() <= 1.0 || got == 1);
            }
        }
    }
}
