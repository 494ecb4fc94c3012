//! Discrimination metrics for binary risk scores.
//!
//! AUROC is the Mann-Whitney statistic counted in integers, so it is exact
//! for any tie structure. DeLong variances come from the structural
//! (placement) components of each score vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const Z_975: f64 = 1.959963984540054;

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape("metrics", format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {s}")));
    }
    let p = labels.iter().filter(|&&l| l).count();
    Ok((p, labels.len() - p))
}

fn check_both_classes(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    let (p, n) = check(scores, labels)?;
    if p == 0 || n == 0 {
        return Err(Error::Data(format!("need both classes, got {p} positives and {n} negatives")));
    }
    Ok((p, n))
}

fn sorted(v: Vec<f64>) -> Vec<f64> {
    let mut v = v;
    v.sort_by(f64::total_cmp);
    v
}

/// Doubled placement counts: for each element of `xs`, `2 * #{y < x} + #{y == x}`
/// over `ys`.
fn doubled_placements(xs: &[f64], ys_sorted: &[f64]) -> Vec<u64> {
    xs.iter()
        .map(|&x| {
            let below = ys_sorted.partition_point(|&y| y < x);
            let upto = ys_sorted.partition_point(|&y| y <= x);
            (2 * below + (upto - below)) as u64
        })
        .collect()
}

fn split_classes(scores: &[f64], labels: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let pos = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    (pos, neg)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (p, n) = check_both_classes(scores, labels)?;
    let (pos, neg) = split_classes(scores, labels);
    let twice: u64 = doubled_placements(&pos, &sorted(neg)).iter().sum();
    Ok(twice as f64 / (2 * p * n) as f64)
}

/// Structural components of one score vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Placements {
    /// Per positive: fraction of negatives it outranks (ties one half).
    pub v10: Vec<f64>,
    /// Per negative: fraction of positives that outrank it.
    pub v01: Vec<f64>,
    pub auroc: f64,
}

pub fn placements(scores: &[f64], labels: &[bool]) -> Result<Placements> {
    let (p, n) = check_both_classes(scores, labels)?;
    let (pos, neg) = split_classes(scores, labels);
    let d10 = doubled_placements(&pos, &sorted(neg.clone()));
    let pos_sorted = sorted(pos);
    // For a negative y: 2 * #{x > y} + #{x == y}.
    let d01: Vec<u64> = doubled_placements(&neg, &pos_sorted).iter().map(|&d| (2 * p) as u64 - d).collect();
    let total: u64 = d10.iter().sum();
    Ok(Placements {
        v10: d10.iter().map(|&d| d as f64 / (2 * n) as f64).collect(),
        v01: d01.iter().map(|&d| d as f64 / (2 * p) as f64).collect(),
        auroc: total as f64 / (2 * p * n) as f64,
    })
}

fn sample_cov(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len();
    if k < 2 {
        return 0.0;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / k as f64, b.iter().sum::<f64>() / k as f64);
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (k - 1) as f64
}

fn ci(auc: f64, var: f64) -> [f64; 2] {
    let half = Z_975 * var.max(0.0).sqrt();
    [(auc - half).max(0.0), (auc + half).min(1.0)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AurocInterval {
    pub auroc: f64,
    pub variance: f64,
    pub ci95: [f64; 2],
}

/// DeLong variance and 95% interval for one score vector.
pub fn delong_single(scores: &[f64], labels: &[bool]) -> Result<AurocInterval> {
    let pl = placements(scores, labels)?;
    let var = sample_cov(&pl.v10, &pl.v10) / pl.v10.len() as f64 + sample_cov(&pl.v01, &pl.v01) / pl.v01.len() as f64;
    Ok(AurocInterval { auroc: pl.auroc, variance: var, ci95: ci(pl.auroc, var) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelongResult {
    pub auroc_a: f64,
    pub auroc_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub cov: f64,
    pub z: f64,
    pub p_value: f64,
    pub ci_a: [f64; 2],
    pub ci_b: [f64; 2],
}

/// Two-sided DeLong test of equal AUROC for paired score vectors.
pub fn delong(scores_a: &[f64], scores_b: &[f64], labels: &[bool]) -> Result<DelongResult> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::shape("delong", format!("{} vs {} scores", scores_a.len(), scores_b.len())));
    }
    let a = placements(scores_a, labels)?;
    let b = placements(scores_b, labels)?;
    let (p, n) = (a.v10.len() as f64, a.v01.len() as f64);
    let var_a = sample_cov(&a.v10, &a.v10) / p + sample_cov(&a.v01, &a.v01) / n;
    let var_b = sample_cov(&b.v10, &b.v10) / p + sample_cov(&b.v01, &b.v01) / n;
    let cov = sample_cov(&a.v10, &b.v10) / p + sample_cov(&a.v01, &b.v01) / n;
    let var_diff = var_a + var_b - 2.0 * cov;
    // Relative floor: rounding leaves ~1e-17 residue for identical vectors.
    let scale = var_a.abs() + var_b.abs();
    if !(var_diff > 1e-12 * scale) || !(var_diff > 0.0) {
        return Err(Error::DegenerateComparison(format!(
            "variance of the AUROC difference is {var_diff:e}; the score vectors rank identically"
        )));
    }
    let z = (a.auroc - b.auroc) / var_diff.sqrt();
    let p_value = libm::erfc(z.abs() / std::f64::consts::SQRT_2);
    Ok(DelongResult {
        auroc_a: a.auroc,
        auroc_b: b.auroc,
        var_a,
        var_b,
        cov,
        z,
        p_value,
        ci_a: ci(a.auroc, var_a),
        ci_b: ci(b.auroc, var_b),
    })
}

/// Confusion counts when predicting positive for `score >= cut`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Counts {
    tp: usize,
    fp: usize,
    tn: usize,
    fn_: usize,
}

/// Distinct scores in descending order with cumulative counts at each cut.
fn sweep(scores: &[f64], labels: &[bool]) -> Vec<(f64, Counts)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let p = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - p;
    let (mut tp, mut fp) = (0, 0);
    let mut out: Vec<(f64, Counts)> = Vec::new();
    let mut k = 0;
    while k < idx.len() {
        let s = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == s {
            if labels[idx[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        out.push((s, Counts { tp, fp, tn: n - fp, fn_: p - tp }));
    }
    out
}

/// Step-wise average precision over descending distinct thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (p, _) = check(scores, labels)?;
    if p == 0 {
        return Err(Error::Data("average precision needs at least one positive".into()));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (_, c) in sweep(scores, labels) {
        let recall = c.tp as f64 / p as f64;
        let precision = c.tp as f64 / (c.tp + c.fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Thresholds above every score are written as null (empty in CSV).
mod open_threshold {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    #[serde(with = "open_threshold")]
    pub threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub threshold: f64,
}

/// ROC vertices from `(0, 0)` (threshold `+inf`) down to `(1, 1)`.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let (p, n) = check_both_classes(scores, labels)?;
    let mut pts = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    pts.extend(sweep(scores, labels).into_iter().map(|(s, c)| RocPoint {
        fpr: c.fp as f64 / n as f64,
        tpr: c.tp as f64 / p as f64,
        threshold: s,
    }));
    Ok(pts)
}

pub fn pr_points(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    let (p, _) = check(scores, labels)?;
    if p == 0 {
        return Err(Error::Data("precision-recall needs at least one positive".into()));
    }
    Ok(sweep(scores, labels)
        .into_iter()
        .map(|(s, c)| PrPoint {
            recall: c.tp as f64 / p as f64,
            precision: c.tp as f64 / (c.tp + c.fp) as f64,
            threshold: s,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct YoudenPoint {
    /// Decision threshold: midpoint between the chosen cut score and the
    /// next lower distinct score (the cut itself when it is the lowest).
    pub threshold: f64,
    pub cut_score: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub j: f64,
}

/// Cut-point maximizing `sensitivity + specificity - 1`; ties go to the
/// higher cut (higher specificity).
pub fn youden(scores: &[f64], labels: &[bool]) -> Result<YoudenPoint> {
    let (p, n) = check_both_classes(scores, labels)?;
    let cuts = sweep(scores, labels);
    // J scaled by p * n stays an integer: tp * n + tn * p - p * n.
    let score = |c: &Counts| (c.tp * n + c.tn * p) as i128 - (p * n) as i128;
    let mut best = 0;
    for k in 1..cuts.len() {
        if score(&cuts[k].1) > score(&cuts[best].1) {
            best = k;
        }
    }
    let (cut, c) = cuts[best];
    let threshold = cuts.get(best + 1).map_or(cut, |(lower, _)| 0.5 * (cut + lower));
    let sensitivity = c.tp as f64 / p as f64;
    let specificity = c.tn as f64 / n as f64;
    Ok(YoudenPoint { threshold, cut_score: cut, sensitivity, specificity, j: sensitivity + specificity - 1.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub sens_target: f64,
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// `None` when no admission is predicted positive.
    pub ppv: Option<f64>,
    /// `None` when no admission is predicted negative.
    pub npv: Option<f64>,
}

/// Highest cut-point (`score >= threshold` is positive) whose sensitivity
/// reaches `sens_target`, which gives the best specificity at that target.
pub fn operating_point(scores: &[f64], labels: &[bool], sens_target: f64) -> Result<OperatingPoint> {
    if !(0.0..=1.0).contains(&sens_target) {
        return Err(Error::Config(format!("sensitivity target {sens_target} outside [0, 1]")));
    }
    let (p, n) = check_both_classes(scores, labels)?;
    let cuts = sweep(scores, labels);
    let (threshold, c) = cuts
        .iter()
        .copied()
        .find(|(_, c)| c.tp as f64 / p as f64 >= sens_target)
        .unwrap_or(*cuts.last().unwrap());
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(OperatingPoint {
        sens_target,
        threshold,
        sensitivity: c.tp as f64 / p as f64,
        specificity: c.tn as f64 / n as f64,
        ppv: ratio(c.tp, c.tp + c.fp),
        npv: ratio(c.tn, c.tn + c.fn_),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub vs: String,
    pub auroc_other: f64,
    pub z: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub n_positive: usize,
    pub auroc: f64,
    pub auroc_ci95: [f64; 2],
    pub average_precision: f64,
    pub operating_point: OperatingPoint,
    pub youden_threshold: f64,
    pub youden: YoudenPoint,
    pub roc_points: Vec<RocPoint>,
    pub pr_points: Vec<PrPoint>,
    pub delong_comparisons: Vec<Comparison>,
}

impl EvalReport {
    pub fn compute(scores: &[f64], labels: &[bool], sens_target: f64) -> Result<Self> {
        let single = delong_single(scores, labels)?;
        let y = youden(scores, labels)?;
        Ok(EvalReport {
            n: scores.len(),
            n_positive: labels.iter().filter(|&&l| l).count(),
            auroc: single.auroc,
            auroc_ci95: single.ci95,
            average_precision: average_precision(scores, labels)?,
            operating_point: operating_point(scores, labels, sens_target)?,
            youden_threshold: y.threshold,
            youden: y,
            roc_points: roc_points(scores, labels)?,
            pr_points: pr_points(scores, labels)?,
            delong_comparisons: Vec::new(),
        })
    }

    pub fn add_comparison(&mut self, name: &str, scores: &[f64], other: &[f64], labels: &[bool]) -> Result<()> {
        let d = delong(scores, other, labels)?;
        self.delong_comparisons.push(Comparison { vs: name.into(), auroc_other: d.auroc_b, z: d.z, p_value: d.p_value });
        Ok(())
    }
}
