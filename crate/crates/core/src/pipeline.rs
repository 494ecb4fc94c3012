//! Glue from a cohort to prepared features, graphs, trained models and reports.

use serde::{Deserialize, Serialize};

use crate::cohort::{apply_inclusion, split_by_patient, AdmissionRecord, CohortDataset, InclusionCriteria, InclusionReport, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::features::{EhrVocab, FeatureSet};
use crate::graph::{AdmissionGraph, GraphConfig};
use crate::metrics::EvalReport;
use crate::model::{InputDims, Model, ModelKind, ModelSpec, PredictionRow, PredictionVector};
use crate::nn::GraphCtx;
use crate::train::{fit, ModelObjective, TrainConfig, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepareConfig {
    pub inclusion: InclusionCriteria,
    pub split_ratios: [f64; 3],
    pub t_ehr: usize,
    pub t_cxr: usize,
    pub seed: u64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig { inclusion: InclusionCriteria::default(), split_ratios: [0.7, 0.15, 0.15], t_ehr: 5, t_cxr: 5, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub records: Vec<AdmissionRecord>,
    pub inclusion: InclusionReport,
    pub vocab: EhrVocab,
    pub split: SplitSpec,
    pub features: FeatureSet,
}

/// Inclusion, patient-level split, vocabulary (age range from training
/// admissions only) and feature tensors.
pub fn prepare(dataset: &CohortDataset, cfg: &PrepareConfig) -> Result<Prepared> {
    let (records, inclusion) = apply_inclusion(&dataset.records, &cfg.inclusion);
    if records.is_empty() {
        return Err(Error::Data("no admission survives inclusion".into()));
    }
    let split = split_by_patient(&records, cfg.split_ratios, cfg.seed)?;
    let vocab = EhrVocab::build(&records, &split.train_ids)?;
    let features = FeatureSet::build(&records, &vocab, cfg.t_ehr, cfg.t_cxr, dataset.d_img)?;
    Ok(Prepared { records, inclusion, vocab, split, features })
}

/// Node indices of each split, in node order.
pub fn split_indices(node_ids: &[String], split: &SplitSpec) -> Result<[Vec<usize>; 3]> {
    let of = split.split_of();
    let mut out: [Vec<usize>; 3] = Default::default();
    for (k, id) in node_ids.iter().enumerate() {
        let s = of.get(id.as_str()).ok_or_else(|| Error::Data(format!("admission {id} missing from split")))?;
        out[*s as usize].push(k);
    }
    Ok(out)
}

impl Prepared {
    pub fn indices(&self) -> Result<[Vec<usize>; 3]> {
        split_indices(&self.features.node_ids, &self.split)
    }

    /// Features at the requested sequence lengths, rebuilt from the included
    /// records when they differ from the stored tensors.
    pub fn features_at(&self, t_ehr: usize, t_cxr: usize) -> Result<FeatureSet> {
        let f = &self.features;
        if f.ehr_numeric.steps() == t_ehr && f.imaging.steps() == t_cxr {
            return Ok(f.clone());
        }
        FeatureSet::build(&self.records, &self.vocab, t_ehr, t_cxr, f.imaging.dim())
    }

    /// One graph over all nodes, or with `inductive` one graph per split.
    pub fn build_graph(&self, cfg: GraphConfig, inductive: bool) -> Result<AdmissionGraph> {
        if inductive {
            let groups = self.indices()?;
            AdmissionGraph::build_blocks(&self.records, &groups, &self.vocab, cfg)
        } else {
            AdmissionGraph::build(&self.records, &self.vocab, cfg)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub outcome: TrainOutcome,
}

impl Trained {
    pub fn predict(&self, features: &FeatureSet, graph: &AdmissionGraph) -> Result<PredictionVector> {
        self.model.predict(&self.outcome.params, features, &GraphCtx::new(graph.neighborhood()?))
    }
}

pub fn train_model(
    kind: ModelKind,
    cfg: &TrainConfig,
    features: &FeatureSet,
    graph: &AdmissionGraph,
    train_idx: &[usize],
    val_idx: &[usize],
    seed: u64,
) -> Result<Trained> {
    cfg.validate()?;
    if graph.node_ids != features.node_ids {
        return Err(Error::Data("graph nodes do not match feature rows".into()));
    }
    let model = Model::new(ModelSpec { config: cfg.model_config(kind), dims: InputDims::of(features) })?;
    let ctx = GraphCtx::new(graph.neighborhood()?);
    let mut objective = ModelObjective::new(&model, features, &ctx, train_idx, val_idx, seed);
    let outcome = fit(model.init_params(seed), &mut objective, &cfg.fit_config())?;
    log::info!(
        "{kind}: best epoch {} (val loss {:.5}), stop {:?}",
        outcome.best_epoch,
        outcome.best_val_loss,
        outcome.stop
    );
    Ok(Trained { model, outcome })
}

pub fn prediction_rows(pred: &PredictionVector, labels: &[f64], split: &SplitSpec) -> Result<Vec<PredictionRow>> {
    let of = split.split_of();
    pred.node_ids
        .iter()
        .enumerate()
        .map(|(k, id)| {
            let s = of.get(id.as_str()).ok_or_else(|| Error::Data(format!("admission {id} missing from split")))?;
            Ok(PredictionRow {
                admission_id: id.clone(),
                logit: pred.logits[k],
                probability: pred.probabilities[k],
                label: u8::from(labels[k] > 0.5),
                split: s.as_str().to_string(),
            })
        })
        .collect()
}

/// Probabilities and labels of the rows in `split`.
pub fn scores_for(rows: &[PredictionRow], split: Split) -> (Vec<f64>, Vec<bool>) {
    rows.iter().filter(|r| r.split == split.as_str()).map(|r| (r.probability, r.label == 1)).unzip()
}

pub fn evaluate(rows: &[PredictionRow], split: Split, sens_target: f64) -> Result<EvalReport> {
    let (scores, labels) = scores_for(rows, split);
    if scores.is_empty() {
        return Err(Error::Data(format!("no predictions in split `{}`", split.as_str())));
    }
    EvalReport::compute(&scores, &labels, sens_target)
}
