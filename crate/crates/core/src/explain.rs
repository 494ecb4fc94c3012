//! Mask-based explanations for a single node: one mask over the edges of its
//! k-hop subgraph and one column mask per input modality.

use std::collections::{BTreeMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::graph::AdmissionGraph;
use crate::model::{sigmoid, FeatureMasks, Model};
use crate::nn::{GraphCtx, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{adam_step, AdamState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub k_hops: usize,
    pub mask_epochs: usize,
    pub lr: f64,
    pub lambda_size_edge: f64,
    pub lambda_size_feat: f64,
    pub lambda_entropy: f64,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            k_hops: 1,
            mask_epochs: 200,
            lr: 0.01,
            lambda_size_edge: 0.005,
            lambda_size_feat: 0.1,
            lambda_entropy: 0.1,
            seed: 0,
        }
    }
}

impl ExplainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_hops == 0 {
            return Err(Error::Config("k_hops must be >= 1".into()));
        }
        if self.mask_epochs == 0 || !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("mask_epochs {} / lr {}", self.mask_epochs, self.lr)));
        }
        for (name, v) in [
            ("lambda_size_edge", self.lambda_size_edge),
            ("lambda_size_feat", self.lambda_size_feat),
            ("lambda_entropy", self.lambda_entropy),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Induced k-hop neighbourhood of one node. Local index 0 is the center.
#[derive(Clone, Debug, PartialEq)]
pub struct Subgraph {
    /// Global node indices in BFS order.
    pub nodes: Vec<usize>,
    pub graph: AdmissionGraph,
}

pub fn extract_khop_subgraph(graph: &AdmissionGraph, node: usize, k: usize) -> Result<Subgraph> {
    let n = graph.n_nodes();
    if node >= n {
        return Err(Error::Data(format!("node {node} outside graph of {n} nodes")));
    }
    let mut adj = vec![Vec::new(); n];
    for &(i, j, _) in &graph.edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    adj.iter_mut().for_each(|a| a.sort_unstable());
    let mut depth = vec![usize::MAX; n];
    depth[node] = 0;
    let mut order = vec![node];
    let mut queue = VecDeque::from([node]);
    while let Some(u) = queue.pop_front() {
        if depth[u] == k {
            continue;
        }
        for &v in &adj[u] {
            if depth[v] == usize::MAX {
                depth[v] = depth[u] + 1;
                order.push(v);
                queue.push_back(v);
            }
        }
    }
    Ok(Subgraph { graph: graph.induced(&order), nodes: order })
}

/// Hops that fully cover a node's dependence on the rest of the graph.
///
/// Each STGNN step reaches two hops (the candidate gate aggregates `r * h`,
/// and `r` is itself aggregated), so a subgraph of this radius plus one
/// reproduces full-graph predictions exactly.
pub fn receptive_hops(model: &Model) -> usize {
    let d = model.spec.dims;
    let l = model.spec.config.n_layers;
    use crate::model::ModelKind::*;
    match model.kind() {
        MmStgnn | StgnnEhr | StgnnImg => 2 * l * d.t_ehr.max(d.t_cxr),
        MmGnn | Gnn => l,
        Lstm => 0,
    }
}

/// Optimized mask values, all in (0, 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationMasks {
    pub center_node: String,
    /// Full-graph probability of the center node.
    pub prediction: f64,
    pub target_class: u8,
    pub subgraph_nodes: Vec<String>,
    /// Subgraph edges as global node ids.
    pub edges: Vec<(String, String)>,
    pub edge_mask: Vec<f64>,
    pub ehr_feature_names: Vec<String>,
    pub feat_mask_ehr: Vec<f64>,
    pub imaging_feature_names: Vec<String>,
    pub feat_mask_img: Vec<f64>,
    /// Objective value per mask epoch.
    pub objective: Vec<f64>,
}

/// Mask values applied in a forward pass; `None` means no mask.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskValues {
    pub edge: Option<Vec<f64>>,
    pub ehr: Option<Vec<f64>>,
    pub img: Option<Vec<f64>>,
}

/// Center-node probability on `sub` with fixed mask values.
pub fn masked_prediction(
    model: &Model,
    params: &ParamStore,
    features: &FeatureSet,
    sub: &Subgraph,
    masks: &MaskValues,
) -> Result<f64> {
    let sub_features = features.subset(&sub.nodes);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let mut consts = |v: &Option<Vec<f64>>| -> Result<Option<Var>> {
        v.as_ref().map(|x| Tensor::new(vec![x.len()], x.clone()).map(|t| tape.constant(t))).transpose()
    };
    let edge = consts(&masks.edge)?;
    let fm = FeatureMasks { ehr: consts(&masks.ehr)?, imaging: consts(&masks.img)? };
    let mut g = GraphCtx::new(sub.graph.neighborhood()?);
    g.edge_scale = edge;
    let logits = model.forward(&mut tape, &p, &sub_features, &g, fm, None)?;
    Ok(sigmoid(tape.value(logits).data()[0]))
}

/// `mean(p) * size + mean(H(p)) * entropy` for `p = sigmoid(z)`.
pub fn mask_penalty(tape: &mut Tape, z: Var, size: f64, entropy: f64) -> Result<Var> {
    let p = tape.sigmoid(z);
    let q = tape.one_minus(p);
    let neg_z = tape.scale(z, -1.0);
    // -ln p = softplus(-z), -ln(1-p) = softplus(z)
    let nl_p = tape.softplus(neg_z);
    let nl_q = tape.softplus(z);
    let a = tape.hadamard(p, nl_p)?;
    let b = tape.hadamard(q, nl_q)?;
    let h = tape.add(a, b)?;
    let mp = tape.mean(p);
    let mh = tape.mean(h);
    let sp = tape.scale(mp, size);
    let sh = tape.scale(mh, entropy);
    tape.add(sp, sh)
}

const EDGE: &str = "edge";
const EHR: &str = "ehr";
const IMG: &str = "img";

/// Optimizes masks for `node` (a row of `features`) against the model's
/// own predicted class. Model parameters are only read.
pub fn explain_node(
    model: &Model,
    params: &ParamStore,
    features: &FeatureSet,
    graph: &AdmissionGraph,
    node: usize,
    cfg: &ExplainConfig,
) -> Result<ExplanationMasks> {
    cfg.validate()?;
    if graph.node_ids != features.node_ids {
        return Err(Error::Data("graph nodes do not match feature rows".into()));
    }
    let full = model.predict(params, features, &GraphCtx::new(graph.neighborhood()?))?;
    let prediction = full.probabilities[node];
    let target_class = u8::from(prediction >= 0.5);

    let sub = extract_khop_subgraph(graph, node, cfg.k_hops)?;
    let sub_features = features.subset(&sub.nodes);
    let nb = sub.graph.neighborhood()?;
    let mut targets = vec![0.0; sub.nodes.len()];
    targets[0] = f64::from(target_class);

    let kind = model.kind();
    let ehr_names = if kind.uses_ehr() { features.ehr_feature_names(model.spec.config.d_cat) } else { Vec::new() };
    let img_names = if kind.uses_imaging() { features.imaging.feature_names.clone() } else { Vec::new() };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 0.1).map_err(|e| Error::Config(e.to_string()))?;
    let mut logits = ParamStore::new();
    for (name, len) in [(EDGE, sub.graph.edges.len()), (EHR, ehr_names.len()), (IMG, img_names.len())] {
        if len > 0 {
            let v = (0..len).map(|_| init.sample(&mut rng)).collect();
            logits.insert(name, Tensor::new(vec![len], v)?);
        }
    }

    let mut adam = AdamState::new();
    let mut objective = Vec::with_capacity(cfg.mask_epochs);
    for _ in 0..cfg.mask_epochs {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let m = logits.bind(&mut tape, true);
        let mv = |name: &str| m.var(name).ok();
        let (edge_z, ehr_z, img_z) = (mv(EDGE), mv(EHR), mv(IMG));
        let mut g = GraphCtx::new(nb.clone());
        g.edge_scale = edge_z.map(|z| tape.sigmoid(z));
        let fm = FeatureMasks { ehr: ehr_z.map(|z| tape.sigmoid(z)), imaging: img_z.map(|z| tape.sigmoid(z)) };
        let out = model.forward(&mut tape, &p, &sub_features, &g, fm, None)?;
        let mut loss = tape.bce_with_logits(out, &targets, &[0])?;
        for (z, size) in [(edge_z, cfg.lambda_size_edge), (ehr_z, cfg.lambda_size_feat), (img_z, cfg.lambda_size_feat)] {
            if let Some(z) = z {
                let pen = mask_penalty(&mut tape, z, size, cfg.lambda_entropy)?;
                loss = tape.add(loss, pen)?;
            }
        }
        objective.push(tape.value(loss).item());
        if logits.is_empty() {
            break;
        }
        let mut grads = tape.backward(loss)?;
        let g: BTreeMap<String, Tensor> = m
            .iter()
            .map(|(name, &v)| Ok((name.clone(), grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))))
            .collect::<Result<_>>()?;
        adam_step(&mut logits, &g, &mut adam, cfg.lr)?;
    }

    let values = |name: &str| -> Vec<f64> {
        logits.get(name).map(|t| t.data().iter().map(|&z| sigmoid(z)).collect()).unwrap_or_default()
    };
    Ok(ExplanationMasks {
        center_node: features.node_ids[node].clone(),
        prediction,
        target_class,
        subgraph_nodes: sub.nodes.iter().map(|&k| features.node_ids[k].clone()).collect(),
        edges: sub
            .graph
            .edges
            .iter()
            .map(|&(i, j, _)| (sub.graph.node_ids[i].clone(), sub.graph.node_ids[j].clone()))
            .collect(),
        edge_mask: values(EDGE),
        ehr_feature_names: ehr_names,
        feat_mask_ehr: values(EHR),
        imaging_feature_names: img_names,
        feat_mask_img: values(IMG),
        objective,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub name: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborScore {
    pub id: String,
    pub score: f64,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub center_node: String,
    pub prediction: f64,
    pub top_features: Vec<FeatureScore>,
    pub neighbors: Vec<NeighborScore>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

pub const IMAGING_MEAN_ROW: &str = "imaging (mean)";
const FLAT_RANGE: f64 = 1e-3;

fn by_score_desc(a: f64, b: f64) -> std::cmp::Ordering {
    b.total_cmp(&a)
}

fn range(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    hi - lo
}

/// Ranked features and neighbors. A neighbor's score is the largest mask
/// value over its subgraph edges, so direct neighbors use their edge to the
/// center when that is the strongest.
pub fn explanation_report(masks: &ExplanationMasks, labels: &BTreeMap<String, u8>, top_f: usize, top_n: usize) -> ExplanationReport {
    let mut feats: Vec<FeatureScore> = masks
        .ehr_feature_names
        .iter()
        .zip(&masks.feat_mask_ehr)
        .chain(masks.imaging_feature_names.iter().zip(&masks.feat_mask_img))
        .map(|(n, &s)| FeatureScore { name: n.clone(), score: s })
        .collect();
    let mut notes = Vec::new();
    if feats.len() > 1 && range(feats.iter().map(|f| f.score)) < FLAT_RANGE {
        notes.push("no discrimination among feature mask values".to_string());
    }
    if !masks.feat_mask_img.is_empty() {
        let mean = masks.feat_mask_img.iter().sum::<f64>() / masks.feat_mask_img.len() as f64;
        feats.push(FeatureScore { name: IMAGING_MEAN_ROW.into(), score: mean });
    }
    feats.sort_by(|a, b| by_score_desc(a.score, b.score).then_with(|| a.name.cmp(&b.name)));
    feats.truncate(top_f);

    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for ((a, b), &m) in masks.edges.iter().zip(&masks.edge_mask) {
        for id in [a, b] {
            if *id != masks.center_node {
                let e = best.entry(id.as_str()).or_insert(m);
                *e = e.max(m);
            }
        }
    }
    if best.len() > 1 && range(best.values().copied()) < FLAT_RANGE {
        notes.push("no discrimination among edge mask values".to_string());
    }
    let mut neighbors: Vec<NeighborScore> = best
        .into_iter()
        .map(|(id, score)| NeighborScore { id: id.to_string(), score, label: labels.get(id).copied().unwrap_or(0) })
        .collect();
    neighbors.sort_by(|a, b| by_score_desc(a.score, b.score).then_with(|| a.id.cmp(&b.id)));
    neighbors.truncate(top_n);

    ExplanationReport { center_node: masks.center_node.clone(), prediction: masks.prediction, top_features: feats, neighbors, notes }
}
