//! End-to-end readmission models over a shared admission graph.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{embed_categoricals, sequence_steps, FeatureSet, CATEGORICAL_FIELDS};
use crate::io::{load_json, load_tensors, save_json, save_tensors};
use crate::nn::{glorot_uniform, BoundParams, GnnBaseline, GraphCtx, LstmEncoder, MlpHead, ParamStore, StgnnEncoder};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Two STGNN subnetworks (EHR, imaging) fused by an MLP.
    MmStgnn,
    StgnnEhr,
    StgnnImg,
    /// Two non-temporal GraphSAGE stacks on last-step features.
    MmGnn,
    /// One GraphSAGE stack on concatenated last-step features.
    Gnn,
    /// Per-modality LSTMs fused by an MLP; no graph.
    Lstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] =
        [ModelKind::MmStgnn, ModelKind::StgnnEhr, ModelKind::StgnnImg, ModelKind::MmGnn, ModelKind::Gnn, ModelKind::Lstm];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::MmStgnn => "mm_stgnn",
            ModelKind::StgnnEhr => "stgnn_ehr",
            ModelKind::StgnnImg => "stgnn_img",
            ModelKind::MmGnn => "mm_gnn",
            ModelKind::Gnn => "gnn",
            ModelKind::Lstm => "lstm",
        }
    }

    pub fn uses_ehr(self) -> bool {
        self != ModelKind::StgnnImg
    }

    pub fn uses_imaging(self) -> bool {
        self != ModelKind::StgnnEhr
    }

    pub fn uses_graph(self) -> bool {
        self != ModelKind::Lstm
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model `{s}`")))
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub d_hidden: usize,
    pub n_layers: usize,
    pub h_mlp: usize,
    pub dropout: f64,
    pub d_cat: usize,
}

/// Input sizes fixed by the prepared features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub n_numeric: usize,
    pub category_rows: [usize; 3],
    pub d_img: usize,
    pub t_ehr: usize,
    pub t_cxr: usize,
}

impl InputDims {
    pub fn of(features: &FeatureSet) -> Self {
        InputDims {
            n_numeric: features.ehr_numeric.dim(),
            category_rows: features.category_rows,
            d_img: features.imaging.dim(),
            t_ehr: features.ehr_numeric.steps(),
            t_cxr: features.imaging.steps(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub dims: InputDims,
}

#[derive(Clone, Debug)]
enum Encoder {
    Stgnn(StgnnEncoder),
    Lstm(LstmEncoder),
    Gnn(GnnBaseline),
}

impl Encoder {
    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        match self {
            Encoder::Stgnn(e) => e.init(store, rng),
            Encoder::Lstm(e) => e.init(store, rng),
            Encoder::Gnn(e) => e.init(store, rng),
        }
    }
}

/// Sigmoid-valued feature masks applied column-wise at every time step.
#[derive(Clone, Copy, Debug, Default)]
pub struct FeatureMasks {
    pub ehr: Option<Var>,
    pub imaging: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    encoders: Vec<(Branch, Encoder)>,
    head: MlpHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Branch {
    Ehr,
    Imaging,
    Joint,
}

pub const EMBED_PREFIX: &str = "embed";

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let c = spec.config;
        if c.d_hidden == 0 || c.h_mlp == 0 || c.d_cat == 0 || !(1..=2).contains(&c.n_layers) {
            return Err(Error::Config(format!("invalid model sizes {c:?}")));
        }
        if !(0.0..1.0).contains(&c.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", c.dropout)));
        }
        let d_ehr = spec.dims.n_numeric + CATEGORICAL_FIELDS.len() * c.d_cat;
        let d_img = spec.dims.d_img;
        let (h, l) = (c.d_hidden, c.n_layers);
        let encoders = match c.kind {
            ModelKind::MmStgnn => vec![
                (Branch::Ehr, Encoder::Stgnn(StgnnEncoder::new("ehr", d_ehr, h, l))),
                (Branch::Imaging, Encoder::Stgnn(StgnnEncoder::new("img", d_img, h, l))),
            ],
            ModelKind::StgnnEhr => vec![(Branch::Ehr, Encoder::Stgnn(StgnnEncoder::new("ehr", d_ehr, h, l)))],
            ModelKind::StgnnImg => vec![(Branch::Imaging, Encoder::Stgnn(StgnnEncoder::new("img", d_img, h, l)))],
            ModelKind::MmGnn => vec![
                (Branch::Ehr, Encoder::Gnn(GnnBaseline::new("ehr", d_ehr, h, l))),
                (Branch::Imaging, Encoder::Gnn(GnnBaseline::new("img", d_img, h, l))),
            ],
            ModelKind::Gnn => vec![(Branch::Joint, Encoder::Gnn(GnnBaseline::new("joint", d_ehr + d_img, h, l)))],
            ModelKind::Lstm => vec![
                (Branch::Ehr, Encoder::Lstm(LstmEncoder::new("ehr", d_ehr, h, l))),
                (Branch::Imaging, Encoder::Lstm(LstmEncoder::new("img", d_img, h, l))),
            ],
        };
        let head = MlpHead::new("head", encoders.len() * h, c.h_mlp);
        Ok(Model { spec, encoders, head })
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.config.kind
    }

    pub fn ehr_dim(&self) -> usize {
        self.spec.dims.n_numeric + CATEGORICAL_FIELDS.len() * self.spec.config.d_cat
    }

    pub fn head(&self) -> &MlpHead {
        &self.head
    }

    /// Fresh parameters, deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        if self.kind().uses_ehr() {
            for (field, rows) in CATEGORICAL_FIELDS.iter().zip(self.spec.dims.category_rows) {
                store.insert(format!("{EMBED_PREFIX}.{field}"), glorot_uniform(rows, self.spec.config.d_cat, &mut rng));
            }
        }
        for (_, e) in &self.encoders {
            e.init(&mut store, &mut rng);
        }
        self.head.init(&mut store, &mut rng);
        store
    }

    fn check_inputs(&self, features: &FeatureSet, graph: &GraphCtx) -> Result<()> {
        let d = InputDims::of(features);
        if d != self.spec.dims {
            return Err(Error::shape("model", format!("features {d:?} vs model {:?}", self.spec.dims)));
        }
        if features.n_nodes() != graph.nb.n_nodes() {
            return Err(Error::shape(
                "model",
                format!("{} feature rows but {} graph nodes", features.n_nodes(), graph.nb.n_nodes()),
            ));
        }
        Ok(())
    }

    fn ehr_steps(&self, tape: &mut Tape, p: &BoundParams, f: &FeatureSet, mask: Option<Var>) -> Result<Vec<Var>> {
        let tables = [0, 1, 2].map(|k| p.var(&format!("{EMBED_PREFIX}.{}", CATEGORICAL_FIELDS[k])));
        let [a, b, c] = tables;
        let steps = embed_categoricals(tape, &f.ehr_numeric.data, &f.ehr_categorical, [a?, b?, c?])?;
        apply_mask(tape, steps, mask)
    }

    /// Logits `[N, 1]`. `dropout_rng` switches on training-mode dropout.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        features: &FeatureSet,
        graph: &GraphCtx,
        masks: FeatureMasks,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        self.check_inputs(features, graph)?;
        let kind = self.kind();
        let ehr = if kind.uses_ehr() { Some(self.ehr_steps(tape, p, features, masks.ehr)?) } else { None };
        let img = if kind.uses_imaging() {
            let steps = sequence_steps(tape, &features.imaging.data);
            Some(apply_mask(tape, steps, masks.imaging)?)
        } else {
            None
        };
        let rate = self.spec.config.dropout;
        let mut rng = dropout_rng;
        let mut parts = Vec::with_capacity(2);
        for (branch, enc) in &self.encoders {
            let steps = match branch {
                Branch::Ehr => ehr.clone().unwrap(),
                Branch::Imaging => img.clone().unwrap(),
                Branch::Joint => {
                    let e = *ehr.as_ref().unwrap().last().unwrap();
                    let i = *img.as_ref().unwrap().last().unwrap();
                    vec![tape.concat(&[e, i])?]
                }
            };
            let h = match enc {
                Encoder::Stgnn(e) => e.encode(tape, p, &steps, graph)?,
                Encoder::Lstm(e) => e.encode(tape, p, &steps)?,
                Encoder::Gnn(e) => {
                    let h = e.forward(tape, p, *steps.last().unwrap(), graph)?;
                    match rng.as_deref_mut() {
                        Some(r) => tape.dropout(h, rate, r)?,
                        None => h,
                    }
                }
            };
            parts.push(h);
        }
        let z = if parts.len() == 1 { parts[0] } else { tape.concat(&parts)? };
        self.head.forward(tape, p, z, rng.map(|r| (rate, r)))
    }

    /// Eval-mode predictions for every node.
    pub fn predict(&self, params: &ParamStore, features: &FeatureSet, graph: &GraphCtx) -> Result<PredictionVector> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let logits = self.forward(&mut tape, &p, features, graph, FeatureMasks::default(), None)?;
        PredictionVector::new(features.node_ids.clone(), tape.value(logits).data().to_vec())
    }
}

fn apply_mask(tape: &mut Tape, steps: Vec<Var>, mask: Option<Var>) -> Result<Vec<Var>> {
    match mask {
        None => Ok(steps),
        Some(m) => steps.into_iter().map(|x| tape.mul_cols(x, m)).collect(),
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionVector {
    pub node_ids: Vec<String>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl PredictionVector {
    pub fn new(node_ids: Vec<String>, logits: Vec<f64>) -> Result<Self> {
        if node_ids.len() != logits.len() {
            return Err(Error::shape("predictions", format!("{} ids, {} logits", node_ids.len(), logits.len())));
        }
        if let Some(k) = logits.iter().position(|z| !z.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logit for {}", node_ids[k])));
        }
        let probabilities = logits.iter().map(|&z| sigmoid(z)).collect();
        Ok(PredictionVector { node_ids, logits, probabilities })
    }
}

/// One row of a prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub admission_id: String,
    pub logit: f64,
    pub probability: f64,
    pub label: u8,
    pub split: String,
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Architecture description plus trained parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

pub const PARAMS_FILE: &str = "params.bin";
pub const MODEL_FILE: &str = "model.json";

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_json(&dir.join(MODEL_FILE), &self.spec)?;
        save_tensors(&dir.join(PARAMS_FILE), self.params.as_map())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec: ModelSpec = load_json(&dir.join(MODEL_FILE))?;
        let params = ParamStore::from_map(load_tensors(&dir.join(PARAMS_FILE))?);
        let expected = Model::new(spec)?.init_params(0);
        expected.check_compatible(&params)?;
        Ok(Checkpoint { spec, params })
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::cohort::{generate_synthetic_cohort, SignalKind, SynthConfig};
    use crate::features::EhrVocab;

    /// Small prepared feature set from the generator.
    pub fn toy_features(n_patients: usize, t: usize, seed: u64) -> FeatureSet {
        let mut cfg = SynthConfig::new(n_patients, 0.3, SignalKind::ModalitySplit, seed);
        cfg.d_img = 3;
        cfg.max_admissions_per_patient = 1;
        let out = generate_synthetic_cohort(&cfg).unwrap();
        let records = &out.dataset.records;
        let vocab = EhrVocab::build(records, &[]).unwrap();
        FeatureSet::build(records, &vocab, t, t, 3).unwrap()
    }

    pub fn spec_for(features: &FeatureSet, kind: ModelKind) -> ModelSpec {
        ModelSpec {
            config: ModelConfig { kind, d_hidden: 3, n_layers: 1, h_mlp: 4, dropout: 0.0, d_cat: 1 },
            dims: InputDims::of(features),
        }
    }
}
