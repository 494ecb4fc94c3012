//! Command-line surface over the pipeline.
//!
//! Configuration is resolved from defaults, an optional JSON file
//! (`--config`), `READMIT_SEED` and finally explicit flags. Every command
//! writes the resolved configuration as `run_config.json` in its output
//! directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Child, Command as Process};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortDataset, InclusionCriteria, InclusionReport, SignalKind, Split, SplitSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::explain::{explain_node, explanation_report, ExplainConfig};
use crate::features::{EhrVocab, FeatureSet, FeaturesMeta};
use crate::graph::{AdmissionGraph, EdgeSource, GraphConfig};
use crate::io::{load_json, load_tensors, save_json, save_tensors};
use crate::metrics::{auroc, delong};
use crate::model::{read_predictions, write_predictions, Checkpoint, Model, ModelKind, PredictionRow};
use crate::pipeline::{evaluate, prediction_rows, prepare, scores_for, split_indices, train_model, PrepareConfig, Prepared};
use crate::train::{write_history, StopReason, TrainConfig};

pub const SEED_ENV: &str = "READMIT_SEED";
pub const RUN_CONFIG: &str = "run_config.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub budget: usize,
    pub jobs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { budget: 10, jobs: 1 }
    }
}

/// Everything a run needs besides its input paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub inclusion: InclusionCriteria,
    pub split_ratios: [f64; 3],
    pub edge_source: EdgeSource,
    pub inductive: bool,
    pub model: ModelKind,
    pub train: TrainConfig,
    pub sens_target: f64,
    pub explain: ExplainConfig,
    pub search: SearchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            synth: SynthConfig::default(),
            inclusion: InclusionCriteria::default(),
            split_ratios: [0.7, 0.15, 0.15],
            edge_source: EdgeSource::Demographics,
            inductive: false,
            model: ModelKind::MmStgnn,
            train: TrainConfig::default(),
            sens_target: 0.8,
            explain: ExplainConfig::default(),
            search: SearchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig { edge_source: self.edge_source, kappa_percent: self.train.kappa }
    }

    pub fn prepare_config(&self) -> PrepareConfig {
        PrepareConfig {
            inclusion: self.inclusion.clone(),
            split_ratios: self.split_ratios,
            t_ehr: self.train.t_ehr,
            t_cxr: self.train.t_cxr,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.explain.validate()?;
        self.graph_config().validate()?;
        if !(self.sens_target > 0.0 && self.sens_target <= 1.0) {
            return Err(Error::Config(format!("sens_target {} outside (0, 1]", self.sens_target)));
        }
        if self.split_ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || self.split_ratios.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("invalid split ratios {:?}", self.split_ratios)));
        }
        if self.search.budget == 0 || self.search.jobs == 0 {
            return Err(Error::Config("search budget and jobs must be positive".into()));
        }
        Ok(())
    }
}

/// Flags mirroring configuration keys. Unset flags leave the value alone.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_patients: Option<usize>,
    #[arg(long)]
    pub readmit_rate: Option<f64>,
    #[arg(long, value_parser = parse_from_str::<SignalKind>)]
    pub signal: Option<SignalKind>,
    #[arg(long)]
    pub signal_strength: Option<f64>,
    #[arg(long)]
    pub d_img: Option<usize>,
    #[arg(long)]
    pub max_admissions: Option<usize>,
    #[arg(long, value_parser = parse_from_str::<EdgeSource>)]
    pub edge_source: Option<EdgeSource>,
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Build one graph per split so no edge crosses splits.
    #[arg(long)]
    pub inductive: bool,
    #[arg(long, value_parser = parse_from_str::<ModelKind>)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub t_ehr: Option<usize>,
    #[arg(long)]
    pub t_cxr: Option<usize>,
    #[arg(long)]
    pub d_cat: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub d_hidden: Option<usize>,
    #[arg(long)]
    pub h_mlp: Option<usize>,
    #[arg(long)]
    pub sens_target: Option<f64>,
    /// Hops of the explained node's subgraph.
    #[arg(long = "k")]
    pub k_hops: Option<usize>,
    #[arg(long)]
    pub mask_epochs: Option<usize>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

fn parse_from_str<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn set<T: Copy>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => load_json::<RunConfig>(path).map_err(|e| match e {
                Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
                other => other,
            })?,
            None => RunConfig::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            c.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        set(&mut c.seed, self.seed);
        set(&mut c.synth.n_patients, self.n_patients);
        set(&mut c.synth.readmit_rate, self.readmit_rate);
        set(&mut c.synth.signal, self.signal);
        set(&mut c.synth.signal_strength, self.signal_strength);
        set(&mut c.synth.d_img, self.d_img);
        set(&mut c.synth.max_admissions_per_patient, self.max_admissions);
        set(&mut c.edge_source, self.edge_source);
        set(&mut c.train.kappa, self.kappa);
        c.inductive |= self.inductive;
        set(&mut c.model, self.model);
        let t = &mut c.train;
        set(&mut t.lr0, self.lr0);
        set(&mut t.max_epochs, self.max_epochs);
        set(&mut t.patience, self.patience);
        set(&mut t.dropout, self.dropout);
        set(&mut t.t_ehr, self.t_ehr);
        set(&mut t.t_cxr, self.t_cxr);
        set(&mut t.d_cat, self.d_cat);
        set(&mut t.n_layers, self.n_layers);
        set(&mut t.d_hidden, self.d_hidden);
        set(&mut t.h_mlp, self.h_mlp);
        set(&mut c.sens_target, self.sens_target);
        set(&mut c.explain.k_hops, self.k_hops);
        set(&mut c.explain.mask_epochs, self.mask_epochs);
        set(&mut c.search.budget, self.budget);
        set(&mut c.search.jobs, self.jobs);
        c.synth.seed = c.seed;
        c.explain.seed = c.seed;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Parser, Debug)]
#[command(name = "readmit", version, about = "Readmission prediction with multimodal spatiotemporal graph networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic cohort with a documented planted signal.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Apply inclusion, split by patient and build feature tensors.
    Prepare {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Build the admission graph for a prepared cohort.
    Graph {
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one model and write its checkpoint, history and predictions.
    Train {
        #[arg(long)]
        prepared: PathBuf,
        /// Graph file; built from the configuration when absent.
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Metrics, ROC and PR points for one split of a prediction file.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_from_str::<Split>)]
        split: Split,
        /// Further prediction files to compare against with DeLong tests.
        #[arg(long = "compare")]
        compare: Vec<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// DeLong comparison of two prediction files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_from_str::<Split>)]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Explain one admission of a trained model.
    Explain {
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        node: String,
        /// Features listed in the report.
        #[arg(long, default_value_t = 100)]
        top: usize,
        /// Neighbors listed in the report.
        #[arg(long, default_value_t = 10)]
        top_neighbors: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Random hyperparameter search; each trial is a separate `train` process.
    Search {
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, cfg } => cmd_synth(&out, &cfg.resolve()?),
        Command::Prepare { cohort, out, cfg } => cmd_prepare(&cohort, &out, &cfg.resolve()?),
        Command::Graph { prepared, out, cfg } => cmd_graph(&prepared, &out, &cfg.resolve()?),
        Command::Train { prepared, graph, out, cfg } => cmd_train(&prepared, graph.as_deref(), &out, &cfg.resolve()?),
        Command::Eval { predictions, out, split, compare, cfg } => {
            cmd_eval(&predictions, &compare, split, &out, &cfg.resolve()?)
        }
        Command::Compare { a, b, split, out } => cmd_compare(&a, &b, split, out.as_deref()),
        Command::Explain { prepared, checkpoint, graph, node, top, top_neighbors, out, cfg } => {
            let c = cfg.resolve()?;
            cmd_explain(&prepared, &checkpoint, graph.as_deref(), &node, (top, top_neighbors), &out, &c)
        }
        Command::Search { prepared, out, cfg } => cmd_search(&prepared, &out, &cfg.resolve()?),
    }
}

fn out_dir(out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_json(&out.join(RUN_CONFIG), cfg)
}

pub fn cmd_synth(out: &Path, cfg: &RunConfig) -> Result<()> {
    let generated = crate::cohort::generate_synthetic_cohort(&cfg.synth)?;
    out_dir(out, cfg)?;
    generated.dataset.write_jsonl(&out.join("cohort.jsonl"))?;
    save_json(&out.join("signal_manifest.json"), &generated.manifest)?;
    println!(
        "synth: {} admissions, {} positive -> {}",
        generated.manifest.n_admissions,
        generated.manifest.n_positive,
        out.display()
    );
    Ok(())
}

const INCLUDED: &str = "cohort_included.jsonl";
const FEATURES: &str = "features.bin";
const FEATURES_META: &str = "features_meta.json";

pub fn cmd_prepare(cohort: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let dataset = CohortDataset::read_jsonl(cohort)?;
    let p = prepare(&dataset, &cfg.prepare_config())?;
    out_dir(out, cfg)?;
    CohortDataset { records: p.records.clone(), d_img: dataset.d_img }.write_jsonl(&out.join(INCLUDED))?;
    save_json(&out.join("inclusion_report.json"), &p.inclusion)?;
    save_json(&out.join("vocab.json"), &p.vocab)?;
    save_json(&out.join("split.json"), &p.split)?;
    let (tensors, meta) = p.features.to_parts()?;
    save_tensors(&out.join(FEATURES), &tensors)?;
    save_json(&out.join(FEATURES_META), &meta)?;
    println!(
        "prepare: {} of {} admissions included; train/val/test {}/{}/{}",
        p.inclusion.retained,
        p.inclusion.input,
        p.split.train_ids.len(),
        p.split.val_ids.len(),
        p.split.test_ids.len()
    );
    Ok(())
}

pub fn load_prepared(dir: &Path) -> Result<Prepared> {
    let features = FeatureSet::from_parts(load_tensors(&dir.join(FEATURES))?, load_json::<FeaturesMeta>(&dir.join(FEATURES_META))?)?;
    Ok(Prepared {
        records: CohortDataset::read_jsonl(&dir.join(INCLUDED))?.records,
        inclusion: load_json::<InclusionReport>(&dir.join("inclusion_report.json"))?,
        vocab: load_json::<EhrVocab>(&dir.join("vocab.json"))?,
        split: load_json::<SplitSpec>(&dir.join("split.json"))?,
        features,
    })
}

const GRAPH: &str = "graph.json";

pub fn cmd_graph(prepared: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let p = load_prepared(prepared)?;
    let g = p.build_graph(cfg.graph_config(), cfg.inductive)?;
    out_dir(out, cfg)?;
    save_json(&out.join(GRAPH), &g)?;
    println!("graph: {} nodes, {} edges ({})", g.n_nodes(), g.edges.len(), cfg.edge_source);
    Ok(())
}

/// A graph file, or a directory holding `graph.json`.
pub fn load_graph(path: &Path) -> Result<AdmissionGraph> {
    let file = if path.is_dir() { path.join(GRAPH) } else { path.to_path_buf() };
    let g: AdmissionGraph = load_json(&file)?;
    g.validate()?;
    Ok(g)
}

fn graph_for(p: &Prepared, graph: Option<&Path>, cfg: &RunConfig) -> Result<AdmissionGraph> {
    let g = match graph {
        Some(path) => load_graph(path)?,
        None => p.build_graph(cfg.graph_config(), cfg.inductive)?,
    };
    if g.node_ids != p.features.node_ids {
        return Err(Error::Data("graph nodes do not match the prepared admissions".into()));
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model: ModelKind,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
    pub val_auroc: Option<f64>,
}

pub const PREDICTIONS: &str = "predictions.csv";
pub const SUMMARY: &str = "train_summary.json";

pub fn cmd_train(prepared: &Path, graph: Option<&Path>, out: &Path, cfg: &RunConfig) -> Result<()> {
    let p = load_prepared(prepared)?;
    let features = p.features_at(cfg.train.t_ehr, cfg.train.t_cxr)?;
    let g = graph_for(&p, graph, cfg)?;
    let [train_idx, val_idx, _] = split_indices(&features.node_ids, &p.split)?;
    out_dir(out, cfg)?;
    let trained = train_model(cfg.model, &cfg.train, &features, &g, &train_idx, &val_idx, cfg.seed)?;
    write_history(&out.join("history.csv"), &trained.outcome.history)?;
    if trained.outcome.stop == StopReason::Diverged {
        return Err(Error::Numeric(format!(
            "training diverged after {} epochs; history written to {}",
            trained.outcome.history.len(),
            out.display()
        )));
    }
    Checkpoint { spec: trained.model.spec, params: trained.outcome.params.clone() }.save(out)?;
    let pred = trained.predict(&features, &g)?;
    let rows = prediction_rows(&pred, &features.labels, &p.split)?;
    write_predictions(&out.join(PREDICTIONS), &rows)?;
    let (val_scores, val_labels) = scores_for(&rows, Split::Val);
    let summary = TrainSummary {
        model: cfg.model,
        epochs_run: trained.outcome.history.len(),
        best_epoch: trained.outcome.best_epoch,
        best_val_loss: trained.outcome.best_val_loss,
        stop: trained.outcome.stop,
        val_auroc: auroc(&val_scores, &val_labels).ok(),
    };
    save_json(&out.join(SUMMARY), &summary)?;
    println!(
        "train: {} best epoch {} val loss {:.5} val auroc {}",
        cfg.model,
        summary.best_epoch,
        summary.best_val_loss,
        summary.val_auroc.map_or("n/a".into(), |a| format!("{a:.4}"))
    );
    Ok(())
}

/// A prediction file, or a training output directory holding one.
fn load_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    if path.is_dir() {
        read_predictions(&path.join(PREDICTIONS))
    } else {
        read_predictions(path)
    }
}

/// Scores of `b` reordered to match `a` on `split`; ids and labels must agree.
fn aligned(a: &[PredictionRow], b: &[PredictionRow], split: Split) -> Result<(Vec<f64>, Vec<f64>, Vec<bool>)> {
    let of_b: BTreeMap<&str, &PredictionRow> =
        b.iter().filter(|r| r.split == split.as_str()).map(|r| (r.admission_id.as_str(), r)).collect();
    let rows_a: Vec<&PredictionRow> = a.iter().filter(|r| r.split == split.as_str()).collect();
    if rows_a.len() != of_b.len() {
        return Err(Error::Data(format!("prediction files cover {} vs {} {} admissions", rows_a.len(), of_b.len(), split.as_str())));
    }
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for r in rows_a {
        let other = of_b
            .get(r.admission_id.as_str())
            .ok_or_else(|| Error::Data(format!("{} missing from second prediction file", r.admission_id)))?;
        if other.label != r.label {
            return Err(Error::Data(format!("label of {} differs between files", r.admission_id)));
        }
        out.0.push(r.probability);
        out.1.push(other.probability);
        out.2.push(r.label == 1);
    }
    Ok(out)
}

fn comparison_name(path: &Path) -> String {
    let base = if path.is_dir() { path } else { path.parent().unwrap_or(path) };
    base.file_name().or(path.file_name()).map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub const EVAL_REPORT: &str = "eval_report.json";

pub fn cmd_eval(predictions: &Path, compare: &[PathBuf], split: Split, out: &Path, cfg: &RunConfig) -> Result<()> {
    let rows = load_predictions(predictions)?;
    let mut report = evaluate(&rows, split, cfg.sens_target)?;
    for other in compare {
        let (a, b, labels) = aligned(&rows, &load_predictions(other)?, split)?;
        report.add_comparison(&comparison_name(other), &a, &b, &labels)?;
    }
    out_dir(out, cfg)?;
    save_json(&out.join(EVAL_REPORT), &report)?;
    let mut w = csv::Writer::from_path(out.join("roc.csv"))?;
    for p in &report.roc_points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    let mut w = csv::Writer::from_path(out.join("pr.csv"))?;
    for p in &report.pr_points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    println!(
        "eval ({}): auroc {:.4} [{:.4}, {:.4}], ap {:.4}, youden threshold {:.4}",
        split.as_str(),
        report.auroc,
        report.auroc_ci95[0],
        report.auroc_ci95[1],
        report.average_precision,
        report.youden_threshold
    );
    for c in &report.delong_comparisons {
        println!("  vs {}: auroc {:.4}, p = {:.4}", c.vs, c.auroc_other, c.p_value);
    }
    Ok(())
}

pub fn cmd_compare(a: &Path, b: &Path, split: Split, out: Option<&Path>) -> Result<()> {
    let (sa, sb, labels) = aligned(&load_predictions(a)?, &load_predictions(b)?, split)?;
    let result = delong(&sa, &sb, &labels)?;
    let text = serde_json::to_string_pretty(&result)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_json(&dir.join("delong.json"), &result)?;
    }
    println!("{text}");
    Ok(())
}

pub fn cmd_explain(
    prepared: &Path,
    checkpoint: &Path,
    graph: Option<&Path>,
    node: &str,
    (top_f, top_n): (usize, usize),
    out: &Path,
    cfg: &RunConfig,
) -> Result<()> {
    let p = load_prepared(prepared)?;
    let ck = Checkpoint::load(checkpoint)?;
    let model = Model::new(ck.spec)?;
    let features = p.features_at(ck.spec.dims.t_ehr, ck.spec.dims.t_cxr)?;
    let g = graph_for(&p, graph, cfg)?;
    let idx = features
        .node_ids
        .iter()
        .position(|id| id == node)
        .ok_or_else(|| Error::Data(format!("admission {node} not in the prepared cohort")))?;
    let masks = explain_node(&model, &ck.params, &features, &g, idx, &cfg.explain)?;
    let labels: BTreeMap<String, u8> =
        features.node_ids.iter().cloned().zip(features.labels.iter().map(|&y| u8::from(y > 0.5))).collect();
    let report = explanation_report(&masks, &labels, top_f, top_n);
    out_dir(out, cfg)?;
    save_json(&out.join("explanation.json"), &report)?;
    save_json(&out.join("masks.json"), &masks)?;
    println!("explain {node}: prediction {:.4}", report.prediction);
    for f in report.top_features.iter().take(10) {
        println!("  {:<32} {:.4}", f.name, f.score);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub lr0: f64,
    pub dropout: f64,
    pub t_ehr: usize,
    pub t_cxr: usize,
    pub d_cat: usize,
    pub n_layers: usize,
    pub d_hidden: usize,
    pub h_mlp: usize,
    pub kappa: f64,
    pub best_val_loss: Option<f64>,
    pub val_auroc: Option<f64>,
    pub status: String,
}

/// Samples `budget` configurations, runs each as an independent `train`
/// process (at most `jobs` at once) and ranks trials by validation loss.
pub fn cmd_search(prepared: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    out_dir(out, cfg)?;
    let exe = std::env::current_exe().map_err(|e| Error::io(Path::new("current_exe"), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let trials: Vec<(usize, RunConfig, PathBuf)> = (0..cfg.search.budget)
        .map(|k| {
            let mut c = cfg.clone();
            c.train = cfg.train.sample(&mut rng);
            (k, c, out.join(format!("trial_{k:03}")))
        })
        .collect();
    let mut running: Vec<(usize, Child)> = Vec::new();
    let mut exit_ok = vec![false; trials.len()];
    let mut wait_one = |running: &mut Vec<(usize, Child)>| -> Result<()> {
        let (k, mut child) = running.remove(0);
        let status = child.wait().map_err(|e| Error::io(&exe, e))?;
        exit_ok[k] = status.success();
        Ok(())
    };
    for (k, c, dir) in &trials {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let trial_cfg = dir.join("trial_config.json");
        save_json(&trial_cfg, c)?;
        if running.len() >= cfg.search.jobs {
            wait_one(&mut running)?;
        }
        let child = Process::new(&exe)
            .arg("train")
            .arg("--prepared")
            .arg(prepared)
            .arg("--out")
            .arg(dir)
            .arg("--config")
            .arg(&trial_cfg)
            .env_remove(SEED_ENV)
            .spawn()
            .map_err(|e| Error::io(&exe, e))?;
        running.push((*k, child));
    }
    while !running.is_empty() {
        wait_one(&mut running)?;
    }
    let mut results: Vec<TrialResult> = trials
        .iter()
        .map(|(k, c, dir)| {
            let summary: Option<TrainSummary> = if exit_ok[*k] { load_json(&dir.join(SUMMARY)).ok() } else { None };
            let t = &c.train;
            TrialResult {
                trial: *k,
                lr0: t.lr0,
                dropout: t.dropout,
                t_ehr: t.t_ehr,
                t_cxr: t.t_cxr,
                d_cat: t.d_cat,
                n_layers: t.n_layers,
                d_hidden: t.d_hidden,
                h_mlp: t.h_mlp,
                kappa: t.kappa,
                best_val_loss: summary.as_ref().map(|s| s.best_val_loss),
                val_auroc: summary.as_ref().and_then(|s| s.val_auroc),
                status: if summary.is_some() { "ok".into() } else { "failed".into() },
            }
        })
        .collect();
    results.sort_by(|a, b| {
        let key = |r: &TrialResult| r.best_val_loss.unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b)).then(a.trial.cmp(&b.trial))
    });
    let mut w = csv::Writer::from_path(out.join("search_results.csv"))?;
    for r in &results {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    let best = results
        .first()
        .filter(|r| r.status == "ok")
        .ok_or_else(|| Error::Numeric("every search trial failed".into()))?;
    save_json(&out.join("best_config.json"), &trials[best.trial].1)?;
    println!(
        "search: {} trials, best trial {} (val loss {:.5})",
        results.len(),
        best.trial,
        best.best_val_loss.unwrap_or(f64::NAN)
    );
    Ok(())
}
