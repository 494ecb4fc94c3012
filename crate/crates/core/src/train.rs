//! Full-batch training: masked BCE, Adam, cosine annealing and early
//! stopping on validation loss with best-epoch restore.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSet, MAX_STEPS, MIN_STEPS};
use crate::graph::{KAPPA_MAX, KAPPA_MIN};
use crate::model::{FeatureMasks, Model, ModelConfig, ModelKind};
use crate::nn::{GraphCtx, ParamStore};
use crate::tensor::{Tape, Tensor};

pub const D_HIDDEN_GRID: [usize; 3] = [64, 128, 256];
pub const H_MLP_GRID: [usize; 2] = [128, 256];
pub const D_CAT_GRID: [usize; 3] = [1, 2, 3];
pub const N_LAYERS_GRID: [usize; 2] = [1, 2];
pub const LR_RANGE: (f64, f64) = (1e-5, 1e-2);
pub const DROPOUT_RANGE: (f64, f64) = (0.0, 0.5);
pub const MAX_EPOCHS: usize = 100;

/// Mean binary cross-entropy of `logits` against `labels` over `mask`.
pub fn masked_bce(logits: &[f64], labels: &[f64], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::Data("loss mask is empty".into()));
    }
    let total: f64 = mask
        .iter()
        .map(|&i| {
            let z = logits[i];
            z.max(0.0) - z * labels[i] + (-z.abs()).exp().ln_1p()
        })
        .sum();
    Ok(total / mask.len() as f64)
}

/// Written as a decay from `lr0` so epoch 0 returns `lr0` exactly.
pub fn cosine_lr(epoch: usize, max_epochs: usize, lr0: f64, lr_min: f64) -> f64 {
    let frac = epoch.min(max_epochs) as f64 / max_epochs.max(1) as f64;
    lr0 - 0.5 * (lr0 - lr_min) * (1.0 - (std::f64::consts::PI * frac).cos())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState { beta1: 0.9, beta2: 0.999, eps: 1e-8, ..Default::default() }
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if let Some(k) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("gradient of `{name}` is {} at index {k}", g.data()[k])));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let g = grads
            .get(&name)
            .ok_or_else(|| Error::Data(format!("no gradient for `{name}`")))?;
        let p = params.get_mut(&name)?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adam", format!("`{name}`: grad {:?} vs param {:?}", g.shape(), p.shape())));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
        let v = state.v.entry(name).or_insert_with(|| vec![0.0; g.numel()]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Losses at the current parameters and the gradient of the training loss.
#[derive(Clone, Debug)]
pub struct EpochEval {
    pub train_loss: f64,
    pub val_loss: f64,
    pub grads: BTreeMap<String, Tensor>,
}

/// Anything that can score parameters for [`fit`].
pub trait Objective {
    fn evaluate(&mut self, params: &ParamStore, epoch: usize) -> Result<EpochEval>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { lr0: 1e-3, lr_min: 0.0, max_epochs: MAX_EPOCHS, patience: 10, min_delta: 1e-6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
    Diverged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub params: ParamStore,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
    pub history: Vec<HistoryRow>,
}

/// Epoch `e` scores the parameters `theta_e`, records both losses, then
/// updates with the cosine learning rate for `e`. Training stops once
/// `patience` epochs pass without a validation loss below the best by more
/// than `min_delta`; the best epoch's parameters are returned.
pub fn fit<O: Objective>(mut params: ParamStore, objective: &mut O, cfg: &FitConfig) -> Result<TrainOutcome> {
    if cfg.max_epochs == 0 || cfg.patience == 0 {
        return Err(Error::Config("max_epochs and patience must be positive".into()));
    }
    let mut adam = AdamState::new();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut stop = StopReason::MaxEpochs;
    for epoch in 0..cfg.max_epochs {
        let lr = cosine_lr(epoch, cfg.max_epochs, cfg.lr0, cfg.lr_min);
        let eval = objective.evaluate(&params, epoch)?;
        history.push(HistoryRow { epoch, lr, train_loss: eval.train_loss, val_loss: eval.val_loss });
        if !eval.train_loss.is_finite() || !eval.val_loss.is_finite() {
            log::warn!("loss diverged at epoch {epoch}");
            stop = StopReason::Diverged;
            break;
        }
        let improved = best.as_ref().is_none_or(|(_, b, _)| eval.val_loss < b - cfg.min_delta);
        if improved {
            best = Some((epoch, eval.val_loss, params.clone()));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if epoch - best_epoch >= cfg.patience {
            stop = StopReason::EarlyStopped;
            break;
        }
        if epoch + 1 < cfg.max_epochs {
            if let Err(e) = adam_step(&mut params, &eval.grads, &mut adam, lr) {
                log::warn!("update failed at epoch {epoch}: {e}");
                stop = StopReason::Diverged;
                break;
            }
        }
    }
    match best {
        Some((best_epoch, best_val_loss, params)) => {
            Ok(TrainOutcome { params, best_epoch, best_val_loss, stop, history })
        }
        None => Err(Error::Numeric(format!("training diverged before any finite validation loss ({history:?})"))),
    }
}

pub fn write_history(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in history {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Full-graph objective for a [`Model`]: BCE on training nodes, validation
/// loss on validation nodes.
pub struct ModelObjective<'a> {
    pub model: &'a Model,
    pub features: &'a FeatureSet,
    pub graph: &'a GraphCtx,
    pub train_idx: &'a [usize],
    pub val_idx: &'a [usize],
    rng: ChaCha8Rng,
}

impl<'a> ModelObjective<'a> {
    pub fn new(
        model: &'a Model,
        features: &'a FeatureSet,
        graph: &'a GraphCtx,
        train_idx: &'a [usize],
        val_idx: &'a [usize],
        seed: u64,
    ) -> Self {
        ModelObjective { model, features, graph, train_idx, val_idx, rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed) }
    }
}

impl Objective for ModelObjective<'_> {
    fn evaluate(&mut self, params: &ParamStore, _epoch: usize) -> Result<EpochEval> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, true);
        let dropout = self.model.spec.config.dropout > 0.0;
        let rng: Option<&mut dyn rand::RngCore> = if dropout { Some(&mut self.rng) } else { None };
        let logits = self.model.forward(&mut tape, &p, self.features, self.graph, FeatureMasks::default(), rng)?;
        let loss = tape.bce_with_logits(logits, &self.features.labels, self.train_idx)?;
        let train_loss = tape.value(loss).item();
        let val_loss = if dropout {
            let pred = self.model.predict(params, self.features, self.graph)?;
            masked_bce(&pred.logits, &self.features.labels, self.val_idx)?
        } else {
            masked_bce(tape.value(logits).data(), &self.features.labels, self.val_idx)?
        };
        let mut grads = tape.backward(loss)?;
        let grads = p
            .iter()
            .map(|(name, &v)| {
                let g = grads.take(v).ok_or_else(|| Error::Numeric(format!("no gradient for `{name}`")))?;
                Ok((name.clone(), g))
            })
            .collect::<Result<_>>()?;
        Ok(EpochEval { train_loss, val_loss, grads })
    }
}

/// Training hyperparameters, checked against the search grids.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub dropout: f64,
    pub t_ehr: usize,
    pub t_cxr: usize,
    pub d_cat: usize,
    pub n_layers: usize,
    pub d_hidden: usize,
    pub h_mlp: usize,
    pub kappa: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            max_epochs: MAX_EPOCHS,
            patience: 10,
            dropout: 0.0,
            t_ehr: 5,
            t_cxr: 5,
            d_cat: 2,
            n_layers: 1,
            d_hidden: 64,
            h_mlp: 128,
            kappa: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(LR_RANGE.0..=LR_RANGE.1).contains(&self.lr0) {
            bad.push(format!("lr0 {} outside [{}, {}]", self.lr0, LR_RANGE.0, LR_RANGE.1));
        }
        if !(1..=MAX_EPOCHS).contains(&self.max_epochs) {
            bad.push(format!("max_epochs {} outside [1, {MAX_EPOCHS}]", self.max_epochs));
        }
        if self.patience == 0 {
            bad.push("patience must be positive".into());
        }
        if !(DROPOUT_RANGE.0..=DROPOUT_RANGE.1).contains(&self.dropout) {
            bad.push(format!("dropout {} outside [0, 0.5]", self.dropout));
        }
        for (name, t) in [("t_ehr", self.t_ehr), ("t_cxr", self.t_cxr)] {
            if !(MIN_STEPS..=MAX_STEPS).contains(&t) {
                bad.push(format!("{name} {t} outside [{MIN_STEPS}, {MAX_STEPS}]"));
            }
        }
        for (name, v, grid) in [
            ("d_cat", self.d_cat, &D_CAT_GRID[..]),
            ("n_layers", self.n_layers, &N_LAYERS_GRID[..]),
            ("d_hidden", self.d_hidden, &D_HIDDEN_GRID[..]),
            ("h_mlp", self.h_mlp, &H_MLP_GRID[..]),
        ] {
            if !grid.contains(&v) {
                bad.push(format!("{name} {v} not in {grid:?}"));
            }
        }
        if !(KAPPA_MIN..=KAPPA_MAX).contains(&self.kappa) {
            bad.push(format!("kappa {} outside [{KAPPA_MIN}, {KAPPA_MAX}]", self.kappa));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn model_config(&self, kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            d_hidden: self.d_hidden,
            n_layers: self.n_layers,
            h_mlp: self.h_mlp,
            dropout: self.dropout,
            d_cat: self.d_cat,
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig { lr0: self.lr0, max_epochs: self.max_epochs, patience: self.patience, ..FitConfig::default() }
    }

    /// Random draw from the search grids; `max_epochs` and `patience` are kept.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TrainConfig {
        let log_uniform = |rng: &mut R, lo: f64, hi: f64| (rng.random_range(lo.ln()..=hi.ln())).exp();
        let pick = |rng: &mut R, grid: &[usize]| grid[rng.random_range(0..grid.len())];
        TrainConfig {
            lr0: log_uniform(rng, LR_RANGE.0, LR_RANGE.1),
            dropout: rng.random_range(DROPOUT_RANGE.0..=DROPOUT_RANGE.1),
            t_ehr: rng.random_range(MIN_STEPS..=MAX_STEPS),
            t_cxr: rng.random_range(MIN_STEPS..=MAX_STEPS),
            d_cat: pick(rng, &D_CAT_GRID),
            n_layers: pick(rng, &N_LAYERS_GRID),
            d_hidden: pick(rng, &D_HIDDEN_GRID),
            h_mlp: pick(rng, &H_MLP_GRID),
            kappa: log_uniform(rng, KAPPA_MIN, KAPPA_MAX),
            ..*self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bce_cases() {
        assert!((masked_bce(&[0.0, 0.0], &[1.0, 0.0], &[0, 1]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(masked_bce(&[40.0, -40.0], &[1.0, 0.0], &[0, 1]).unwrap() < 1e-15);
        assert!(masked_bce(&[0.0], &[1.0], &[]).is_err());
        let z = [0.3, -1.2, 2.5, 0.1];
        let y = [1.0, 0.0, 0.0, 1.0];
        let oracle: f64 = [0, 2, 3]
            .iter()
            .map(|&i| {
                let p = 1.0 / (1.0 + f64::exp(-z[i]));
                -(y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 3.0;
        assert!((masked_bce(&z, &y, &[0, 2, 3]).unwrap() - oracle).abs() < 1e-12);
        // Tape loss agrees with the plain loss.
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::new(vec![4, 1], z.to_vec()).unwrap());
        let t = tape.bce_with_logits(l, &y, &[0, 2, 3]).unwrap();
        assert!((tape.value(t).item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 0.01, 0.0), 0.01);
        assert!(cosine_lr(100, 100, 0.01, 0.001) - 0.001 < 1e-18);
        assert!((cosine_lr(50, 100, 0.01, 0.002) - 0.006).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=100).map(|e| cosine_lr(e, 100, 0.01, 0.0)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn one_param(v: &[f64]) -> (ParamStore, BTreeMap<String, Tensor>) {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![v.len()], v.to_vec()).unwrap());
        (p, BTreeMap::new())
    }

    #[test]
    fn adam_reference_formula() {
        let (mut p, mut g) = one_param(&[1.0, -2.0]);
        g.insert("w".into(), Tensor::new(vec![2], vec![0.5, -3.0]).unwrap());
        let mut s = AdamState::new();
        adam_step(&mut p, &g, &mut s, 0.1).unwrap();
        // After one step mhat = g and vhat = g^2.
        for (w0, gi, w1) in [(1.0, 0.5, p.get("w").unwrap().data()[0]), (-2.0, -3.0, p.get("w").unwrap().data()[1])] {
            let m = 0.1 * gi;
            let v = 0.001 * gi * gi;
            let expect = w0 - 0.1 * (m / 0.1) / ((v / 0.001f64).sqrt() + 1e-8);
            assert!((w1 - expect).abs() < 1e-12);
        }
        let before = p.get("w").unwrap().data()[0];
        adam_step(&mut p, &g, &mut s, 0.1).unwrap();
        assert!(p.get("w").unwrap().data()[0] < before);
    }

    #[test]
    fn adam_zero_grad_and_nan() {
        let (mut p, mut g) = one_param(&[1.0]);
        g.insert("w".into(), Tensor::zeros(&[1]));
        let mut s = AdamState::new();
        adam_step(&mut p, &g, &mut s, 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0]);
        g.insert("w".into(), Tensor::full(&[1], f64::NAN));
        let e = adam_step(&mut p, &g, &mut s, 0.1).unwrap_err();
        assert!(e.to_string().contains("`w`"));
    }

    /// Validation losses from a script; the parameter records the epoch.
    struct Scripted(Vec<f64>);

    impl Objective for Scripted {
        fn evaluate(&mut self, params: &ParamStore, epoch: usize) -> Result<EpochEval> {
            assert!((params.get("epoch").unwrap().item() - epoch as f64).abs() < 1e-6);
            let mut grads = BTreeMap::new();
            grads.insert("epoch".into(), Tensor::scalar(0.0));
            Ok(EpochEval { train_loss: 1.0, val_loss: self.0[epoch], grads })
        }
    }

    fn counter() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("epoch", Tensor::scalar(0.0));
        p
    }

    struct Counting(Scripted);

    impl Objective for Counting {
        fn evaluate(&mut self, params: &ParamStore, epoch: usize) -> Result<EpochEval> {
            let mut e = self.0.evaluate(params, epoch)?;
            // Gradient chosen so that one Adam step adds exactly lr; lr is constant 1.
            e.grads.insert("epoch".into(), Tensor::scalar(-1.0));
            Ok(e)
        }
    }

    #[test]
    fn early_stopping_restores_best() {
        let script: Vec<f64> = (0..100).map(|e| if e <= 5 { 1.0 - 0.1 * e as f64 } else { 0.5 }).collect();
        let cfg = FitConfig { lr0: 1.0, lr_min: 1.0, max_epochs: 100, patience: 10, min_delta: 1e-6 };
        let out = fit(counter(), &mut Counting(Scripted(script)), &cfg).unwrap();
        assert_eq!(out.stop, StopReason::EarlyStopped);
        assert_eq!(out.history.len(), 16);
        assert_eq!(out.best_epoch, 5);
        assert!((out.params.get("epoch").unwrap().item() - 5.0).abs() < 1e-6);
    }

    #[test]
    fn strictly_decreasing_runs_all_epochs() {
        let script: Vec<f64> = (0..100).map(|e| 10.0 - 0.01 * e as f64).collect();
        let cfg = FitConfig { lr0: 1.0, lr_min: 1.0, ..FitConfig::default() };
        let out = fit(counter(), &mut Counting(Scripted(script)), &cfg).unwrap();
        assert_eq!(out.stop, StopReason::MaxEpochs);
        assert_eq!(out.history.len(), 100);
        assert_eq!(out.best_epoch, 99);
    }

    #[test]
    fn divergence_keeps_history() {
        let script = vec![1.0, 0.9, f64::NAN, 0.1];
        let cfg = FitConfig { lr0: 1.0, lr_min: 1.0, max_epochs: 4, ..FitConfig::default() };
        let out = fit(counter(), &mut Counting(Scripted(script)), &cfg).unwrap();
        assert_eq!(out.stop, StopReason::Diverged);
        assert_eq!(out.history.len(), 3);
        assert_eq!(out.best_epoch, 1);
    }

    #[test]
    fn config_validation() {
        let c = TrainConfig::default();
        assert!(c.validate().is_ok());
        assert!(TrainConfig { d_hidden: 32, ..c }.validate().is_err());
        assert!(TrainConfig { lr0: 0.1, ..c }.validate().is_err());
        assert!(TrainConfig { t_ehr: 2, ..c }.validate().is_err());
        assert!(TrainConfig { max_epochs: 101, ..c }.validate().is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            c.sample(&mut rng).validate().unwrap();
        }
    }

    proptest! {
        #[test]
        fn best_params_have_min_val_loss(script in proptest::collection::vec(0.0f64..1.0, 1..60), patience in 1usize..12) {
            let cfg = FitConfig { lr0: 1.0, lr_min: 1.0, max_epochs: script.len(), patience, min_delta: 1e-6 };
            let out = fit(counter(), &mut Counting(Scripted(script.clone())), &cfg).unwrap();
            let seen: Vec<f64> = out.history.iter().map(|h| h.val_loss).collect();
            let min = seen.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert!(out.best_val_loss <= min + 1e-6);
            prop_assert_eq!(seen[out.best_epoch], out.best_val_loss);
            prop_assert!((out.params.get("epoch").unwrap().item() - out.best_epoch as f64).abs() < 1e-6);
        }
    }
}
