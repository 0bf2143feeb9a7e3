//! Training loop, evaluation, modality ablations, frozen-backbone transfer
//! and finite-difference gradient checks.

mod adamw;
mod gradcheck;
mod metrics;

pub use adamw::{AdamW, AdamWConfig};
pub use gradcheck::{gradcheck_fn, gradcheck_model, GradcheckOptions, GradcheckReport, GroupResult};
pub use metrics::{mae, median, rmse, Metrics, NeumaierSum};

use crate::data::{Dataset, Normalization, Split};
use crate::error::{bail, Result};
use crate::fusion::{sequence_length, ModalityMask, MolMix};
use crate::nn::Ctx;
use crate::tensor::{write_checkpoint, InitMode, ParamStore, Precision, Scalar};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mae,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    #[default]
    Mae,
    Rmse,
}

/// Optimization settings. Defaults (lr 1e-3, batch 16, 4096-token cap) are
/// choices for desk-scale synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    /// Cap on fused-sequence tokens per batch.
    pub max_tokens: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub loss: LossKind,
    pub metric: MetricKind,
    pub mask: ModalityMask,
    pub seed: u64,
    pub precision: Precision,
    /// Dataset target column to fit; the first one when unset.
    pub target: Option<String>,
    /// Stop at an evaluation point once train MAE falls below this value.
    pub stop_at_train_mae: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            warmup_steps: 0,
            batch_size: 16,
            max_tokens: 4096,
            max_steps: 1000,
            eval_every: 100,
            loss: LossKind::Mae,
            metric: MetricKind::Mae,
            mask: ModalityMask::ALL,
            seed: 0,
            precision: Precision::F32,
            target: None,
            stop_at_train_mae: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            bail!(Config, "learning rate must be positive, got {}", self.lr);
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.max_tokens == 0 {
            bail!(Config, "batch_size, eval_every and max_tokens must be at least 1");
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            ..AdamWConfig::default()
        }
    }
}

/// Parameters, optimizer moments and bookkeeping of one run.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub params: ParamStore<T>,
    pub optimizer: AdamW<T>,
    pub step: u64,
    pub best_step: Option<u64>,
    pub best_val: Option<f64>,
}

impl<T: Scalar> TrainState<T> {
    /// Parameters followed by `adam.m.*` and `adam.v.*` moment arrays.
    pub fn write_checkpoint<W: Write>(&self, w: W) -> Result<()> {
        let mut arrays: Vec<(String, &[T])> = self.params.iter().map(|(n, t)| (n.to_string(), t.data())).collect();
        for (i, (n, _)) in self.params.iter().enumerate() {
            arrays.push((format!("adam.m.{n}"), &self.optimizer.m[i]));
            arrays.push((format!("adam.v.{n}"), &self.optimizer.v[i]));
        }
        let refs: Vec<(&str, &[T])> = arrays.iter().map(|(n, d)| (n.as_str(), *d)).collect();
        write_checkpoint(w, &refs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    /// Mean training loss (normalized units) since the previous point.
    pub train_loss: f64,
    pub val: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub target: String,
    pub mask: ModalityMask,
    pub seed: u64,
    pub steps: usize,
    pub normalization: Normalization,
    pub best_step: Option<u64>,
    pub best_val: Option<f64>,
    pub train: Metrics,
    pub val: Metrics,
    pub test: Option<Metrics>,
}

impl RunReport {
    /// Test metric of the configured kind, falling back to validation.
    pub fn headline(&self, kind: MetricKind) -> f64 {
        self.test.as_ref().unwrap_or(&self.val).get(kind)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub history: Vec<EvalPoint>,
    /// Loss of every optimizer step, normalized units.
    pub step_losses: Vec<f64>,
    pub report: RunReport,
}

impl<T> TrainOutcome<T> {
    /// `step,split,metric,value` rows.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("step,split,metric,value\n");
        for p in &self.history {
            s.push_str(&format!("{},train,loss,{}\n", p.step, p.train_loss));
            if let Some(t) = &p.train {
                s.push_str(&format!("{},train,mae,{}\n{},train,rmse,{}\n", p.step, t.mae, p.step, t.rmse));
            }
            s.push_str(&format!("{},val,mae,{}\n{},val,rmse,{}\n", p.step, p.val.mae, p.step, p.val.rmse));
        }
        let r = &self.report;
        for (name, m) in [("train", Some(&r.train)), ("val", Some(&r.val)), ("test", r.test.as_ref())] {
            if let Some(m) = m {
                s.push_str(&format!("final,{name},mae,{}\nfinal,{name},rmse,{}\n", m.mae, m.rmse));
            }
        }
        s
    }
}

/// Groups `indices` into batches of at most `batch_size` molecules and
/// `max_tokens` fused tokens (a single oversized molecule still forms a
/// batch).
pub fn pack_batches(model: &MolMix, ds: &Dataset, indices: &[usize], mask: ModalityMask, batch_size: usize, max_tokens: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut tokens = 0;
    for &i in indices {
        let m = &ds.molecules[i];
        let len = sequence_length(
            m.smiles.chars().count(),
            m.graph.num_atoms(),
            model.config.gine_layers,
            m.conformers.len(),
            mask,
        );
        if !cur.is_empty() && (cur.len() >= batch_size || tokens + len > max_tokens) {
            out.push(std::mem::take(&mut cur));
            tokens = 0;
        }
        cur.push(i);
        tokens += len;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Predictions (de-normalized) for `indices`, in order.
#[allow(clippy::too_many_arguments)]
pub fn predict_indices<T: Scalar>(
    model: &MolMix,
    store: &ParamStore<T>,
    ds: &Dataset,
    indices: &[usize],
    norm: &Normalization,
    target: usize,
    mask: ModalityMask,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut preds = Vec::with_capacity(indices.len());
    for batch in pack_batches(model, ds, indices, mask, cfg.batch_size.max(32), cfg.max_tokens) {
        let mols: Vec<_> = batch.iter().map(|&i| &ds.molecules[i]).collect();
        let mut ctx = Ctx::new(store, model.config.attention);
        let y = model.predict_batch(&mut ctx, &mols, mask)?;
        let y = ctx.tape.value(y);
        preds.extend((0..mols.len()).map(|r| norm.denormalize(target, y.get2(r, 0).as_f64())));
    }
    Ok(preds)
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Scalar>(
    model: &MolMix,
    store: &ParamStore<T>,
    ds: &Dataset,
    indices: &[usize],
    norm: &Normalization,
    target: usize,
    mask: ModalityMask,
    cfg: &TrainConfig,
) -> Result<Metrics> {
    let preds = predict_indices(model, store, ds, indices, norm, target, mask, cfg)?;
    let truth: Vec<f64> = indices.iter().map(|&i| ds.molecules[i].targets[target]).collect();
    Ok(Metrics::new(&preds, &truth))
}

pub fn resolve_target(ds: &Dataset, cfg: &TrainConfig) -> Result<usize> {
    match &cfg.target {
        Some(name) => ds.target_index(name),
        None if ds.target_names.is_empty() => bail!(Config, "dataset has no targets"),
        None => Ok(0),
    }
}

/// Trains from `params`. With `trainable` set, only flagged tensors get
/// gradients and move.
pub fn train<T: Scalar>(
    model: &MolMix,
    params: ParamStore<T>,
    trainable: Option<Vec<bool>>,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if model.config.targets != 1 {
        bail!(Config, "training fits one target per run; the readout has {} outputs", model.config.targets);
    }
    let target = resolve_target(ds, cfg)?;
    let train_idx = ds.indices(Split::Train);
    let val_idx = ds.indices(Split::Val);
    let test_idx = ds.indices(Split::Test);
    if train_idx.is_empty() || val_idx.is_empty() {
        bail!(Config, "training needs non-empty train and val splits ({} / {})", train_idx.len(), val_idx.len());
    }
    if let Some(t) = &trainable {
        if t.len() != params.len() {
            bail!(Contract, "trainable mask covers {} of {} parameters", t.len(), params.len());
        }
    }
    let norm = ds.normalization()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut state = TrainState {
        optimizer: AdamW::new(&params, cfg.adamw()),
        params,
        step: 0,
        best_step: None,
        best_val: None,
    };
    let mut best_params: Option<ParamStore<T>> = None;
    let mut history = Vec::new();
    let mut step_losses = Vec::with_capacity(cfg.max_steps);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut since_eval = NeumaierSum::default();
    let mut since_count = 0usize;

    while (state.step as usize) < cfg.max_steps {
        // next batch from a per-epoch shuffle
        let mut batch = Vec::new();
        let mut tokens = 0;
        loop {
            if cursor >= order.len() {
                order = train_idx.clone();
                order.shuffle(&mut rng);
                cursor = 0;
                if !batch.is_empty() {
                    break;
                }
            }
            let i = order[cursor];
            let m = &ds.molecules[i];
            let len = sequence_length(
                m.smiles.chars().count(),
                m.graph.num_atoms(),
                model.config.gine_layers,
                m.conformers.len(),
                cfg.mask,
            );
            if !batch.is_empty() && (batch.len() >= cfg.batch_size || tokens + len > cfg.max_tokens) {
                break;
            }
            batch.push(i);
            tokens += len;
            cursor += 1;
        }

        let mols: Vec<_> = batch.iter().map(|&i| &ds.molecules[i]).collect();
        let y: Vec<T> = batch
            .iter()
            .map(|&i| T::lit(norm.normalize(target, ds.molecules[i].targets[target])))
            .collect();
        let (loss_value, grads) = {
            let mut ctx = Ctx::new(&state.params, model.config.attention);
            if let Some(t) = &trainable {
                ctx = ctx.with_trainable(t);
            }
            let pred = model.predict_batch(&mut ctx, &mols, cfg.mask)?;
            let loss = match cfg.loss {
                LossKind::Mae => ctx.tape.l1_loss(pred, &y)?,
                LossKind::Mse => ctx.tape.mse_loss(pred, &y)?,
            };
            ctx.tape.backward(loss)?;
            (ctx.tape.value(loss).data()[0].as_f64(), ctx.param_grads())
        };
        state.optimizer.step(&mut state.params, &grads)?;
        state.step += 1;
        step_losses.push(loss_value);
        since_eval.add(loss_value);
        since_count += 1;

        if state.step as usize % cfg.eval_every == 0 {
            let val = evaluate(model, &state.params, ds, &val_idx, &norm, target, cfg.mask, cfg)?;
            let train_m = match cfg.stop_at_train_mae {
                Some(_) => Some(evaluate(model, &state.params, ds, &train_idx, &norm, target, cfg.mask, cfg)?),
                None => None,
            };
            let v = val.get(cfg.metric);
            if state.best_val.map_or(true, |b| v < b) {
                state.best_val = Some(v);
                state.best_step = Some(state.step);
                best_params = Some(state.params.clone());
            }
            let stop = matches!((&train_m, cfg.stop_at_train_mae), (Some(m), Some(th)) if m.mae < th);
            history.push(EvalPoint {
                step: state.step as usize,
                train_loss: since_eval.value() / since_count.max(1) as f64,
                val,
                train: train_m,
            });
            since_eval = NeumaierSum::default();
            since_count = 0;
            if stop {
                break;
            }
        }
    }

    // early stopping on the train set keeps the final parameters
    let final_params = match (cfg.stop_at_train_mae, best_params) {
        (None, Some(p)) => p,
        _ => state.params.clone(),
    };
    let train_m = evaluate(model, &final_params, ds, &train_idx, &norm, target, cfg.mask, cfg)?;
    let val_m = evaluate(model, &final_params, ds, &val_idx, &norm, target, cfg.mask, cfg)?;
    let test_m = if test_idx.is_empty() {
        None
    } else {
        Some(evaluate(model, &final_params, ds, &test_idx, &norm, target, cfg.mask, cfg)?)
    };
    let report = RunReport {
        target: ds.target_names[target].clone(),
        mask: cfg.mask,
        seed: cfg.seed,
        steps: state.step as usize,
        normalization: norm,
        best_step: state.best_step,
        best_val: state.best_val,
        train: train_m,
        val: val_m,
        test: test_m,
    };
    state.params = final_params;
    Ok(TrainOutcome {
        state,
        history,
        step_losses,
        report,
    })
}

/// Fresh model parameters for `seed` trained on `ds`.
pub fn train_fresh<T: Scalar>(model: &MolMix, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let (params, _) = MolMix::init::<T>(&model.config, model.vocab.clone(), cfg.seed, InitMode::Glorot)?;
    train(model, params, None, ds, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: ModalityMask,
    pub seeds: Vec<u64>,
    /// Headline metric (test, else val) per seed.
    pub values: Vec<f64>,
    pub median: f64,
    pub mean: f64,
    pub std: f64,
}

/// One training run per (mask, seed) with otherwise identical settings.
pub fn ablate<T: Scalar>(
    model: &MolMix,
    ds: &Dataset,
    masks: &[ModalityMask],
    cfg: &TrainConfig,
    seeds: &[u64],
    mut on_run: impl FnMut(&ModalityMask, u64, &TrainOutcome<T>),
) -> Result<Vec<AblationRow>> {
    if masks.is_empty() || seeds.is_empty() {
        bail!(Config, "ablation needs at least one mask and one seed");
    }
    let mut rows = Vec::new();
    for &mask in masks {
        let mut values = Vec::new();
        for &seed in seeds {
            let run_cfg = TrainConfig {
                mask,
                seed,
                ..cfg.clone()
            };
            let out = train_fresh::<T>(model, ds, &run_cfg)?;
            values.push(out.report.headline(cfg.metric));
            on_run(&mask, seed, &out);
        }
        let (mean, std) = metrics::mean_std(&values);
        rows.push(AblationRow {
            mask,
            seeds: seeds.to_vec(),
            median: median(&values),
            mean,
            std,
            values,
        });
    }
    Ok(rows)
}

/// Name prefix of the tensors trained in transfer mode.
pub const READOUT_FINAL: &str = "readout.fc2.";

pub fn readout_only_mask<T: Scalar>(store: &ParamStore<T>) -> Vec<bool> {
    store.names().iter().map(|n| n.starts_with(READOUT_FINAL)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub seed: u64,
    pub pretrained: RunReport,
    pub random: RunReport,
}

/// Linear-readout-only training on `ds` from a pretrained backbone and
/// from a random one. The final readout layer is freshly initialized in
/// both arms.
pub fn transfer<T: Scalar>(model: &MolMix, pretrained: &ParamStore<T>, ds: &Dataset, cfg: &TrainConfig) -> Result<(TransferReport, [TrainOutcome<T>; 2])> {
    let (fresh, _) = MolMix::init::<T>(&model.config, model.vocab.clone(), cfg.seed, InitMode::Glorot)?;
    let mut warm = fresh.clone();
    warm.load_from(pretrained)?;
    for id in fresh.ids() {
        if fresh.name(id).starts_with(READOUT_FINAL) {
            warm.get_mut(id).data_mut().copy_from_slice(fresh.get(id).data());
        }
    }
    let mask = readout_only_mask(&fresh);
    let a = train(model, warm, Some(mask.clone()), ds, cfg)?;
    let b = train(model, fresh, Some(mask), ds, cfg)?;
    let report = TransferReport {
        seed: cfg.seed,
        pretrained: a.report.clone(),
        random: b.report.clone(),
    };
    Ok((report, [a, b]))
}
