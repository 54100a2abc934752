//! AdamW training, evaluation and k-fold cross-validation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint;
use crate::data::{kfold_split, preprocess, Sample};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{M2ANet, ModelConfig};
use crate::nn::ParamStore;
use crate::ops::{self, NormMode};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 90,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            problems.push(format!(
                "lr must be a finite non-negative number, got {}",
                self.lr
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            problems.push(format!(
                "weight_decay must be finite and non-negative, got {}",
                self.weight_decay
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            problems.push(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// First and second moment estimates of one tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One AdamW update of `param` in place at step `t` (1-based):
/// `p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p`, with the decay using the value before
/// the update.
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    state: &mut Moments,
    cfg: &TrainConfig,
    t: u64,
) {
    if state.m.len() != param.len() {
        state.m = vec![0.0; param.len()];
        state.v = vec![0.0; param.len()];
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let p = param[i];
        param[i] =
            p - cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon) - cfg.lr * cfg.weight_decay * p;
    }
}

/// AdamW over every tensor of a [`ParamStore`], in store order.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub step: u64,
    pub state: Vec<Moments>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// `grad(name)` returns the gradient of a parameter, `None` meaning zero.
    pub fn apply<'g>(
        &mut self,
        store: &mut ParamStore,
        cfg: &TrainConfig,
        grad: impl Fn(&str) -> Option<&'g Tensor>,
    ) -> Result<()> {
        self.step += 1;
        if self.state.len() != store.len() {
            self.state = vec![Moments::default(); store.len()];
        }
        for ((name, param), state) in store.iter_mut().zip(&mut self.state) {
            let zeros;
            let g = match grad(name) {
                Some(g) => {
                    if g.shape() != param.shape() {
                        return Err(Error::dim(
                            "adamw",
                            "shape",
                            format!("gradient of `{name}` has wrong shape"),
                        ));
                    }
                    g.data()
                }
                None => {
                    zeros = vec![0.0; param.numel()];
                    &zeros
                }
            };
            adamw_update(param.data_mut(), g, state, cfg, self.step);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "epoch",
            "train_loss",
            "train_accuracy",
            "val_loss",
            "val_accuracy",
        ])?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.train_accuracy.to_string(),
                opt(r.val_loss),
                opt(r.val_accuracy),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Preprocessed images at the model's input size, labels alongside.
pub struct Prepared {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Prepared {
    pub fn new(samples: &[&Sample], size: usize) -> Self {
        use rayon::prelude::*;
        Self {
            images: samples
                .par_iter()
                .map(|s| preprocess(&s.image, size))
                .collect(),
            labels: samples.iter().map(|s| s.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images: Vec<Tensor> = idx.iter().map(|&i| self.images[i].clone()).collect();
        Ok((
            Tensor::stack(&images)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}

/// Inference-mode logits of every prepared image, in order.
pub fn predict_logits(model: &M2ANet, data: &Prepared, batch: usize) -> Result<Vec<[f64; 2]>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = data.batch(chunk)?;
        let logits = model.predict(&x)?;
        let [n, k, _, _] = logits.shape();
        if k != 2 {
            return Err(Error::dim(
                "predict",
                "classes",
                format!("expected 2 logits, got {k}"),
            ));
        }
        for i in 0..n {
            out.push([logits.at([i, 0, 0, 0]), logits.at([i, 1, 0, 0])]);
        }
    }
    Ok(out)
}

fn argmax2(l: &[f64; 2]) -> usize {
    usize::from(l[1] > l[0])
}

fn softmax2(l: &[f64; 2]) -> f64 {
    1.0 / (1.0 + (l[0] - l[1]).exp())
}

fn mean_loss_and_accuracy(logits: &[[f64; 2]], labels: &[usize]) -> Result<(f64, f64)> {
    let flat: Vec<f64> = logits.iter().flatten().copied().collect();
    let t = Tensor::new([logits.len(), 2, 1, 1], flat)?;
    let (loss, _) = ops::cross_entropy(&t, labels)?;
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(l, &y)| argmax2(l) == y)
        .count();
    Ok((loss, correct as f64 / labels.len() as f64))
}

/// Hard predictions at the argmax decision, positive-class probability as score.
pub fn evaluate_prepared(model: &M2ANet, data: &Prepared, batch: usize) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Contract(
            "cannot evaluate an empty sample set".into(),
        ));
    }
    let logits = predict_logits(model, data, batch)?;
    let preds: Vec<usize> = logits.iter().map(argmax2).collect();
    let scores: Vec<f64> = logits.iter().map(softmax2).collect();
    MetricsReport::from_scores(&preds, &scores, &data.labels)
}

pub fn evaluate(model: &M2ANet, samples: &[&Sample], batch: usize) -> Result<MetricsReport> {
    evaluate_prepared(
        model,
        &Prepared::new(samples, model.config.input_size),
        batch,
    )
}

/// One optimisation step on a batch; returns the batch loss and logits.
pub fn train_step(
    model: &mut M2ANet,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    x: Tensor,
    labels: &[usize],
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let input = tape.constant(x);
    let logits = model.forward(&mut tape, &input, NormMode::Train)?;
    let loss = tape.cross_entropy(&logits, labels)?;
    let loss_value = loss.value().item()?;
    if !loss_value.is_finite() {
        return Err(Error::Diverged {
            step: opt.step as usize + 1,
            epoch: 0,
            loss: loss_value,
        });
    }
    let grads = tape.backward(&loss)?;
    let updates = tape.take_stat_updates();
    let logits = logits.value().clone();
    drop(tape);
    model.store.apply_stat_updates(&updates)?;
    opt.apply(&mut model.store, cfg, |name| grads.param(name))?;
    Ok((loss_value, logits))
}

/// Trains `model` in place. The sample order of every epoch comes from a
/// generator seeded with `cfg.seed`, so identical inputs give identical
/// parameters bit for bit.
pub fn train(
    model: &mut M2ANet,
    train_set: &Prepared,
    val_set: Option<&Prepared>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<History> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new();
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = train_set.batch(chunk)?;
            let (loss, _) = train_step(model, &mut opt, cfg, x, &labels).map_err(|e| match e {
                Error::Diverged { step, loss, .. } => Error::Diverged { step, epoch, loss },
                other => other,
            })?;
            loss_sum += loss * chunk.len() as f64;
        }
        let train_logits = predict_logits(model, train_set, cfg.batch_size)?;
        let (_, train_accuracy) = mean_loss_and_accuracy(&train_logits, &train_set.labels)?;
        let (val_loss, val_accuracy) = match val_set.filter(|v| !v.is_empty()) {
            Some(v) => {
                let logits = predict_logits(model, v, cfg.batch_size)?;
                let (l, a) = mean_loss_and_accuracy(&logits, &v.labels)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy,
            val_loss,
            val_accuracy,
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.4}, train acc {:.4}{}",
            cfg.epochs,
            record.train_loss,
            record.train_accuracy,
            record
                .val_accuracy
                .map_or(String::new(), |a| format!(", val acc {a:.4}"))
        );
        history.epochs.push(record);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0
                && (epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs)
            {
                let path = dir.join(format!("epoch_{epoch:03}.ckpt"));
                checkpoint::save(model, &path)?;
                history.checkpoints.push(path);
            }
        }
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossvalReport {
    pub model: String,
    pub folds: Vec<FoldResult>,
}

/// Percentages with two decimals, TPR then TNR: `"96.07 94.50"`.
pub fn fold_cell(tpr: f64, tnr: f64) -> String {
    format!("{:.2} {:.2}", tpr * 100.0, tnr * 100.0)
}

impl CrossvalReport {
    /// Header and a single row with one `TPR TNR` cell per fold.
    pub fn to_table(&self) -> String {
        let label = format!("M2ANET-{}", self.model);
        let width = label.len().max(5);
        let mut header = format!("{:<width$}", "Model");
        let mut sub = format!("{:<width$}", "");
        let mut row = format!("{label:<width$}");
        for f in &self.folds {
            header.push_str(&format!("  {:^11}", format!("k-fold {}", f.fold + 1)));
            sub.push_str(&format!("  {:^11}", "TPR   TNR"));
            row.push_str(&format!("  {:^11}", fold_cell(f.report.tpr, f.report.tnr)));
        }
        format!("{header}\n{sub}\n{row}\n")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "fold",
            "train_size",
            "test_size",
            "tpr",
            "tnr",
            "accuracy",
            "kappa",
            "roc_auc",
        ])?;
        for f in &self.folds {
            w.write_record([
                (f.fold + 1).to_string(),
                f.train_size.to_string(),
                f.test_size.to_string(),
                f.report.tpr.to_string(),
                f.report.tnr.to_string(),
                f.report.accuracy.to_string(),
                f.report.kappa.to_string(),
                f.report.auc().map_or_else(String::new, |a| a.to_string()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// For every fold, trains a freshly initialised model on the other folds and
/// evaluates it on the held-out one.
pub fn run_crossval(
    model_config: &ModelConfig,
    samples: &[Sample],
    cfg: &TrainConfig,
    k: usize,
    split_seed: u64,
) -> Result<CrossvalReport> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let plan = kfold_split(&labels, k, split_seed)?;
    let all: Vec<&Sample> = samples.iter().collect();
    let prepared = Prepared::new(&all, model_config.input_size);
    let subset = |idx: &[usize]| Prepared {
        images: idx.iter().map(|&i| prepared.images[i].clone()).collect(),
        labels: idx.iter().map(|&i| prepared.labels[i]).collect(),
    };
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let train_idx = plan.train_indices(fold);
        let test_idx = plan.fold(fold);
        let (train_set, test_set) = (subset(&train_idx), subset(&test_idx));
        let mut model = M2ANet::build(model_config.clone(), cfg.seed)?;
        train(&mut model, &train_set, None, cfg, None)?;
        let report = evaluate_prepared(&model, &test_set, cfg.batch_size)?;
        log::info!(
            "fold {}/{k}: {}",
            fold + 1,
            fold_cell(report.tpr, report.tnr)
        );
        folds.push(FoldResult {
            fold,
            train_size: train_idx.len(),
            test_size: test_idx.len(),
            report,
        });
    }
    Ok(CrossvalReport {
        model: model_config.variant.clone(),
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_first_step_hand_value() {
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut w = [1.0];
        let mut s = Moments::default();
        adamw_update(&mut w, &[1.0], &mut s, &cfg, 1);
        // m̂ = v̂ = 1, so the step is lr / (1 + ε)
        assert!((w[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((w[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn adamw_pure_decay() {
        let cfg = TrainConfig::default();
        let mut w = [2.0, -3.0];
        let mut s = Moments::default();
        adamw_update(&mut w, &[0.0, 0.0], &mut s, &cfg, 1);
        for (got, w0) in w.iter().zip([2.0, -3.0]) {
            assert!((got - w0 * (1.0 - 5e-6)).abs() <= 1e-15 * w0.abs(), "{got}");
        }
    }

    #[test]
    fn adamw_zero_everything_is_identity() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut w = [0.5, -0.25];
        let mut s = Moments::default();
        for t in 1..=3 {
            adamw_update(&mut w, &[0.0, 0.0], &mut s, &cfg, t);
        }
        assert_eq!(w, [0.5, -0.25]);
    }

    #[test]
    fn reference_defaults() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.epochs, c.batch_size, c.lr, c.weight_decay),
            (90, 64, 1e-4, 0.05)
        );
    }

    #[test]
    fn fold_cell_format() {
        assert_eq!(fold_cell(0.9607, 0.945), "96.07 94.50");
    }

    #[test]
    fn config_validation_lists_problems() {
        let c = TrainConfig {
            epochs: 0,
            beta1: 1.0,
            ..TrainConfig::default()
        };
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("epochs") && e.contains("beta1"), "{e}");
    }
}
