//! Training loop: forward, BCE-with-logits, backward, Adam.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::batch::{Batch, Loader};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::model::checkpoint::{Checkpoint, META_PREFIX, OPT_PREFIX};
use crate::model::Model;
use crate::ops::norm::BnMode;
use crate::optim::{collect_grads, Adam, Hyperparams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: u64,
    /// Global step counter, starting at 1.
    pub step: u64,
    pub loss: f64,
}

/// Hooks called by [`Trainer::fit`].
pub trait Observer {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    /// After validation of `epoch`; `improved` means a new best macro F1.
    fn on_epoch(&mut self, _trainer: &Trainer, _epoch: u64, _report: &MetricsReport, _improved: bool) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    pub steps: Vec<StepRecord>,
    pub reports: Vec<MetricsReport>,
    pub best_macro_f1: f64,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub hp: Hyperparams,
    /// Shuffle seed; epoch `e` uses `seed ^ e`.
    pub seed: u64,
    /// Epochs completed.
    pub epoch: u64,
    pub step: u64,
    /// Best validation macro F1 so far, negative before any validation.
    pub best_macro_f1: f64,
}

impl Trainer {
    pub fn new(model: Model<f32>, hp: Hyperparams, seed: u64) -> Result<Self> {
        hp.validate()?;
        let adam = Adam::new(&model.store, &hp);
        Ok(Trainer { model, adam, hp, seed, epoch: 0, step: 0, best_macro_f1: -1.0 })
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    /// A non-finite loss aborts without touching the parameters.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f64> {
        let mut graph = Graph::new();
        let fwd = self.model.forward(&mut graph, batch.inputs.clone(), BnMode::Train)?;
        let loss_var = graph.bce_with_logits(fwd.logits, batch.targets(), self.hp.pos_weight)?;
        let loss = graph.value(loss_var).item() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss is {loss} at epoch {} step {} (batch {:?})",
                self.epoch,
                self.step + 1,
                batch.ids
            )));
        }
        let mut grads = graph.backward(loss_var)?;
        let grads = collect_grads(&mut grads, &fwd.param_vars);
        if let Some((p, _)) = self
            .model
            .store
            .params()
            .iter()
            .zip(&grads)
            .find(|(_, g)| g.as_ref().is_some_and(|g| !g.is_finite()))
        {
            return Err(Error::NonFinite(format!("gradient of `{}` at step {}", p.name, self.step + 1)));
        }
        self.adam.step(&mut self.model.store, &grads)?;
        self.model.apply_updates(&fwd.updates);
        self.step += 1;
        Ok(loss)
    }

    /// One pass over `loader` in the seeded order of the current epoch.
    pub fn train_epoch(&mut self, loader: &Loader, observer: &mut dyn Observer) -> Result<Vec<StepRecord>> {
        let epoch = self.epoch;
        let mut records = Vec::new();
        for batch in loader.epoch(self.hp.batch_size, self.seed, epoch) {
            let loss = self.train_step(&batch?)?;
            let rec = StepRecord { epoch, step: self.step, loss };
            observer.on_step(&rec)?;
            records.push(rec);
        }
        self.epoch += 1;
        Ok(records)
    }

    /// Train until `hp.epochs` epochs are complete, validating after each.
    pub fn fit(&mut self, train: &Loader, val: &Loader, observer: &mut dyn Observer) -> Result<TrainOutcome> {
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let mut outcome = TrainOutcome::default();
        while (self.epoch as usize) < self.hp.epochs {
            let epoch = self.epoch;
            outcome.steps.extend(self.train_epoch(train, observer)?);
            let (report, _) = evaluate(&self.model, val, self.hp.batch_size)?;
            let improved = report.macro_f1 > self.best_macro_f1;
            if improved {
                self.best_macro_f1 = report.macro_f1;
            }
            log::info!("epoch {epoch}: val macro F1 {:.4}", report.macro_f1);
            observer.on_epoch(self, epoch, &report, improved)?;
            outcome.reports.push(report);
        }
        outcome.best_macro_f1 = self.best_macro_f1;
        Ok(outcome)
    }

    /// Model, optimizer state and counters.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        let st = &self.adam.state;
        for ((p, m), v) in self.model.store.params().iter().zip(&st.m).zip(&st.v) {
            ck.insert(format!("{OPT_PREFIX}m.{}", p.name), m.clone());
            ck.insert(format!("{OPT_PREFIX}v.{}", p.name), v.clone());
        }
        ck.insert(format!("{OPT_PREFIX}t"), encode_u64(st.t));
        ck.insert(format!("{META_PREFIX}epoch"), encode_u64(self.epoch));
        ck.insert(format!("{META_PREFIX}step"), encode_u64(self.step));
        ck.insert(format!("{META_PREFIX}best_macro_f1"), Tensor::scalar(self.best_macro_f1 as f32));
        ck
    }

    /// Resume from a checkpoint written by [`Trainer::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, hp: Hyperparams, seed: u64, path: &Path) -> Result<Self> {
        let model = ck.to_model(path)?;
        let mut t = Trainer::new(model, hp, seed)?;
        let names: Vec<String> = t.model.store.params().iter().map(|p| p.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            for (kind, slot) in [("m", &mut t.adam.state.m[i]), ("v", &mut t.adam.state.v[i])] {
                let stored = ck.require(&format!("{OPT_PREFIX}{kind}.{name}"), path)?;
                if stored.shape() != slot.shape() {
                    return Err(Error::format(path, format!("optimizer state for `{name}` has the wrong shape")));
                }
                *slot = stored.clone();
            }
        }
        t.adam.state.t = decode_u64(ck.require(&format!("{OPT_PREFIX}t"), path)?, path)?;
        t.epoch = decode_u64(ck.require(&format!("{META_PREFIX}epoch"), path)?, path)?;
        t.step = decode_u64(ck.require(&format!("{META_PREFIX}step"), path)?, path)?;
        t.best_macro_f1 = ck.require(&format!("{META_PREFIX}best_macro_f1"), path)?.data()[0] as f64;
        Ok(t)
    }
}

/// Counters are stored as four 16-bit limbs so that f32 holds them exactly.
fn encode_u64(v: u64) -> Tensor<f32> {
    Tensor::from_fn(vec![4], |i| ((v >> (16 * i)) & 0xffff) as f32)
}

fn decode_u64(t: &Tensor<f32>, path: &Path) -> Result<u64> {
    if t.shape() != [4] || t.data().iter().any(|&x| x.fract() != 0.0 || !(0.0..65536.0).contains(&x)) {
        return Err(Error::format(path, "malformed counter"));
    }
    Ok(t.data().iter().enumerate().map(|(i, &x)| (x as u64) << (16 * i)).sum())
}

/// Eval-mode probabilities for every record of `loader`, in manifest order.
pub fn predict_all(model: &Model<f32>, loader: &Loader, batch_size: usize) -> Result<Vec<f64>> {
    let mut probs = Vec::with_capacity(loader.len());
    for batch in loader.sequential(batch_size.max(1)) {
        let p = model.predict(batch?.inputs)?;
        if !p.is_finite() {
            return Err(Error::NonFinite("model produced a non-finite probability".into()));
        }
        probs.extend(p.data().iter().map(|&x| x as f64));
    }
    Ok(probs)
}

/// Validation report at the default threshold, plus the probabilities.
pub fn evaluate(model: &Model<f32>, loader: &Loader, batch_size: usize) -> Result<(MetricsReport, Vec<f64>)> {
    let probs = predict_all(model, loader, batch_size)?;
    let report = metrics::evaluate(&probs, &loader.manifest().labels(), metrics::DEFAULT_THRESHOLD)?;
    Ok((report, probs))
}
