//! Adam training loop, validation tracking and softmax feature export.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use colearn_autograd::{Element, Tape, Tensor};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clinical::Label;
use crate::error::{invalid, Error, Result};
use crate::network::{ParamGraph, INPUT_CHANNELS};
use crate::plots::{line_chart, Series};
use crate::preprocess::{augment, AugmentSpec, InputTensor};
use crate::seeds::{self, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Loss weights of the benign and malignant class.
    pub class_weights: Option<[f64; 2]>,
    /// Derive class weights from inverse training-set frequencies.
    pub inverse_frequency_weights: bool,
    pub augment: bool,
    pub max_rotation_deg: f64,
    pub max_shift_voxels: usize,
    pub aux_training_manifest: Option<std::path::PathBuf>,
    /// Auxiliary samples mixed into each epoch, as a multiple of the training-set size.
    pub aux_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let aug = AugmentSpec::default();
        Self {
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            class_weights: None,
            inverse_frequency_weights: false,
            augment: true,
            max_rotation_deg: aug.max_rotation_deg,
            max_shift_voxels: aug.max_shift_voxels,
            aux_training_manifest: None,
            aux_ratio: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(invalid!("batch_size and epochs must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid!("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(invalid!("need beta1, beta2 in [0, 1) and eps > 0"));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(invalid!("class weights must be non-negative and not both zero"));
            }
        }
        if !(self.aux_ratio >= 0.0) {
            return Err(invalid!("aux_ratio must be non-negative"));
        }
        Ok(())
    }
}

/// One preprocessed subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    pub input: InputTensor,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &BTreeMap<String, Tensor<T>>) -> Self {
        let zeros = || params.iter().map(|(k, p)| (k.clone(), vec![T::zero(); p.len()])).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are left alone.
pub fn adam_step<T: Element>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| invalid!("gradient for unknown parameter `{name}`"))?;
        if p.shape() != g.shape() {
            return Err(invalid!("gradient of `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape()));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in `{name}` at element {i}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let f = T::from_f64_lossy;
    let (b1, b2, lr, eps) = (f(cfg.beta1), f(cfg.beta2), f(cfg.learning_rate), f(cfg.eps));
    let (c1, c2) = (f(1.0 - cfg.beta1.powi(t)), f(1.0 - cfg.beta2.powi(t)));
    let one = T::one();
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
        for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Consecutive batches of `size`; a trailing singleton joins the previous
/// batch unless `singleton_ok`.
fn batches(order: &[usize], size: usize, singleton_ok: bool) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if !singleton_ok && out.len() > 1 && out[out.len() - 1].len() == 1 {
        out.pop();
        let start = order.len() - 1 - out.pop().expect("two batches").len();
        out.push(&order[start..]);
    }
    out
}

fn stack<T: Element>(inputs: &[&InputTensor]) -> Result<Tensor<T>> {
    let side = inputs[0].side();
    let data: Vec<T> = inputs
        .iter()
        .flat_map(|t| t.data().iter().map(|&v| T::from_f64_lossy(v as f64)))
        .collect();
    Ok(Tensor::new([inputs.len(), INPUT_CHANNELS, side, side, side], data)?)
}

fn check_sides<T: Element>(pg: &ParamGraph<T>, samples: &[Sample]) -> Result<()> {
    let s = pg.config().input_side;
    match samples.iter().find(|x| x.input.side() != s) {
        Some(x) => Err(invalid!("subject {} has side {}, the network expects {s}", x.subject_id, x.input.side())),
        None => Ok(()),
    }
}

/// Mean cross-entropy and accuracy in inference mode.
pub fn evaluate<T: Element>(pg: &ParamGraph<T>, samples: &[Sample], batch_size: usize) -> Result<(f64, f64)> {
    let preds = predict(pg, samples, batch_size)?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (p, s) in preds.iter().zip(samples) {
        let q = p.probs[s.label as usize].max(f64::MIN_POSITIVE);
        loss -= q.ln();
        correct += usize::from((p.probs[1] >= p.probs[0]) == (s.label == 1));
    }
    let n = samples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub probs: [f64; 2],
}

/// Inference-mode softmax outputs `(prob_benign, prob_malignant)` per subject.
pub fn predict<T: Element>(pg: &ParamGraph<T>, samples: &[Sample], batch_size: usize) -> Result<Vec<Prediction>> {
    check_sides(pg, samples)?;
    let mut net = pg.clone();
    let mut out = Vec::with_capacity(samples.len());
    let mut tape = Tape::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        tape.reset();
        let inputs: Vec<&InputTensor> = chunk.iter().map(|s| &s.input).collect();
        let fwd = net.forward(&mut tape, stack(&inputs)?, false)?;
        let probs = tape.value(fwd.probs)?.data();
        for (i, s) in chunk.iter().enumerate() {
            out.push(Prediction {
                subject_id: s.subject_id.clone(),
                probs: [probs[2 * i].as_f64(), probs[2 * i + 1].as_f64()],
            });
        }
    }
    Ok(out)
}

pub struct FitOutcome<T> {
    pub history: History,
    pub best: ParamGraph<T>,
    pub last: ParamGraph<T>,
}

fn class_weights(cfg: &TrainConfig, train: &[Sample]) -> Option<[f64; 2]> {
    if cfg.inverse_frequency_weights {
        let pos = train.iter().filter(|s| s.label == 1).count() as f64;
        let neg = train.len() as f64 - pos;
        let n = train.len() as f64;
        return Some([n / (2.0 * neg.max(1.0)), n / (2.0 * pos.max(1.0))]);
    }
    cfg.class_weights
}

/// Subjects for one training run. `ct_pad` fills voxels that augmentation
/// moves in from outside the field of view.
#[derive(Debug, Clone, Copy)]
pub struct FitData<'a> {
    pub train: &'a [Sample],
    pub val: &'a [Sample],
    pub aux: &'a [Sample],
    pub ct_pad: f32,
}

/// Trains `pg` on `train` (plus auxiliary samples, which never enter
/// validation) and returns the history together with the parameters of the
/// epoch with the lowest validation loss.
///
/// `on_epoch` observes each finished epoch.
pub fn fit<T: Element>(
    pg: ParamGraph<T>,
    data: &FitData<'_>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome<T>> {
    cfg.validate()?;
    let FitData { train, val, aux, ct_pad } = *data;
    if train.is_empty() || val.is_empty() {
        return Err(invalid!("training and validation sets must both be non-empty"));
    }
    let val_ids: HashSet<&str> = val.iter().map(|s| s.subject_id.as_str()).collect();
    let mut seen = HashSet::new();
    for s in train.iter().chain(aux) {
        if val_ids.contains(s.subject_id.as_str()) {
            return Err(invalid!("subject {} is in both training and validation", s.subject_id));
        }
        if !seen.insert(s.subject_id.as_str()) {
            return Err(invalid!("subject {} appears twice among training subjects", s.subject_id));
        }
    }
    check_sides(&pg, train)?;
    check_sides(&pg, val)?;
    check_sides(&pg, aux)?;

    let weights = class_weights(cfg, train).map(|w| w.map(T::from_f64_lossy));
    let adam = AdamConfig::from(cfg);
    let mut net = pg;
    let mut state = AdamState::new(net.params());
    let mut history = History::default();
    let mut best: Option<(f64, ParamGraph<T>)> = None;
    let n_aux = ((train.len() as f64 * cfg.aux_ratio).round() as usize).min(aux.len());
    let mut tape = Tape::new();
    // With a 1³ final stage a lone sample leaves batchnorm a single value.
    let singleton_ok = net.config().input_side >> net.config().num_maxpools > 1;

    for epoch in 0..cfg.epochs {
        // Indices >= train.len() refer to auxiliary samples.
        let mut order: Vec<usize> = (0..train.len()).collect();
        if n_aux > 0 {
            let mut pool: Vec<usize> = (0..aux.len()).collect();
            pool.shuffle(&mut seeds::rng(cfg.seed, &[stream::AUX, epoch as u64]));
            order.extend(pool[..n_aux].iter().map(|i| train.len() + i));
        }
        order.shuffle(&mut seeds::rng(cfg.seed, &[stream::SHUFFLE, epoch as u64]));
        let sample = |i: usize| if i < train.len() { &train[i] } else { &aux[i - train.len()] };

        let (mut loss_sum, mut correct, mut count) = (0.0, 0usize, 0usize);
        for batch in batches(&order, cfg.batch_size, singleton_ok) {
            let inputs: Vec<InputTensor> = batch
                .par_iter()
                .map(|&i| {
                    let s = sample(i);
                    if !cfg.augment {
                        return s.input.clone();
                    }
                    let spec = AugmentSpec {
                        max_rotation_deg: cfg.max_rotation_deg,
                        max_shift_voxels: cfg.max_shift_voxels,
                        rng_seed: seeds::derive(cfg.seed, &[stream::AUGMENT, epoch as u64, i as u64]),
                    };
                    augment(&s.input, &spec, ct_pad)
                })
                .collect();
            let labels: Vec<usize> = batch.iter().map(|&i| sample(i).label as usize).collect();
            let refs: Vec<&InputTensor> = inputs.iter().collect();

            tape.reset();
            let fwd = net.forward(&mut tape, stack(&refs)?, true)?;
            let loss = tape.cross_entropy(fwd.logits, &labels, weights.as_ref().map(|w| &w[..]))?;
            let loss_value = tape.value(loss)?.data()[0].as_f64();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!("training loss is {loss_value} at epoch {epoch}")));
            }
            let probs = tape.value(fwd.probs)?.data();
            for (r, &l) in labels.iter().enumerate() {
                correct += usize::from((probs[2 * r + 1] >= probs[2 * r]) == (l == 1));
            }
            loss_sum += loss_value * batch.len() as f64;
            count += batch.len();

            tape.backward(loss)?;
            let mut grads = BTreeMap::new();
            for (name, &var) in &fwd.params {
                if let Some(g) = tape.grad(var)? {
                    grads.insert(name.clone(), g);
                }
            }
            adam_step(net.params_mut(), &grads, &mut state, &adam)?;
        }

        let (val_loss, val_acc) = evaluate(&net, val, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("validation loss is {val_loss} at epoch {epoch}")));
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / count as f64,
            train_acc: correct as f64 / count as f64,
            val_loss,
            val_acc,
        };
        on_epoch(&record);
        history.epochs.push(record);
        if best.as_ref().is_none_or(|(l, _)| val_loss < *l) {
            best = Some((val_loss, net.clone()));
            history.best_epoch = Some(epoch);
        }
    }
    let (_, best) = best.expect("at least one epoch");
    Ok(FitOutcome {
        history,
        best,
        last: net,
    })
}

pub fn write_history_csv(h: &History, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
    for e in &h.epochs {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loss and accuracy curves for training and validation.
pub fn history_svg(h: &History) -> String {
    let xs: Vec<f64> = h.epochs.iter().map(|e| e.epoch as f64).collect();
    let pick = |f: fn(&EpochRecord) -> f64| h.epochs.iter().map(f).collect::<Vec<_>>();
    let series = [
        Series::new("train loss", xs.clone(), pick(|e| e.train_loss)),
        Series::new("val loss", xs.clone(), pick(|e| e.val_loss)),
        Series::new("train acc", xs.clone(), pick(|e| e.train_acc)),
        Series::new("val acc", xs, pick(|e| e.val_acc)),
    ];
    line_chart("Training history", "epoch", "loss / accuracy", &series, None)
}

pub fn write_predictions_csv(preds: &[Prediction], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("subject_id,image_feature_0,image_feature_1\n");
    for p in preds {
        text.push_str(&format!("{},{},{}\n", p.subject_id, p.probs[0], p.probs[1]));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_predictions_csv(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["subject_id", "image_feature_0", "image_feature_1"] {
        return Err(Error::format(path, "expected columns subject_id,image_feature_0,image_feature_1"));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let num = |i: usize, column: &str| {
            row[i].trim().parse::<f64>().map_err(|_| Error::Csv {
                path: path.to_path_buf(),
                line,
                column: column.into(),
                message: format!("`{}` is not a number", &row[i]),
            })
        };
        out.push(Prediction {
            subject_id: row[0].to_string(),
            probs: [num(1, "image_feature_0")?, num(2, "image_feature_1")?],
        });
    }
    Ok(out)
}
