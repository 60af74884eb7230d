use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::metrics::{compute_metrics, MetricsReport};
use crate::data::MultimodalExample;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::mode::Mode;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub grad_accum_steps: usize,
    /// Overrides the model's hidden (and tied gate) dropout when set.
    pub dropout_p: Option<f64>,
    /// Overrides the model's gate shift cap when set.
    pub beta_shift: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle: bool,
    /// Restore the parameters of the epoch with the lowest validation MAE.
    pub select_best: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            grad_accum_steps: 1,
            dropout_p: None,
            beta_shift: None,
            epochs: 20,
            batch_size: 16,
            shuffle: true,
            select_best: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate {} must be >= 0", self.learning_rate));
        }
        if self.grad_accum_steps == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("grad_accum_steps, batch_size and epochs must be positive".into());
        }
        if let Some(p) = self.dropout_p {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("dropout_p {p} outside [0, 1)"));
            }
        }
        if let Some(b) = self.beta_shift {
            if !(b.is_finite() && b > 0.0) {
                return bad(format!("beta_shift {b} must be positive"));
            }
        }
        Ok(())
    }

    /// Examples consumed per optimizer step.
    pub fn group_size(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-example L1 loss seen during the epoch (training mode).
    pub train_loss: f64,
    pub steps: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub validation: Option<MetricsReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept when `select_best` is on.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// L1 loss and parameter gradients of one example.
fn example_gradient(model: &EncoderModel, ex: &MultimodalExample, mode: Mode) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let b = model.params().bind(&mut g, true);
    let out = model.forward(&mut g, &b, &ex.to_input(), mode)?;
    let label = g.constant(Tensor::scalar(ex.label));
    let diff = g.sub(out.prediction, label)?;
    let loss = g.abs(diff)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    Ok((value, b.grads(&g)?))
}

/// Train in place with per-example-averaged L1 loss.
///
/// Each optimizer step consumes `batch_size * grad_accum_steps` examples and
/// uses the mean of their gradients, so splitting a batch into micro-batches
/// does not change the update. Per-example gradients are computed in
/// parallel and reduced in example order, keeping results independent of
/// the thread count.
pub fn train(
    model: &mut EncoderModel,
    data: &[MultimodalExample],
    cfg: &TrainConfig,
    validation: Option<&[MultimodalExample]>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if cfg.dropout_p.is_some() || cfg.beta_shift.is_some() {
        let mut mc = model.config().clone();
        if let Some(p) = cfg.dropout_p {
            mc.hidden_dropout_p = p;
        }
        if let Some(b) = cfg.beta_shift {
            mc.beta_shift = b;
        }
        *model = EncoderModel::from_parts(mc, model.params().clone())?;
    }
    let mut state = AdamState::new(model.params());
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut order_rng);
        }
        let seeds: Vec<u64> = (0..data.len()).map(|_| dropout_rng.next_u64()).collect();
        let mut loss_sum = 0.0;
        for (chunk_idx, group) in order.chunks(cfg.group_size()).enumerate() {
            let base = chunk_idx * cfg.group_size();
            let m: &EncoderModel = model;
            let results: Vec<Result<(f64, Vec<Tensor>)>> = group
                .par_iter()
                .enumerate()
                .map(|(k, &i)| example_gradient(m, &data[i], Mode::Train { seed: seeds[base + k] }))
                .collect();
            let mut total: Option<Vec<Tensor>> = None;
            for (k, r) in results.into_iter().enumerate() {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss {loss} at epoch {} on example {}",
                        epoch + 1,
                        group[k]
                    )));
                }
                loss_sum += loss;
                match &mut total {
                    None => total = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = total.expect("chunks are nonempty");
            let inv = 1.0 / group.len() as f64;
            for t in &mut grads {
                t.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            adam_step(model.params_mut(), &grads, &mut state, cfg.learning_rate)?;
        }
        let validation = match validation {
            Some(v) if !v.is_empty() => Some(evaluate(model, v)?),
            _ => None,
        };
        if cfg.select_best {
            if let Some(v) = &validation {
                if best.as_ref().is_none_or(|(mae, _, _)| v.mae < *mae) {
                    best = Some((v.mae, epoch + 1, model.params().flatten()));
                }
            }
        }
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / data.len() as f64,
            steps: state.step,
            validation,
        });
    }
    if let Some((_, epoch, flat)) = best {
        model.params_mut().assign_flat(&flat)?;
        history.best_epoch = Some(epoch);
    }
    Ok(history)
}

/// Eval-mode predictions, parallel over examples.
pub fn predict_all(model: &EncoderModel, data: &[MultimodalExample]) -> Result<Vec<f64>> {
    data.par_iter().map(|ex| model.predict(&ex.to_input())).collect()
}

pub fn evaluate(model: &EncoderModel, data: &[MultimodalExample]) -> Result<MetricsReport> {
    let preds = predict_all(model, data)?;
    let labels: Vec<f64> = data.iter().map(|e| e.label).collect();
    compute_metrics(&preds, &labels)
}
