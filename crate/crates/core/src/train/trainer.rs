use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SgdrSchedule;
use crate::catalog::LabeledExample;
use crate::error::{Error, Result};
use crate::models::{EncodedProduct, MultiCnn};
use crate::tensor::{ops, Real, Tape, Tensor};

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub momentum: f64,
    /// Drop probability for hidden fully-connected activations; 0 disables.
    #[serde(default)]
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 7,
            batch_size: 64,
            base_lr: 0.05,
            min_lr: 0.0,
            momentum: 0.0,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        SgdrSchedule::new(self.base_lr, self.min_lr, 1).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
    pub final_lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: MultiCnn<f32>,
    /// `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub curve: Vec<EpochMetrics>,
}

/// Class index of every example's label.
pub fn label_indices(labels: &[String], examples: &[LabeledExample]) -> Result<Vec<usize>> {
    let index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    examples
        .iter()
        .map(|ex| {
            index
                .get(ex.label.as_str())
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("label {:?} is not a model class", ex.label)))
        })
        .collect()
}

/// Mean cross-entropy over `encoded`, chunks evaluated in parallel and summed in order.
fn mean_loss<T: Real>(model: &MultiCnn<T>, encoded: &[EncodedProduct], labels: &[usize]) -> Result<f64> {
    let chunks: Vec<(usize, usize)> = (0..encoded.len())
        .step_by(EVAL_CHUNK)
        .map(|s| (s, (s + EVAL_CHUNK).min(encoded.len())))
        .collect();
    let sums = chunks
        .par_iter()
        .map(|&(s, e)| {
            let refs: Vec<&EncodedProduct> = encoded[s..e].iter().collect();
            let mut tape = Tape::new();
            let logits = model.forward(&mut tape, &refs)?;
            let (loss, _) = ops::softmax_cross_entropy(tape.value(logits), &labels[s..e])?;
            Ok(loss.as_f64() * (e - s) as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sums.iter().sum::<f64>() / encoded.len() as f64)
}

/// Minibatch SGD on softmax cross-entropy with warm-restart cosine
/// learning rates. Deterministic for a fixed seed. `on_epoch` sees each
/// epoch's metrics as soon as they are known.
pub fn train(
    mut model: MultiCnn<f32>,
    train: &[LabeledExample],
    validation: &[LabeledExample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let y_train = label_indices(model.class_labels(), train)?;
    let y_val = label_indices(model.class_labels(), validation)?;
    let x_train: Vec<EncodedProduct> = train.iter().map(|ex| model.encode(&ex.product)).collect();
    let x_val: Vec<EncodedProduct> = validation.iter().map(|ex| model.encode(&ex.product)).collect();

    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let schedule = SgdrSchedule::new(config.base_lr, config.min_lr, steps_per_epoch)?;
    let mut velocity: Vec<Tensor<f32>> = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = None;
    let mut curve = Vec::with_capacity(config.epochs);
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = config.base_lr;
        for batch in order.chunks(config.batch_size) {
            lr = schedule.lr_at(step);
            let xs: Vec<&EncodedProduct> = batch.iter().map(|&i| &x_train[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| y_train[i]).collect();
            let mut tape = Tape::new();
            let loss = if config.dropout > 0.0 {
                model.loss_with_dropout(&mut tape, &xs, &ys, config.dropout, &mut rng)?
            } else {
                model.loss(&mut tape, &xs, &ys)?
            };
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|&i| train[i].product.id.as_str()).collect();
                return Err(Error::NonFinite(format!(
                    "loss {value} at step {step} (epoch {epoch}, lr {lr}), batch ids {ids:?}"
                )));
            }
            loss_sum += value * batch.len() as f64;
            let params = model.params_mut();
            params.zero_grad();
            tape.backward(loss, params)?;
            let (lr32, mu) = (lr as f32, config.momentum as f32);
            for (p, v) in params.iter_mut().zip(&mut velocity) {
                if mu == 0.0 {
                    ops::axpy(p.value.data_mut(), -lr32, p.grad.data());
                } else {
                    for (vi, &g) in v.data_mut().iter_mut().zip(p.grad.data()) {
                        *vi = mu * *vi + g;
                    }
                    ops::axpy(p.value.data_mut(), -lr32, v.data());
                }
            }
            step += 1;
        }
        let train_loss = loss_sum / train.len() as f64;
        let validation_loss = if x_val.is_empty() {
            None
        } else {
            Some(mean_loss(&model, &x_val, &y_val)?)
        };
        let selection = validation_loss.unwrap_or(train_loss);
        if selection < best_loss {
            best_loss = selection;
            best_epoch = Some(epoch);
            best = model.clone();
        }
        let m = EpochMetrics {
            epoch,
            train_loss,
            validation_loss,
            final_lr: lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train loss {train_loss:.4}, validation loss {}, {:.1}s",
            validation_loss.map_or("n/a".to_string(), |v| format!("{v:.4}")),
            m.seconds
        );
        on_epoch(&m);
        curve.push(m);
    }
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        log::info!(
            "first-epoch train loss is {:.2}x the final one",
            first.train_loss / last.train_loss
        );
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        curve,
    })
}

/// Mean loss of `model` over `examples`.
pub fn dataset_loss(model: &MultiCnn<f32>, examples: &[LabeledExample]) -> Result<f64> {
    let y = label_indices(model.class_labels(), examples)?;
    let x: Vec<EncodedProduct> = examples.iter().map(|ex| model.encode(&ex.product)).collect();
    mean_loss(model, &x, &y)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::catalog::Product;
    use crate::models::{ChannelSpec, DictionarySet, ModelConfig, StructuredMode, StructuredSpec};
    use crate::tensor::ConvBankSpec;
    use crate::text::build_dictionary;

    fn toy() -> (MultiCnn<f32>, Vec<LabeledExample>) {
        let words = ["red shirt", "blue shoe", "green hat"];
        let data: Vec<LabeledExample> = (0..30)
            .map(|i| LabeledExample {
                product: Product::new(format!("p{i}")).with_text("product_name", words[i % 3]),
                label: format!("c{}", i % 3),
            })
            .collect();
        let mut dicts = DictionarySet::new();
        dicts.insert("title".into(), build_dictionary(words, 20).unwrap());
        let config = ModelConfig {
            channels: vec![ChannelSpec {
                attribute: "product_name".into(),
                dictionary: "title".into(),
                max_len: 6,
            }],
            structured: StructuredSpec {
                mode: StructuredMode::None,
                ..Default::default()
            },
            conv: ConvBankSpec {
                widths: vec![1, 2],
                filters_per_width: 4,
                embed_dim: 6,
            },
            fc_sizes: vec![8],
            num_classes: 3,
        };
        let labels = (0..3).map(|i| format!("c{i}")).collect();
        (MultiCnn::new(config, Arc::new(dicts), labels, 1).unwrap(), data)
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (model, data) = toy();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train(model.clone(), &data, &data, &cfg, |_| {}).unwrap();
        assert!(out.curve.is_empty());
        assert_eq!(out.best_epoch, None);
        assert_eq!(out.best.params(), model.params());
    }

    #[test]
    fn deterministic_and_learns() {
        let (model, data) = toy();
        let cfg = TrainConfig {
            epochs: 7,
            batch_size: 4,
            base_lr: 0.1,
            seed: 3,
            ..Default::default()
        };
        let a = train(model.clone(), &data, &data[..9], &cfg, |_| {}).unwrap();
        let b = train(model, &data, &data[..9], &cfg, |_| {}).unwrap();
        assert_eq!(a.best.params(), b.best.params());
        assert_eq!(a.curve.len(), 7);
        let first = a.curve[0].train_loss;
        assert!(a.curve.last().unwrap().train_loss < first * 0.5);
        let best = a.best_epoch.unwrap();
        let min = a
            .curve
            .iter()
            .map(|m| m.validation_loss.unwrap())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(a.curve[best - 1].validation_loss.unwrap(), min);
        assert!((dataset_loss(&a.best, &data[..9]).unwrap() - min).abs() < 1e-12);
    }

    #[test]
    fn dropout_is_seeded_and_only_affects_training() {
        let (model, data) = toy();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            base_lr: 0.1,
            dropout: 0.3,
            seed: 3,
            ..Default::default()
        };
        let a = train(model.clone(), &data, &[], &cfg, |_| {}).unwrap();
        let b = train(model.clone(), &data, &[], &cfg, |_| {}).unwrap();
        assert_eq!(a.best.params(), b.best.params());
        let plain = train(model, &data, &[], &TrainConfig { dropout: 0.0, ..cfg.clone() }, |_| {}).unwrap();
        assert_ne!(a.best.params(), plain.best.params());
        let p = &data[0].product;
        assert_eq!(a.best.logits(p).unwrap(), a.best.logits(p).unwrap());
        assert!(TrainConfig { dropout: 1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn single_batch_loss_decreases_monotonically() {
        let (model, data) = toy();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 64,
            base_lr: 0.01,
            min_lr: 0.0,
            ..Default::default()
        };
        let mut m = model;
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let out = train(m, &data, &[], &cfg, |_| {}).unwrap();
            let loss = out.curve[0].train_loss;
            assert!(loss < last, "{loss} !< {last}");
            last = loss;
            m = out.best;
        }
    }

    #[test]
    fn unknown_label_rejected() {
        let (model, mut data) = toy();
        data[0].label = "nope".into();
        assert!(train(model, &data, &[], &TrainConfig::default(), |_| {}).is_err());
    }

    #[test]
    fn diverging_loss_reports_step() {
        let (model, data) = toy();
        let cfg = TrainConfig {
            epochs: 3,
            base_lr: 1e30,
            ..Default::default()
        };
        let err = train(model, &data, &[], &cfg, |_| {}).unwrap_err().to_string();
        assert!(err.contains("at step"), "{err}");
        assert!(err.contains("batch ids"), "{err}");
    }
}
