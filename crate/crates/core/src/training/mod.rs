//! Mini-batch training, evaluation, and the gradient-check harness.

mod adam;
mod gradcheck;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use gradcheck::{gradient_check, gradient_check_with, GradCheckReport, GroupReport, GRADCHECK_MAX_PARAMS};

use crate::classifier::{default_compressed_dim, Pooling};
use crate::error::{Error, Result};
use crate::model::{ContextualSource, Example, Gradients, Input, Model, ModelConfig, ParamGroup};
use crate::numerics::SeededRng;

/// Training and model hyperparameters. Defaults follow the reference setup:
/// batch 25, learning rate 0.001, five prototypes per label, 300-d word
/// vectors and a 150-per-direction BiLSTM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Prototypes per label (`t`).
    pub prototypes: usize,
    /// `m_p`
    pub embedding_dim: usize,
    /// `h`
    pub hidden: usize,
    /// `m_l`; `None` means `2h` (or the precomputed width).
    pub label_dim: Option<usize>,
    /// `m_f`; `None` means `10·L`.
    pub compressed_dim: Option<usize>,
    pub max_len: usize,
    pub min_count: usize,
    pub no_label_layer: bool,
    pub freeze_embeddings: bool,
    pub contextual: ContextualSource,
    pub pooling: Pooling,
    pub dropout: f64,
    pub clip_norm: Option<f64>,
    /// Fraction of each training class held out for model selection when no
    /// dev split exists.
    pub val_fraction: f64,
    /// Keep the epoch with the best validation accuracy (ties: lower loss).
    pub select_best: bool,
    pub workers: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            batch_size: 25,
            learning_rate: 0.001,
            epochs: 20,
            seed: 1,
            prototypes: 5,
            embedding_dim: 300,
            hidden: 150,
            label_dim: None,
            compressed_dim: None,
            max_len: 400,
            min_count: 1,
            no_label_layer: false,
            freeze_embeddings: false,
            contextual: ContextualSource::Bilstm,
            pooling: Pooling::Mean,
            dropout: 0.0,
            clip_norm: None,
            val_fraction: 0.1,
            select_best: true,
            workers: 1,
        }
    }
}

impl HyperParams {
    /// Small dimensions for quick runs: m_p 50, h 25, t 5.
    pub fn desk() -> Self {
        HyperParams {
            embedding_dim: 50,
            hidden: 25,
            prototypes: 5,
            ..HyperParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Usage("batch size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Usage(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !self.no_label_layer && self.prototypes == 0 {
            return Err(Error::Usage("t must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Usage("max length must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Usage(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Usage(format!("validation fraction must be in [0, 1), got {}", self.val_fraction)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Usage(format!("clip norm must be positive, got {c}")));
            }
        }
        if self.contextual == ContextualSource::Bilstm {
            if self.hidden == 0 || self.embedding_dim == 0 {
                return Err(Error::Usage("hidden size and embedding dim must be positive".into()));
            }
            if let Some(m_l) = self.label_dim {
                if m_l != 2 * self.hidden {
                    return Err(crate::error::dim_constraint(2 * self.hidden, m_l));
                }
            }
        }
        Ok(())
    }

    /// Resolves the model shape for `labels`. `precomputed_dim` is the width
    /// of the precomputed vectors, when that source is used.
    pub fn model_config(&self, labels: &[String], precomputed_dim: Option<usize>) -> Result<ModelConfig> {
        self.validate()?;
        let label_dim = match self.contextual {
            ContextualSource::Bilstm => self.label_dim.unwrap_or(2 * self.hidden),
            ContextualSource::Precomputed { .. } => {
                let dim = precomputed_dim
                    .ok_or_else(|| Error::Config("precomputed contextual source needs a vector file".into()))?;
                match self.label_dim {
                    Some(m_l) if m_l != dim => return Err(crate::error::dim_constraint(dim, m_l)),
                    _ => dim,
                }
            }
        };
        let config = ModelConfig {
            labels: labels.to_vec(),
            embedding_dim: self.embedding_dim,
            hidden: self.hidden,
            label_dim,
            prototypes: self.prototypes,
            compressed_dim: self.compressed_dim.unwrap_or_else(|| default_compressed_dim(labels.len())),
            label_layer: !self.no_label_layer,
            pooling: self.pooling,
            contextual: self.contextual,
            vocab_size: 0,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
    pub per_class: Vec<ClassMetrics>,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers <= 1 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Per-example loss and gradients, in input order regardless of `workers`.
fn example_gradients(
    model: &Model,
    batch: &[(&Example, Option<SeededRng>)],
    max_len: usize,
    dropout: f64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<(f64, Gradients)>> {
    let run = |(ex, rng): &(&Example, Option<SeededRng>)| -> Result<(f64, Gradients)> {
        let input = ex.input.padded(max_len);
        let mut rng = rng.clone();
        let trace = model.forward_with_dropout(&input, rng.as_mut().map(|r| (dropout, r)))?;
        let loss = model.loss(&trace, ex.gold)?;
        Ok((loss, model.backward(&trace, ex.gold)?))
    };
    match pool {
        None => batch.iter().map(run).collect(),
        Some(pool) => pool.install(|| batch.par_iter().map(run).collect()),
    }
}

pub fn evaluate(model: &Model, examples: &[Example]) -> Result<Metrics> {
    evaluate_with(model, examples, 1)
}

/// Argmax prediction per example; parameters are not touched.
pub fn evaluate_with(model: &Model, examples: &[Example], workers: usize) -> Result<Metrics> {
    let run = |ex: &Example| -> Result<(usize, f64)> {
        let trace = model.forward(&ex.input)?;
        Ok((trace.predicted(), model.loss(&trace, ex.gold)?))
    };
    // workers == 0: parallel on the ambient rayon pool.
    let outputs: Vec<(usize, f64)> = match workers {
        1 => examples.iter().map(run).collect::<Result<_>>()?,
        0 => examples.par_iter().map(run).collect::<Result<_>>()?,
        n => with_workers(n, || examples.par_iter().map(run).collect::<Result<_>>())?,
    };
    Ok(metrics_from(model.labels(), examples, &outputs))
}

fn metrics_from(labels: &[String], examples: &[Example], outputs: &[(usize, f64)]) -> Metrics {
    let l = labels.len();
    let mut tp = vec![0usize; l];
    let mut predicted = vec![0usize; l];
    let mut support = vec![0usize; l];
    let mut correct = 0;
    let mut loss = 0.0;
    for (ex, &(pred, ex_loss)) in examples.iter().zip(outputs) {
        support[ex.gold] += 1;
        predicted[pred] += 1;
        loss += ex_loss;
        if pred == ex.gold {
            correct += 1;
            tp[pred] += 1;
        }
    }
    let total = examples.len();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Metrics {
        accuracy: ratio(correct, total),
        loss: if total == 0 { 0.0 } else { loss / total as f64 },
        correct,
        total,
        per_class: (0..l)
            .map(|i| ClassMetrics {
                label: labels[i].clone(),
                precision: ratio(tp[i], predicted[i]),
                recall: ratio(tp[i], support[i]),
                support: support[i],
            })
            .collect(),
    }
}

/// Holds out `floor(fraction · n_c)` examples of every class `c`.
/// Returns `(train, validation)`.
pub fn stratified_split(examples: Vec<Example>, fraction: f64, labels: usize, rng: &mut SeededRng) -> (Vec<Example>, Vec<Example>) {
    let mut by_class: Vec<Vec<Example>> = (0..labels).map(|_| Vec::new()).collect();
    for ex in examples {
        by_class[ex.gold].push(ex);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for mut class in by_class {
        rng.shuffle(&mut class);
        let held = (class.len() as f64 * fraction).floor() as usize;
        let rest = class.split_off(held);
        val.extend(class);
        train.extend(rest);
    }
    (train, val)
}

/// Trains `model` in place of a copy and returns the kept parameters.
///
/// Batches are drawn from a per-epoch shuffle of `train_set`; each batch is
/// padded to its longest member. Gradients are averaged over the batch in
/// example order before one Adam step. When `val_set` is empty the
/// training set doubles as the selection set.
pub fn train(model: Model, train_set: &[Example], val_set: &[Example], hp: &HyperParams) -> Result<TrainOutcome> {
    hp.validate()?;
    if train_set.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let labels = model.config.label_count();
    if let Some(ex) = train_set.iter().chain(val_set).find(|e| e.gold >= labels) {
        return Err(Error::Usage(format!("example {} has unknown label index {}", ex.id, ex.gold)));
    }
    let select_set = if val_set.is_empty() { train_set } else { val_set };

    let layout = model.param_layout();
    let trainable: Vec<bool> = layout
        .iter()
        .map(|p| !(p.group == ParamGroup::Embedding && hp.freeze_embeddings))
        .collect();
    let sizes: Vec<usize> = layout.iter().zip(&trainable).filter(|(_, &t)| t).map(|(p, _)| p.rows * p.cols).collect();
    let mut adam = AdamState::new(&sizes);
    let mut shuffle_rng = SeededRng::with_stream(hp.seed, 1);

    let mut model = model;
    let mut best: Option<(f64, f64, usize, Model)> = None;
    let mut log = Vec::with_capacity(hp.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0u64;
    let pool = if hp.workers > 1 {
        rayon::ThreadPoolBuilder::new().num_threads(hp.workers).build().ok()
    } else {
        None
    };

    for epoch in 1..=hp.epochs {
        let started = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            step += 1;
            let max_len = chunk.iter().map(|&i| train_set[i].input.len()).max().unwrap_or(0);
            let batch: Vec<(&Example, Option<SeededRng>)> = chunk
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let rng = (hp.dropout > 0.0).then(|| SeededRng::with_stream(hp.seed, 2 + step * hp.batch_size as u64 + k as u64));
                    (&train_set[i], rng)
                })
                .collect();
            let per_example = example_gradients(&model, &batch, max_len, hp.dropout, pool.as_ref())?;
            let mut grads = model.zero_gradients();
            for (loss, g) in &per_example {
                loss_sum += loss;
                grads.add(g);
            }
            grads.scale(1.0 / chunk.len() as f64);
            if let Some(clip) = hp.clip_norm {
                let n = grads.norm();
                if n > clip {
                    grads.scale(clip / n);
                }
            }
            apply_update(&mut model, &grads, &trainable, &mut adam, hp.learning_rate)?;
        }
        if !model.is_finite() {
            return Err(Error::Dataset(format!("non-finite parameter after epoch {epoch}")));
        }
        let metrics = match &pool {
            Some(pool) => pool.install(|| evaluate_with(&model, select_set, 0))?,
            None => evaluate(&model, select_set)?,
        };
        let seconds = started.elapsed().as_secs_f64();
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_accuracy: metrics.accuracy,
            seconds,
        });
        if hp.select_best {
            let better = match &best {
                None => true,
                Some((acc, loss, _, _)) => metrics.accuracy > *acc || (metrics.accuracy == *acc && metrics.loss < *loss),
            };
            if better {
                best = Some((metrics.accuracy, metrics.loss, epoch, model.clone()));
            }
        }
    }
    let (model, best_epoch) = match best {
        Some((_, _, epoch, m)) => (m, epoch),
        None => (model, hp.epochs),
    };
    Ok(TrainOutcome { model, log, best_epoch })
}

fn apply_update(model: &mut Model, grads: &Gradients, trainable: &[bool], adam: &mut AdamState, lr: f64) -> Result<()> {
    let vocab_dim = model.embedding.as_ref().map(|e| (e.vocab_size(), e.dim()));
    let embedding_dense = match vocab_dim {
        Some((v, d)) if trainable[0] => Some(grads.embedding.to_dense(v, d)),
        _ => None,
    };
    let mut grad_refs: Vec<&[f64]> = Vec::with_capacity(trainable.len());
    if let Some(e) = &embedding_dense {
        grad_refs.push(e);
    }
    grad_refs.extend(grads.dense.iter().map(Vec::as_slice));
    let mut params: Vec<&mut [f64]> = model
        .param_slices_mut()
        .into_iter()
        .zip(trainable)
        .filter(|(_, &t)| t)
        .map(|(p, _)| p)
        .collect();
    adam_step(&mut params, &grad_refs, adam, lr)
}

/// Mean test accuracy over `repeats` runs with seeds `seed, seed+1, ...`.
pub fn mean_accuracy(accuracies: &[f64]) -> f64 {
    if accuracies.is_empty() {
        return 0.0;
    }
    accuracies.iter().sum::<f64>() / accuracies.len() as f64
}

/// Builds token inputs for documents, truncating to `max_len`.
pub fn token_input(model: &Model, tokens: &[String], max_len: usize) -> Input {
    let n = tokens.len().min(max_len);
    Input::tokens(model.vocab.encode(&tokens[..n]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let hp = HyperParams::default();
        assert_eq!(hp.batch_size, 25);
        assert_eq!(hp.learning_rate, 0.001);
        assert_eq!(hp.prototypes, 5);
        assert_eq!((hp.embedding_dim, hp.hidden), (300, 150));
        let desk = HyperParams::desk();
        assert_eq!((desk.embedding_dim, desk.hidden, desk.prototypes), (50, 25, 5));
    }

    #[test]
    fn validation_catches_bad_settings() {
        let hp = HyperParams {
            hidden: 150,
            label_dim: Some(200),
            ..HyperParams::default()
        };
        assert!(hp.validate().unwrap_err().to_string().contains("m_c == m_l"));
        let hp = HyperParams {
            prototypes: 0,
            ..HyperParams::default()
        };
        assert!(matches!(hp.validate(), Err(Error::Usage(_))));
        let hp = HyperParams {
            batch_size: 0,
            ..HyperParams::default()
        };
        assert!(hp.validate().is_err());
    }

    #[test]
    fn compressed_dim_defaults_to_ten_per_label() {
        let labels: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let c = HyperParams::desk().model_config(&labels, None).unwrap();
        assert_eq!(c.compressed_dim, 40);
        assert_eq!(c.label_dim, 50);
    }

    #[test]
    fn metrics_counts() {
        let labels = vec!["a".to_string(), "b".to_string()];
        let ex = |gold| Example {
            id: String::new(),
            input: Input::tokens(vec![]),
            gold,
        };
        let examples = vec![ex(0), ex(0), ex(1), ex(1)];
        let m = metrics_from(&labels, &examples, &[(0, 0.1), (1, 0.2), (1, 0.3), (1, 0.4)]);
        assert_eq!(m.correct, 3);
        assert_eq!(m.accuracy, 0.75);
        assert!((m.loss - 0.25).abs() < 1e-15);
        assert_eq!(m.per_class[0].precision, 1.0);
        assert_eq!(m.per_class[0].recall, 0.5);
        assert!((m.per_class[1].precision - 2.0 / 3.0).abs() < 1e-15);
    }
}
