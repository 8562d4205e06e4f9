//! End-to-end glue: dataset → vocabulary → model → training → test metrics.

use std::path::Path;

use crate::contextual::PrecomputedStore;
use crate::datapipe::{Dataset, Document};
use crate::embedding::{load_pretrained, LoadReport, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{ContextualSource, Example, Input, Model};
use crate::numerics::SeededRng;
use crate::training::{evaluate_with, stratified_split, train, EpochLog, HyperParams, Metrics};

#[derive(Debug, Clone, Copy, Default)]
pub struct Sources<'a> {
    /// GloVe-style text vectors for the BiLSTM path.
    pub pretrained: Option<&'a Path>,
    /// Per-token vectors for the precomputed path.
    pub precomputed: Option<&'a PrecomputedStore>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub test: Option<Metrics>,
    pub pretrained: Option<LoadReport>,
}

/// Converts documents into model inputs, truncating token sequences to
/// `max_len`. Precomputed models look documents up by id.
pub fn examples_for(model: &Model, docs: &[Document], max_len: usize, precomputed: Option<&PrecomputedStore>) -> Result<Vec<Example>> {
    docs.iter()
        .map(|d| {
            let gold = model
                .labels()
                .iter()
                .position(|l| *l == d.label)
                .ok_or_else(|| Error::Dataset(format!("document {} has unknown label {:?}", d.id, d.label)))?;
            let input = match model.config.contextual {
                ContextualSource::Bilstm => {
                    let n = d.tokens.len().min(max_len);
                    Input::tokens(model.vocab.encode(&d.tokens[..n]))
                }
                ContextualSource::Precomputed { layers } => {
                    let store = precomputed
                        .ok_or_else(|| Error::Config("model needs a precomputed contextual file".into()))?;
                    Input::Layers(store.sequences(&d.id, layers, model.config.label_dim)?)
                }
            };
            Ok(Example {
                id: d.id.clone(),
                input,
                gold,
            })
        })
        .collect()
}

/// Builds a fresh model for `dataset` under `hp`.
pub fn build_model(dataset: &Dataset, hp: &HyperParams, sources: Sources<'_>) -> Result<(Model, Option<LoadReport>)> {
    hp.validate()?;
    let mut rng = SeededRng::with_stream(hp.seed, 0);
    let (vocab, precomputed_dim) = match hp.contextual {
        ContextualSource::Bilstm => {
            let corpus: Vec<&[String]> = dataset.train.iter().map(|d| &d.tokens[..d.tokens.len().min(hp.max_len)]).collect();
            let corpus: Vec<Vec<&str>> = corpus.iter().map(|t| t.iter().map(String::as_str).collect()).collect();
            (Vocabulary::build(&corpus, hp.min_count)?, None)
        }
        ContextualSource::Precomputed { .. } => {
            let store = sources
                .precomputed
                .ok_or_else(|| Error::Config("precomputed contextual source needs a vector file".into()))?;
            (Vocabulary::from_tokens(Vec::new())?, Some(store.dim))
        }
    };
    let config = hp.model_config(&dataset.labels, precomputed_dim)?;
    let (embedding, report) = match (hp.contextual, sources.pretrained) {
        (ContextualSource::Bilstm, Some(path)) => {
            let (table, report) = load_pretrained(path, &vocab, hp.embedding_dim, &mut rng)?;
            (Some(table), Some(report))
        }
        _ => (None, None),
    };
    let mut model = Model::init(config, vocab, embedding, &mut rng)?;
    if let Some(e) = &mut model.embedding {
        e.trainable = !hp.freeze_embeddings;
    }
    Ok((model, report))
}

/// Trains on `dataset.train` (holding out a stratified validation slice
/// when there is no dev split) and scores the kept model on the test split.
pub fn fit(dataset: &Dataset, hp: &HyperParams, sources: Sources<'_>) -> Result<FitOutcome> {
    let (model, pretrained) = build_model(dataset, hp, sources)?;
    let train_all = examples_for(&model, &dataset.train, hp.max_len, sources.precomputed)?;
    let (train_set, val_set) = match &dataset.dev {
        Some(dev) => (train_all, examples_for(&model, dev, hp.max_len, sources.precomputed)?),
        None if hp.val_fraction > 0.0 => {
            let mut rng = SeededRng::with_stream(hp.seed, 3);
            stratified_split(train_all, hp.val_fraction, dataset.labels.len(), &mut rng)
        }
        None => (train_all, Vec::new()),
    };
    let outcome = train(model, &train_set, &val_set, hp)?;
    let test = if dataset.test.is_empty() {
        None
    } else {
        let test_set = examples_for(&outcome.model, &dataset.test, hp.max_len, sources.precomputed)?;
        Some(evaluate_with(&outcome.model, &test_set, hp.workers)?)
    };
    Ok(FitOutcome {
        model: outcome.model,
        log: outcome.log,
        best_epoch: outcome.best_epoch,
        test,
        pretrained,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub prototypes: usize,
    pub accuracy: f64,
    pub seconds: f64,
}

/// Trains one model per prototype count with the same seed and reports
/// test accuracy for each.
pub fn sweep_prototypes(dataset: &Dataset, hp: &HyperParams, t_values: &[usize], sources: Sources<'_>) -> Result<Vec<SweepRow>> {
    if t_values.is_empty() {
        return Err(Error::Usage("no t values to sweep".into()));
    }
    if let Some(bad) = t_values.iter().find(|&&t| t == 0) {
        return Err(Error::Usage(format!("t must be at least 1, got {bad}")));
    }
    if hp.no_label_layer {
        return Err(Error::Usage("sweeping t requires the label-guided layer".into()));
    }
    if dataset.test.is_empty() {
        return Err(Error::Dataset("sweep needs a non-empty test split".into()));
    }
    t_values
        .iter()
        .map(|&t| {
            let started = std::time::Instant::now();
            let hp = HyperParams {
                prototypes: t,
                ..hp.clone()
            };
            let outcome = fit(dataset, &hp, sources)?;
            Ok(SweepRow {
                prototypes: t,
                accuracy: outcome.test.map_or(0.0, |m| m.accuracy),
                seconds: started.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

/// `t,accuracy,seconds` with a header line. `timing = false` writes 0 for
/// seconds so reruns compare byte-for-byte.
pub fn sweep_csv(rows: &[SweepRow], timing: bool) -> String {
    let mut out = String::from("t,accuracy,seconds\n");
    for r in rows {
        let secs = if timing { r.seconds } else { 0.0 };
        out.push_str(&format!("{},{},{:.3}\n", r.prototypes, r.accuracy, secs));
    }
    out
}
