mod args;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use lguided::contextual::PrecomputedStore;
use lguided::datapipe::{load_checkpoint, load_dataset, synth_corpus, to_tsv, write_atomic, Dataset, ModelCheckpoint, Split, SynthSpec};
use lguided::label_attention::AttentionExport;
use lguided::numerics::SeededRng;
use lguided::pipeline::{examples_for, fit, sweep_csv, sweep_prototypes, Sources};
use lguided::training::{evaluate_with, mean_accuracy, EpochLog, Metrics};
use lguided::{ContextualSource, Error, ErrorClass, HyperParams, Model, Result};
use serde::Serialize;

use args::{AttendArgs, Cli, Command, EvalArgs, SweepArgs, SynthArgs, TrainArgs};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Io => 4,
            })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Attend(a) => cmd_attend(&a),
        Command::SweepT(a) => cmd_sweep_t(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::Usage(format!("cannot encode output: {e}")))?;
    println!("{text}");
    Ok(())
}

fn open_store(path: Option<&PathBuf>) -> Result<Option<PrecomputedStore>> {
    path.map(|p| PrecomputedStore::open(p)).transpose()
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    test: Option<Metrics>,
    accuracies: Vec<f64>,
    mean_accuracy: f64,
    pretrained: Option<lguided::embedding::LoadReport>,
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let hp = a.model.hyperparams()?;
    if a.repeats == 0 {
        return Err(Error::Usage("--repeats must be at least 1".into()));
    }
    let dataset = load_dataset(&a.model.data, hp.max_len)?;
    let store = open_store(a.model.precomputed.as_ref())?;
    let sources = Sources {
        pretrained: a.model.pretrained.as_deref(),
        precomputed: store.as_ref(),
    };
    create_dir(&a.out)?;

    let mut first = None;
    let mut accuracies = Vec::with_capacity(a.repeats);
    for r in 0..a.repeats {
        let run_hp = HyperParams {
            seed: hp.seed + r as u64,
            ..hp.clone()
        };
        let outcome = fit(&dataset, &run_hp, sources)?;
        for e in &outcome.log {
            eprintln!(
                "seed {} epoch {}/{}: train loss {:.5}, selection accuracy {:.4}",
                run_hp.seed, e.epoch, run_hp.epochs, e.train_loss, e.val_accuracy
            );
        }
        if let Some(m) = &outcome.test {
            accuracies.push(m.accuracy);
        }
        if first.is_none() {
            first = Some(outcome);
        }
    }
    let outcome = first.expect("at least one repeat");

    let mut log = String::new();
    for e in &outcome.log {
        let e = EpochLog {
            seconds: if a.no_timing { 0.0 } else { e.seconds },
            ..e.clone()
        };
        log.push_str(&serde_json::to_string(&e).map_err(|e| Error::Usage(e.to_string()))?);
        log.push('\n');
    }
    let bytes = ModelCheckpoint::from_model(&outcome.model, &hp).to_bytes()?;
    write_atomic(&a.out.join("checkpoint.lgdl"), &bytes)?;
    write_atomic(&a.out.join("metrics.jsonl"), log.as_bytes())?;
    eprintln!("wrote {}", a.out.display());

    print_json(&TrainSummary {
        best_epoch: outcome.best_epoch,
        test: outcome.test,
        mean_accuracy: mean_accuracy(&accuracies),
        accuracies,
        pretrained: outcome.pretrained,
    })
}

/// Loads a checkpoint and a dataset whose label set must match it.
fn load_pair(checkpoint: &Path, data: &Path) -> Result<(Model, HyperParams, Dataset)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let hp = ckpt.meta.hyperparams.clone();
    let model = ckpt.to_model()?;
    let dataset = load_dataset(data, hp.max_len)?;
    if dataset.labels != model.labels() {
        return Err(Error::Dataset(format!(
            "label set mismatch: checkpoint has {:?}, dataset has {:?}",
            model.labels(),
            dataset.labels
        )));
    }
    Ok((model, hp, dataset))
}

fn check_store(model: &Model, store: &Option<PrecomputedStore>) -> Result<()> {
    if matches!(model.config.contextual, ContextualSource::Precomputed { .. }) && store.is_none() {
        return Err(Error::Usage("this checkpoint reads precomputed vectors; pass --precomputed FILE".into()));
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let store = open_store(a.precomputed.as_ref())?;
    let (model, hp, dataset) = load_pair(&a.checkpoint, &a.data)?;
    check_store(&model, &store)?;
    let docs = dataset.split(Split::from(a.split))?;
    let examples = examples_for(&model, docs, hp.max_len, store.as_ref())?;
    print_json(&evaluate_with(&model, &examples, a.workers.max(1))?)
}

fn cmd_attend(a: &AttendArgs) -> Result<()> {
    let store = open_store(a.precomputed.as_ref())?;
    let (model, hp, dataset) = load_pair(&a.checkpoint, &a.data)?;
    check_store(&model, &store)?;
    if !model.config.label_layer {
        return Err(Error::Usage("this checkpoint has no label-guided layer, so there is no attention to export".into()));
    }
    let split = Split::from(a.split);
    let docs = dataset.split(split)?;
    let chosen = a
        .ids
        .iter()
        .map(|id| {
            docs.iter().find(|d| d.id == *id).ok_or_else(|| {
                Error::Lookup(format!(
                    "unknown document id {id:?}; the {} split has {} documents (ids {}-1..{}-{})",
                    split.name(),
                    docs.len(),
                    split.name(),
                    split.name(),
                    docs.len()
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(&a.out)?;
    let mut written = Vec::new();
    for doc in chosen {
        let example = examples_for(&model, std::slice::from_ref(doc), hp.max_len, store.as_ref())?.remove(0);
        let trace = model.forward(&example.input)?;
        // Multi-layer inputs: export the top layer.
        let record = trace.attention.last().expect("label layer records attention");
        let k = record.weights.cols();
        let tokens = if doc.tokens.len() >= k {
            doc.tokens[..k].to_vec()
        } else {
            (0..k).map(|j| format!("#{j}")).collect()
        };
        let export = AttentionExport::new(
            doc.id.clone(),
            tokens,
            model.labels().to_vec(),
            record,
            model.labels()[trace.predicted()].clone(),
            doc.label.clone(),
        );
        let mut text = serde_json::to_vec_pretty(&export).map_err(|e| Error::Usage(e.to_string()))?;
        text.push(b'\n');
        let path = a.out.join(format!("{}.json", doc.id));
        write_atomic(&path, &text)?;
        written.push(path.display().to_string());
    }
    print_json(&written)
}

fn cmd_sweep_t(a: &SweepArgs) -> Result<()> {
    if a.model.t.is_some() {
        return Err(Error::Usage("use --t-values instead of --t with sweep-t".into()));
    }
    if a.model.no_label_layer {
        return Err(Error::Usage("sweep-t needs the label-guided layer; drop --no-label-layer".into()));
    }
    if a.t_values.is_empty() || a.t_values.contains(&0) {
        return Err(Error::Usage("--t-values must be a non-empty list of counts >= 1".into()));
    }
    let hp = a.model.hyperparams()?;
    let dataset = load_dataset(&a.model.data, hp.max_len)?;
    let store = open_store(a.model.precomputed.as_ref())?;
    let sources = Sources {
        pretrained: a.model.pretrained.as_deref(),
        precomputed: store.as_ref(),
    };
    let rows = sweep_prototypes(&dataset, &hp, &a.t_values, sources)?;
    let csv = sweep_csv(&rows, !a.no_timing);
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_atomic(&out.join("sweep.csv"), csv.as_bytes())?;
    }
    print!("{csv}");
    Ok(())
}

#[derive(Serialize)]
struct SynthSummary {
    labels: Vec<String>,
    train: usize,
    test: usize,
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        labels: a.labels,
        docs_per_class: a.docs_per_class,
        test_docs_per_class: a.test_docs_per_class,
        noise_rate: a.noise,
        overlap: a.overlap,
        doc_len: a.doc_len,
        ..SynthSpec::default()
    };
    let dataset = synth_corpus(&mut SeededRng::new(a.seed), &spec)?;
    create_dir(&a.out)?;
    write_atomic(&a.out.join("train.tsv"), to_tsv(&dataset.train).as_bytes())?;
    write_atomic(&a.out.join("test.tsv"), to_tsv(&dataset.test).as_bytes())?;
    print_json(&SynthSummary {
        labels: dataset.labels.clone(),
        train: dataset.train.len(),
        test: dataset.test.len(),
    })
}
