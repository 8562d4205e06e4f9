mod common;

use std::fs;

use lguided::datapipe::{load_checkpoint, load_dataset, save_checkpoint, synth_corpus, to_tsv, SynthSpec};
use lguided::numerics::SeededRng;
use lguided::pipeline::{examples_for, fit, Sources};
use lguided::training::evaluate;
use lguided::{ErrorClass, HyperParams};

use common::*;

#[test]
fn reloaded_checkpoint_evaluates_identically() {
    let spec = SynthSpec {
        labels: 2,
        docs_per_class: 20,
        test_docs_per_class: 10,
        ..SynthSpec::default()
    };
    let dataset = synth_corpus(&mut SeededRng::new(1), &spec).unwrap();
    let hp = HyperParams {
        epochs: 2,
        freeze_embeddings: true,
        ..HyperParams::desk()
    };
    let out = fit(&dataset, &hp, Sources::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lgdl");
    save_checkpoint(&out.model, &hp, &path).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();
    assert_eq!(ckpt.meta.hyperparams, hp);
    let restored = ckpt.to_model().unwrap();
    assert!(!restored.embedding.as_ref().unwrap().trainable);
    let a = evaluate(&out.model, &examples_for(&out.model, &dataset.test, hp.max_len, None).unwrap()).unwrap();
    let b = evaluate(&restored, &examples_for(&restored, &dataset.test, hp.max_len, None).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn keyword_oracle_certifies_noisy_corpus() {
    let spec = SynthSpec {
        labels: 4,
        noise_rate: 0.3,
        ..SynthSpec::default()
    };
    let dataset = synth_corpus(&mut SeededRng::new(0), &spec).unwrap();
    assert!(keyword_count_accuracy(&dataset, &spec) > 0.95);
}

#[test]
fn tsv_round_trip_through_disk() {
    let spec = SynthSpec {
        labels: 3,
        docs_per_class: 5,
        test_docs_per_class: 2,
        ..SynthSpec::default()
    };
    let dataset = synth_corpus(&mut SeededRng::new(2), &spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("train.tsv"), to_tsv(&dataset.train)).unwrap();
    fs::write(dir.path().join("test.tsv"), to_tsv(&dataset.test)).unwrap();
    let loaded = load_dataset(dir.path(), 400).unwrap();
    assert_eq!(loaded.labels, dataset.labels);
    assert_eq!(loaded.train.len(), dataset.train.len());
    for (a, b) in loaded.train.iter().zip(&dataset.train) {
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.label, b.label);
    }
    assert!(loaded.dev.is_none());
}

#[test]
fn missing_split_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("train.tsv"), "a\tx y\n").unwrap();
    let err = load_dataset(dir.path(), 400).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Io);
}

#[test]
fn corrupted_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.lgdl");
    fs::write(&path, b"LGDL\x01\x00").unwrap();
    assert_eq!(load_checkpoint(&path).unwrap_err().class(), ErrorClass::Data);
}
