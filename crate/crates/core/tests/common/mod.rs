#![allow(dead_code)]

use lguided::classifier::Pooling;
use lguided::contextual::EncodedSequence;
use lguided::datapipe::{Dataset, SynthSpec};
use lguided::embedding::Vocabulary;
use lguided::label_attention::LabelEmbeddingSpace;
use lguided::model::{ContextualSource, Example, Input, Model, ModelConfig};
use lguided::numerics::{Matrix, SeededRng};

pub fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("l{i}")).collect()
}

/// Small BiLSTM model over a vocabulary of `w0..w{vocab}`.
pub fn toy_model(seed: u64, labels_n: usize, m_p: usize, h: usize, t: usize, vocab: usize) -> Model {
    let config = ModelConfig {
        labels: labels(labels_n),
        embedding_dim: m_p,
        hidden: h,
        label_dim: 2 * h,
        prototypes: t,
        compressed_dim: 10 * labels_n,
        label_layer: true,
        pooling: Pooling::Mean,
        contextual: ContextualSource::Bilstm,
        vocab_size: 0,
    };
    let vocab = Vocabulary::from_tokens((0..vocab).map(|i| format!("w{i}")).collect()).unwrap();
    Model::init(config, vocab, None, &mut SeededRng::new(seed)).unwrap()
}

/// A token example of length `k` drawn from the model vocabulary.
pub fn toy_example(model: &Model, k: usize, gold: usize, rng: &mut SeededRng) -> Example {
    let ids = (0..k).map(|_| 2 + rng.below(model.vocab.len() - 2)).collect();
    Example {
        id: "toy".into(),
        input: Input::tokens(ids),
        gold,
    }
}

pub fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.uniform(scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Random sequence with a random suffix masked out (at least one live row).
pub fn random_sequence(rng: &mut SeededRng, k: usize, m: usize) -> EncodedSequence {
    let live = 1 + rng.below(k);
    let mask: Vec<bool> = (0..k).map(|j| j < live).collect();
    EncodedSequence::with_mask(random_matrix(rng, k, m, 1.0), mask).unwrap()
}

pub fn random_space(rng: &mut SeededRng, l: usize, m: usize, t: usize) -> LabelEmbeddingSpace {
    let matrices = (0..l).map(|_| random_matrix(rng, m, t, 1.0)).collect();
    LabelEmbeddingSpace::new(labels(l), matrices).unwrap()
}

/// Straight-line reference for the whole label-guided layer, written
/// without the library's numerics: returns per-label weights and the
/// concatenated embedding.
pub fn brute_force_encode(rows: &[Vec<f64>], mask: &[bool], matrices: &[Vec<Vec<f64>>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let cos = |a: &[f64], b: &[f64]| {
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for i in 0..a.len() {
            ab += a[i] * b[i];
            aa += a[i] * a[i];
            bb += b[i] * b[i];
        }
        if aa.sqrt() < 1e-12 || bb.sqrt() < 1e-12 {
            0.0
        } else {
            ab / (aa.sqrt() * bb.sqrt())
        }
    };
    let m = rows[0].len();
    let mut all_weights = Vec::new();
    let mut out = Vec::new();
    for cols in matrices {
        let scores: Vec<Option<f64>> = rows
            .iter()
            .zip(mask)
            .map(|(r, &live)| live.then(|| cols.iter().map(|c| cos(r, c)).fold(f64::NEG_INFINITY, f64::max)))
            .collect();
        let top = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().flatten().map(|s| (s - top).exp()).sum();
        let w: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - top).exp() / z)).collect();
        let mut v = vec![0.0; m];
        for (j, r) in rows.iter().enumerate() {
            for i in 0..m {
                v[i] += w[j] * r[i];
            }
        }
        out.extend(v);
        all_weights.push(w);
    }
    (all_weights, out)
}

/// Columns of every label matrix as plain vectors.
pub fn prototype_columns(space: &LabelEmbeddingSpace) -> Vec<Vec<Vec<f64>>> {
    space
        .matrices
        .iter()
        .map(|m| (0..m.cols()).map(|p| m.column(p)).collect())
        .collect()
}

pub fn sequence_rows(seq: &EncodedSequence) -> Vec<Vec<f64>> {
    (0..seq.len()).map(|j| seq.contextual.row(j).to_vec()).collect()
}

/// Predicts the class whose keyword pool covers the most tokens.
pub fn keyword_count_accuracy(dataset: &Dataset, spec: &SynthSpec) -> f64 {
    let pools: Vec<Vec<String>> = (0..spec.labels).map(|c| spec.keyword_pool(c)).collect();
    let correct = dataset
        .test
        .iter()
        .filter(|d| {
            let counts: Vec<usize> = pools.iter().map(|p| d.tokens.iter().filter(|t| p.contains(t)).count()).collect();
            let best = (0..counts.len()).fold(0, |b, i| if counts[i] > counts[b] { i } else { b });
            SynthSpec::label_name(best) == d.label
        })
        .count();
    correct as f64 / dataset.test.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
