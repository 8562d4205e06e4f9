//! The composed classifier and its parameter layout.

use serde::{Deserialize, Serialize};

use crate::classifier::{
    cross_entropy_logits, pooled_baseline_backward, pooled_baseline_forward, ClassifierHead, HeadCache, HeadGrads,
    PoolCache, Pooling,
};
use crate::contextual::{BiLstm, BiLstmGrads, EncodedSequence, LstmParams};
use crate::embedding::{lookup_backward, EmbeddingTable, RowGradients, Vocabulary};
use crate::error::{dim_constraint, Error, Result};
use crate::label_attention::{encode_all, encode_all_backward, AttentionRecord, LabelEmbeddingSpace};
use crate::numerics::{Matrix, SeededRng};

/// Where contextual token vectors come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ContextualSource {
    /// Trainable embeddings feeding a BiLSTM.
    Bilstm,
    /// Fixed per-token vectors read from a file; one label space per layer.
    Precomputed { layers: usize },
}

impl ContextualSource {
    pub fn layer_count(&self) -> usize {
        match self {
            ContextualSource::Bilstm => 1,
            ContextualSource::Precomputed { layers } => *layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub labels: Vec<String>,
    /// `m_p`; unused for precomputed inputs.
    pub embedding_dim: usize,
    /// `h` per direction; unused for precomputed inputs.
    pub hidden: usize,
    /// `m_l`, which must equal the contextual width `m_c`.
    pub label_dim: usize,
    /// `t`
    pub prototypes: usize,
    /// `m_f`
    pub compressed_dim: usize,
    pub label_layer: bool,
    pub pooling: Pooling,
    pub contextual: ContextualSource,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn label_count(&self) -> usize {
        self.labels.len()
    }

    pub fn contextual_dim(&self) -> usize {
        match self.contextual {
            ContextualSource::Bilstm => 2 * self.hidden,
            ContextualSource::Precomputed { .. } => self.label_dim,
        }
    }

    pub fn head_input_dim(&self) -> usize {
        let per_layer = if self.label_layer {
            self.label_count() * self.label_dim
        } else {
            self.contextual_dim()
        };
        self.contextual.layer_count() * per_layer
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() < 2 {
            return Err(Error::Config(format!("need at least 2 labels, got {}", self.labels.len())));
        }
        if self.compressed_dim == 0 {
            return Err(Error::Config("compressed dimension m_f must be positive".into()));
        }
        if self.label_layer && self.prototypes == 0 {
            return Err(Error::Usage("t must be at least 1".into()));
        }
        match self.contextual {
            ContextualSource::Bilstm => {
                if self.hidden == 0 || self.embedding_dim == 0 {
                    return Err(Error::Config("hidden size and embedding dim must be positive".into()));
                }
                if self.label_layer && self.label_dim != 2 * self.hidden {
                    return Err(dim_constraint(2 * self.hidden, self.label_dim));
                }
            }
            ContextualSource::Precomputed { layers } => {
                if layers == 0 {
                    return Err(Error::Config("at least one precomputed layer is required".into()));
                }
                if self.label_dim == 0 {
                    return Err(Error::Config("label dim must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// Model input for one document.
#[derive(Debug, Clone)]
pub enum Input {
    /// Vocabulary indices and the validity mask (false = padding).
    Tokens { ids: Vec<usize>, mask: Vec<bool> },
    /// Fixed contextual layers, innermost first.
    Layers(Vec<EncodedSequence>),
}

impl Input {
    pub fn tokens(ids: Vec<usize>) -> Self {
        let mask = vec![true; ids.len()];
        Input::Tokens { ids, mask }
    }

    pub fn len(&self) -> usize {
        match self {
            Input::Tokens { ids, .. } => ids.len(),
            Input::Layers(l) => l.first().map_or(0, EncodedSequence::len),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pads to `len` with PAD / zero rows marked invalid.
    pub fn padded(&self, len: usize) -> Input {
        match self {
            Input::Tokens { ids, mask } => {
                let mut ids = ids.clone();
                let mut mask = mask.clone();
                ids.resize(len.max(ids.len()), crate::embedding::PAD);
                mask.resize(len.max(mask.len()), false);
                Input::Tokens { ids, mask }
            }
            Input::Layers(layers) => Input::Layers(
                layers
                    .iter()
                    .map(|s| {
                        if s.len() >= len {
                            return s.clone();
                        }
                        let mut m = Matrix::zeros(len, s.dim());
                        for j in 0..s.len() {
                            m.row_mut(j).copy_from_slice(s.contextual.row(j));
                        }
                        let mut mask = s.mask.clone();
                        mask.resize(len, false);
                        EncodedSequence::with_mask(m, mask).expect("mask sized to rows")
                    })
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub input: Input,
    pub gold: usize,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub sequences: Vec<EncodedSequence>,
    pub attention: Vec<AttentionRecord>,
    pools: Vec<PoolCache>,
    pub head: HeadCache,
    ids: Option<Vec<usize>>,
    dropout: Option<Vec<f64>>,
}

impl Trace {
    pub fn probs(&self) -> &[f64] {
        &self.head.probs
    }

    pub fn logits(&self) -> &[f64] {
        &self.head.logits
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.head.probs)
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Parameter group, used for reporting and for freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedding,
    Contextual,
    LabelMatrices,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
}

/// Gradients aligned with [`Model::param_layout`]. The embedding table is
/// kept sparse; every other tensor is dense.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embedding: RowGradients,
    pub dense: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn add(&mut self, other: &Gradients) {
        self.embedding.merge(&other.embedding);
        for (a, b) in self.dense.iter_mut().zip(&other.dense) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.embedding.scale(k);
        for t in &mut self.dense {
            t.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn norm(&self) -> f64 {
        let e: f64 = self.embedding.rows.values().flatten().map(|x| x * x).sum();
        let d: f64 = self.dense.iter().flatten().map(|x| x * x).sum();
        (e + d).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub embedding: Option<EmbeddingTable>,
    pub encoder: Option<BiLstm>,
    /// One space per contextual layer; empty when the label layer is ablated.
    pub spaces: Vec<LabelEmbeddingSpace>,
    pub head: ClassifierHead,
}

impl Model {
    /// Initialises every parameter from `rng` in a fixed order: embedding,
    /// forward cell, backward cell, label spaces, compress layer, output layer.
    /// A supplied `embedding` replaces the random table (and its draws).
    pub fn init(config: ModelConfig, vocab: Vocabulary, embedding: Option<EmbeddingTable>, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let (embedding, encoder) = match config.contextual {
            ContextualSource::Bilstm => {
                let emb = match embedding {
                    Some(e) => {
                        if e.table.shape() != (vocab.len(), config.embedding_dim) {
                            return Err(Error::shape(
                                "embedding table",
                                e.table.shape(),
                                (vocab.len(), config.embedding_dim),
                            ));
                        }
                        e
                    }
                    None => EmbeddingTable::random(vocab.len(), config.embedding_dim, rng),
                };
                let enc = BiLstm::init(config.embedding_dim, config.hidden, rng);
                (Some(emb), Some(enc))
            }
            ContextualSource::Precomputed { .. } => (None, None),
        };
        let spaces = if config.label_layer {
            (0..config.contextual.layer_count())
                .map(|_| LabelEmbeddingSpace::init(&config.labels, config.label_dim, config.prototypes, rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let head = ClassifierHead::init(config.head_input_dim(), config.compressed_dim, config.label_count(), rng);
        let config = ModelConfig {
            vocab_size: vocab.len(),
            ..config
        };
        Ok(Model {
            config,
            vocab,
            embedding,
            encoder,
            spaces,
            head,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.config.labels
    }

    /// Names, groups and shapes of every parameter tensor, in storage order.
    pub fn param_layout(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        let mut push = |name: String, group, (rows, cols): (usize, usize)| out.push(ParamInfo { name, group, rows, cols });
        if let Some(e) = &self.embedding {
            push("embedding".into(), ParamGroup::Embedding, e.table.shape());
        }
        if let Some(enc) = &self.encoder {
            for (dir, cell) in [("fwd", &enc.forward_cell), ("bwd", &enc.backward_cell)] {
                push(format!("lstm.{dir}.W"), ParamGroup::Contextual, cell.w.shape());
                push(format!("lstm.{dir}.U"), ParamGroup::Contextual, cell.u.shape());
                push(format!("lstm.{dir}.b"), ParamGroup::Contextual, (cell.b.len(), 1));
            }
        }
        for (layer, space) in self.spaces.iter().enumerate() {
            for (i, m) in space.matrices.iter().enumerate() {
                push(format!("label.{layer}.{i}"), ParamGroup::LabelMatrices, m.shape());
            }
        }
        for (part, dense) in [("compress", &self.head.compress), ("output", &self.head.output)] {
            push(format!("head.{part}.W"), ParamGroup::Classifier, dense.w.shape());
            push(format!("head.{part}.b"), ParamGroup::Classifier, (dense.b.len(), 1));
        }
        out
    }

    /// Read-only views of every tensor, aligned with [`Model::param_layout`].
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        if let Some(e) = &self.embedding {
            out.push(e.table.as_slice());
        }
        if let Some(enc) = &self.encoder {
            for cell in [&enc.forward_cell, &enc.backward_cell] {
                out.push(cell.w.as_slice());
                out.push(cell.u.as_slice());
                out.push(&cell.b);
            }
        }
        for space in &self.spaces {
            for m in &space.matrices {
                out.push(m.as_slice());
            }
        }
        for dense in [&self.head.compress, &self.head.output] {
            out.push(dense.w.as_slice());
            out.push(&dense.b);
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        if let Some(e) = &mut self.embedding {
            out.push(e.table.as_mut_slice());
        }
        if let Some(enc) = &mut self.encoder {
            for cell in [&mut enc.forward_cell, &mut enc.backward_cell] {
                out.push(cell.w.as_mut_slice());
                out.push(cell.u.as_mut_slice());
                out.push(&mut cell.b);
            }
        }
        for space in &mut self.spaces {
            for m in &mut space.matrices {
                out.push(m.as_mut_slice());
            }
        }
        let head = &mut self.head;
        for dense in [&mut head.compress, &mut head.output] {
            out.push(dense.w.as_mut_slice());
            out.push(&mut dense.b);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn zero_gradients(&self) -> Gradients {
        let dense = self
            .param_layout()
            .into_iter()
            .filter(|p| p.group != ParamGroup::Embedding)
            .map(|p| vec![0.0; p.rows * p.cols])
            .collect();
        Gradients {
            embedding: RowGradients::default(),
            dense,
        }
    }

    pub fn forward(&self, input: &Input) -> Result<Trace> {
        self.forward_with_dropout(input, None)
    }

    /// Forward pass; `dropout` applies inverted dropout with the given rate
    /// to the head input, drawing the mask from the supplied generator.
    pub fn forward_with_dropout(&self, input: &Input, dropout: Option<(f64, &mut SeededRng)>) -> Result<Trace> {
        let (sequences, ids) = match input {
            Input::Tokens { ids, mask } => {
                let (Some(emb), Some(enc)) = (&self.embedding, &self.encoder) else {
                    return Err(Error::Usage("model expects precomputed contextual layers, got tokens".into()));
                };
                if ids.len() != mask.len() {
                    return Err(Error::Shape(format!("{} token ids vs mask of {}", ids.len(), mask.len())));
                }
                let x = emb.lookup(ids)?;
                (vec![enc.forward(&x, mask)?], Some(ids.clone()))
            }
            Input::Layers(layers) => {
                if self.encoder.is_some() {
                    return Err(Error::Usage("model expects token ids, got precomputed layers".into()));
                }
                if layers.len() != self.config.contextual.layer_count() {
                    return Err(Error::Config(format!(
                        "model was built for {} contextual layers, input has {}",
                        self.config.contextual.layer_count(),
                        layers.len()
                    )));
                }
                if let Some(s) = layers.iter().find(|s| s.dim() != self.config.label_dim) {
                    return Err(dim_constraint(s.dim(), self.config.label_dim));
                }
                (layers.clone(), None)
            }
        };

        let mut v = Vec::with_capacity(self.config.head_input_dim());
        let mut attention = Vec::new();
        let mut pools = Vec::new();
        if self.config.label_layer {
            for (seq, space) in sequences.iter().zip(&self.spaces) {
                let (emb, rec) = encode_all(seq, space)?;
                v.extend_from_slice(&emb.concatenated);
                attention.push(rec);
            }
        } else {
            for seq in &sequences {
                let (pooled, cache) = pooled_baseline_forward(seq, self.config.pooling)?;
                v.extend_from_slice(&pooled);
                pools.push(cache);
            }
        }

        let dropout = match dropout {
            Some((rate, rng)) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let mask: Vec<f64> = (0..v.len())
                    .map(|_| if rng.next_f64() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                for (x, m) in v.iter_mut().zip(&mask) {
                    *x *= m;
                }
                Some(mask)
            }
            _ => None,
        };

        let head = self.head.forward(&v)?;
        Ok(Trace {
            sequences,
            attention,
            pools,
            head,
            ids,
            dropout,
        })
    }

    pub fn loss(&self, trace: &Trace, gold: usize) -> Result<f64> {
        cross_entropy_logits(&trace.head.logits, gold)
    }

    pub fn backward(&self, trace: &Trace, gold: usize) -> Result<Gradients> {
        let (head_grads, mut grad_v) = self.head.backward(&trace.head, gold)?;
        if let Some(mask) = &trace.dropout {
            for (g, m) in grad_v.iter_mut().zip(mask) {
                *g *= m;
            }
        }

        let layers = trace.sequences.len();
        let per_layer = grad_v.len() / layers;
        let mut grad_sequences = Vec::with_capacity(layers);
        let mut label_grads = Vec::new();
        for (l, seq) in trace.sequences.iter().enumerate() {
            let g = &grad_v[l * per_layer..(l + 1) * per_layer];
            if self.config.label_layer {
                let (ge, gc) = encode_all_backward(seq, &self.spaces[l], &trace.attention[l], g)?;
                grad_sequences.push(ge);
                label_grads.push(gc);
            } else {
                grad_sequences.push(pooled_baseline_backward(&trace.pools[l], g, seq.len()));
            }
        }

        let mut embedding = RowGradients::default();
        let mut lstm_grads = None;
        if let (Some(enc), Some(ids)) = (&self.encoder, &trace.ids) {
            let (lg, grad_x) = enc.backward(&trace.sequences[0], &grad_sequences[0])?;
            if let Some(emb) = &self.embedding {
                embedding = lookup_backward(&grad_x, ids, emb.dim())?;
            }
            lstm_grads = Some(lg);
        }

        Ok(Gradients {
            embedding,
            dense: flatten_dense(lstm_grads, label_grads, head_grads),
        })
    }

    /// Loss and gradients for one example.
    pub fn loss_and_gradients(&self, input: &Input, gold: usize) -> Result<(f64, Gradients)> {
        let trace = self.forward(input)?;
        let loss = self.loss(&trace, gold)?;
        Ok((loss, self.backward(&trace, gold)?))
    }
}

/// Dense gradient tensors in the order of [`Model::param_layout`], minus the
/// embedding table.
fn flatten_dense(lstm: Option<BiLstmGrads>, labels: Vec<Vec<Matrix>>, head: HeadGrads) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    if let Some(g) = lstm {
        for cell in [g.forward_cell, g.backward_cell] {
            let LstmParams { w, u, b } = cell;
            out.push(w.into_vec());
            out.push(u.into_vec());
            out.push(b);
        }
    }
    for layer in labels {
        out.extend(layer.into_iter().map(Matrix::into_vec));
    }
    for dense in [head.compress, head.output] {
        out.push(dense.w.into_vec());
        out.push(dense.b);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_config(label_layer: bool) -> ModelConfig {
        ModelConfig {
            labels: vec!["a".into(), "b".into()],
            embedding_dim: 3,
            hidden: 3,
            label_dim: 6,
            prototypes: 2,
            compressed_dim: 20,
            label_layer,
            pooling: Pooling::Mean,
            contextual: ContextualSource::Bilstm,
            vocab_size: 0,
        }
    }

    fn toy_vocab() -> Vocabulary {
        Vocabulary::from_tokens((0..6).map(|i| format!("w{i}")).collect()).unwrap()
    }

    #[test]
    fn layout_matches_slices() {
        for label_layer in [true, false] {
            let m = Model::init(toy_config(label_layer), toy_vocab(), None, &mut SeededRng::new(1)).unwrap();
            let layout = m.param_layout();
            let slices = m.param_slices();
            assert_eq!(layout.len(), slices.len());
            for (info, s) in layout.iter().zip(&slices) {
                assert_eq!(info.rows * info.cols, s.len(), "{}", info.name);
            }
            let g = m.zero_gradients();
            assert_eq!(g.dense.len(), layout.len() - 1);
        }
    }

    #[test]
    fn backward_gradients_align_with_layout() {
        let mut rng = SeededRng::new(2);
        let m = Model::init(toy_config(true), toy_vocab(), None, &mut rng).unwrap();
        let (_, g) = m.loss_and_gradients(&Input::tokens(vec![2, 3, 4, 5]), 1).unwrap();
        let dense_layout: Vec<_> = m.param_layout().into_iter().filter(|p| p.group != ParamGroup::Embedding).collect();
        assert_eq!(g.dense.len(), dense_layout.len());
        for (t, info) in g.dense.iter().zip(&dense_layout) {
            assert_eq!(t.len(), info.rows * info.cols, "{}", info.name);
        }
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let mut c = toy_config(true);
        c.label_dim = 5;
        let err = Model::init(c, toy_vocab(), None, &mut SeededRng::new(0)).unwrap_err();
        assert!(err.to_string().contains("m_c == m_l"));
    }

    #[test]
    fn padding_does_not_change_prediction() {
        let m = Model::init(toy_config(true), toy_vocab(), None, &mut SeededRng::new(3)).unwrap();
        let input = Input::tokens(vec![2, 7, 4]);
        let a = m.forward(&input).unwrap();
        let b = m.forward(&input.padded(6)).unwrap();
        assert_eq!(a.probs(), b.probs());
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
    }
}
