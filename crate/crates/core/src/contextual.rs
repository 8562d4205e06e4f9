//! Contextual encoders: a single-layer bidirectional LSTM trained with
//! hand-written BPTT, and a reader for per-token vectors exported by an
//! external encoder.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{dim_constraint, Error, Result};
use crate::numerics::{sigmoid, Matrix, SeededRng};

/// Gate blocks inside the stacked `4h` dimension, in this order.
pub const GATE_ORDER: [&str; 4] = ["input", "forget", "output", "candidate"];

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `4h × input_dim`
    pub w: Matrix,
    /// `4h × h`
    pub u: Matrix,
    /// `4h`
    pub b: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmParams {
            w: Matrix::zeros(4 * hidden, input_dim),
            u: Matrix::zeros(4 * hidden, hidden),
            b: vec![0.0; 4 * hidden],
        }
    }

    /// Uniform in ±1/√h, forget-gate bias set to 1.
    pub fn init(input_dim: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let scale = 1.0 / (hidden as f64).sqrt();
        let mut p = Self::zeros(input_dim, hidden);
        for v in p.w.as_mut_slice() {
            *v = rng.uniform(scale);
        }
        for v in p.u.as_mut_slice() {
            *v = rng.uniform(scale);
        }
        for (k, v) in p.b.iter_mut().enumerate() {
            *v = if (hidden..2 * hidden).contains(&k) { 1.0 } else { rng.uniform(scale) };
        }
        p
    }

    pub fn hidden(&self) -> usize {
        self.u.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden();
        if self.u.rows() != 4 * h || self.w.rows() != 4 * h || self.b.len() != 4 * h {
            return Err(Error::Shape(format!(
                "inconsistent LSTM parameters: W {:?}, U {:?}, b {}",
                self.w.shape(),
                self.u.shape(),
                self.b.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm {
    pub forward_cell: LstmParams,
    pub backward_cell: LstmParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmGrads {
    pub forward_cell: LstmParams,
    pub backward_cell: LstmParams,
}

/// Per-timestep activations of one direction.
#[derive(Debug, Clone, Default)]
struct StepCache {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-activation gates `[i, f, o, g]`, length 4h.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BiLstmCache {
    input: Matrix,
    forward: Vec<Option<StepCache>>,
    backward: Vec<Option<StepCache>>,
}

/// Contextual rows `ē_1..ē_K` plus the validity mask. Padding rows are zero.
#[derive(Debug, Clone)]
pub struct EncodedSequence {
    pub contextual: Matrix,
    pub mask: Vec<bool>,
    pub(crate) cache: Option<BiLstmCache>,
}

impl EncodedSequence {
    /// A constant sequence (no backward into it); every row is valid.
    pub fn constant(contextual: Matrix) -> Self {
        let mask = vec![true; contextual.rows()];
        EncodedSequence {
            contextual,
            mask,
            cache: None,
        }
    }

    pub fn with_mask(contextual: Matrix, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != contextual.rows() {
            return Err(Error::Shape(format!(
                "mask length {} vs {} rows",
                mask.len(),
                contextual.rows()
            )));
        }
        let mut contextual = contextual;
        for (j, &m) in mask.iter().enumerate() {
            if !m {
                contextual.row_mut(j).fill(0.0);
            }
        }
        Ok(EncodedSequence {
            contextual,
            mask,
            cache: None,
        })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.contextual.cols()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

impl BiLstm {
    pub fn init(input_dim: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let forward_cell = LstmParams::init(input_dim, hidden, rng);
        let backward_cell = LstmParams::init(input_dim, hidden, rng);
        BiLstm {
            forward_cell,
            backward_cell,
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        BiLstm {
            forward_cell: LstmParams::zeros(input_dim, hidden),
            backward_cell: LstmParams::zeros(input_dim, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward_cell.hidden()
    }

    pub fn input_dim(&self) -> usize {
        self.forward_cell.input_dim()
    }

    /// `m_c = 2h`.
    pub fn output_dim(&self) -> usize {
        2 * self.hidden()
    }

    pub fn zero_grads(&self) -> BiLstmGrads {
        BiLstmGrads {
            forward_cell: LstmParams::zeros(self.input_dim(), self.hidden()),
            backward_cell: LstmParams::zeros(self.input_dim(), self.hidden()),
        }
    }

    fn check(&self) -> Result<()> {
        self.forward_cell.check()?;
        self.backward_cell.check()?;
        if self.forward_cell.w.shape() != self.backward_cell.w.shape()
            || self.forward_cell.u.shape() != self.backward_cell.u.shape()
        {
            return Err(Error::Shape("forward and backward cells differ in shape".into()));
        }
        Ok(())
    }

    pub fn forward(&self, embedded: &Matrix, mask: &[bool]) -> Result<EncodedSequence> {
        self.check()?;
        if embedded.cols() != self.input_dim() {
            return Err(Error::shape(
                "BiLSTM input",
                embedded.shape(),
                (embedded.rows(), self.input_dim()),
            ));
        }
        if mask.len() != embedded.rows() {
            return Err(Error::Shape(format!(
                "mask length {} vs sequence length {}",
                mask.len(),
                embedded.rows()
            )));
        }
        let k = embedded.rows();
        let h = self.hidden();
        let mut out = Matrix::zeros(k, 2 * h);
        let forward = run_direction(&self.forward_cell, embedded, mask, (0..k).collect(), &mut out, 0);
        let backward = run_direction(&self.backward_cell, embedded, mask, (0..k).rev().collect(), &mut out, h);
        Ok(EncodedSequence {
            contextual: out,
            mask: mask.to_vec(),
            cache: Some(BiLstmCache {
                input: embedded.clone(),
                forward,
                backward,
            }),
        })
    }

    /// BPTT. Returns parameter gradients and the gradient with respect to the
    /// embedded input (`K × input_dim`).
    pub fn backward(&self, encoded: &EncodedSequence, grad_contextual: &Matrix) -> Result<(BiLstmGrads, Matrix)> {
        let cache = encoded
            .cache
            .as_ref()
            .ok_or_else(|| Error::Usage("sequence has no BiLSTM forward cache".into()))?;
        let k = encoded.len();
        let h = self.hidden();
        if grad_contextual.shape() != (k, 2 * h) || cache.input.cols() != self.input_dim() || cache.forward.len() != k {
            return Err(Error::Usage(format!(
                "backward gradient {:?} does not match cached forward of length {k} and width {}",
                grad_contextual.shape(),
                2 * h
            )));
        }
        let mut grads = self.zero_grads();
        let mut grad_input = Matrix::zeros(k, self.input_dim());
        backprop_direction(
            &self.forward_cell,
            &cache.input,
            &cache.forward,
            (0..k).collect(),
            grad_contextual,
            0,
            &mut grads.forward_cell,
            &mut grad_input,
        );
        backprop_direction(
            &self.backward_cell,
            &cache.input,
            &cache.backward,
            (0..k).rev().collect(),
            grad_contextual,
            h,
            &mut grads.backward_cell,
            &mut grad_input,
        );
        for (j, &m) in encoded.mask.iter().enumerate() {
            if !m {
                grad_input.row_mut(j).fill(0.0);
            }
        }
        Ok((grads, grad_input))
    }
}

fn run_direction(
    p: &LstmParams,
    input: &Matrix,
    mask: &[bool],
    order: Vec<usize>,
    out: &mut Matrix,
    offset: usize,
) -> Vec<Option<StepCache>> {
    let h = p.hidden();
    let mut caches: Vec<Option<StepCache>> = vec![None; input.rows()];
    let mut h_state = vec![0.0; h];
    let mut c_state = vec![0.0; h];
    for t in order {
        if !mask[t] {
            continue;
        }
        let x = input.row(t);
        let mut z = p.b.clone();
        for (r, zr) in z.iter_mut().enumerate() {
            *zr += crate::numerics::dot(p.w.row(r), x) + crate::numerics::dot(p.u.row(r), &h_state);
        }
        let mut gates = vec![0.0; 4 * h];
        for u in 0..h {
            gates[u] = sigmoid(z[u]);
            gates[h + u] = sigmoid(z[h + u]);
            gates[2 * h + u] = sigmoid(z[2 * h + u]);
            gates[3 * h + u] = z[3 * h + u].tanh();
        }
        let mut c_new = vec![0.0; h];
        let mut tanh_c = vec![0.0; h];
        let mut h_new = vec![0.0; h];
        for u in 0..h {
            c_new[u] = gates[h + u] * c_state[u] + gates[u] * gates[3 * h + u];
            tanh_c[u] = c_new[u].tanh();
            h_new[u] = gates[2 * h + u] * tanh_c[u];
        }
        out.row_mut(t)[offset..offset + h].copy_from_slice(&h_new);
        caches[t] = Some(StepCache {
            h_prev: std::mem::replace(&mut h_state, h_new),
            c_prev: std::mem::replace(&mut c_state, c_new),
            gates,
            tanh_c,
        });
    }
    caches
}

#[allow(clippy::too_many_arguments)]
fn backprop_direction(
    p: &LstmParams,
    input: &Matrix,
    caches: &[Option<StepCache>],
    order: Vec<usize>,
    grad_out: &Matrix,
    offset: usize,
    grads: &mut LstmParams,
    grad_input: &mut Matrix,
) {
    let h = p.hidden();
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dz = vec![0.0; 4 * h];
    for &t in order.iter().rev() {
        // Masked steps pass state through unchanged, so their gradient does too.
        let Some(step) = &caches[t] else { continue };
        let g = &step.gates;
        let mut dc_prev = vec![0.0; h];
        for u in 0..h {
            let dh = grad_out.get(t, offset + u) + dh_next[u];
            let (i, f, o, cand) = (g[u], g[h + u], g[2 * h + u], g[3 * h + u]);
            let tc = step.tanh_c[u];
            let dc = dh * o * (1.0 - tc * tc) + dc_next[u];
            dz[u] = dc * cand * i * (1.0 - i);
            dz[h + u] = dc * step.c_prev[u] * f * (1.0 - f);
            dz[2 * h + u] = dh * tc * o * (1.0 - o);
            dz[3 * h + u] = dc * i * (1.0 - cand * cand);
            dc_prev[u] = dc * f;
        }
        let x = input.row(t);
        grads.w.add_outer(&dz, x).expect("shape checked");
        grads.u.add_outer(&dz, &step.h_prev).expect("shape checked");
        for (b, d) in grads.b.iter_mut().zip(&dz) {
            *b += d;
        }
        let dx = p.w.matvec_t(&dz).expect("shape checked");
        for (gi, d) in grad_input.row_mut(t).iter_mut().zip(&dx) {
            *gi += d;
        }
        dh_next = p.u.matvec_t(&dz).expect("shape checked");
        dc_next = dc_prev;
    }
}

const PRECOMPUTED_MAGIC: &[u8; 4] = b"LGPC";
pub const PRECOMPUTED_VERSION: u32 = 1;

/// One document's stored layers, each `K × m_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedDoc {
    pub doc_id: String,
    pub layers: Vec<Matrix>,
}

/// In-memory index over a precomputed-contextual file.
///
/// Layout (all integers little-endian u32): magic `LGPC`, version, m_c,
/// layer_count, doc_count; then per document: id byte length, UTF-8 id, K,
/// and `layer_count` blocks of `K × m_c` little-endian f32.
#[derive(Debug, Clone)]
pub struct PrecomputedStore {
    pub dim: usize,
    pub layer_count: usize,
    docs: HashMap<String, Vec<Matrix>>,
}

impl PrecomputedStore {
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != PRECOMPUTED_MAGIC {
            return Err(Error::Corruption("not a precomputed-contextual file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != PRECOMPUTED_VERSION {
            return Err(Error::Version {
                found: version,
                expected: PRECOMPUTED_VERSION,
            });
        }
        let dim = r.u32()? as usize;
        let layer_count = r.u32()? as usize;
        let doc_count = r.u32()? as usize;
        let mut docs = HashMap::with_capacity(doc_count);
        for _ in 0..doc_count {
            let id_len = r.u32()? as usize;
            let id = String::from_utf8(r.take(id_len)?.to_vec())
                .map_err(|_| Error::Corruption("document id is not UTF-8".into()))?;
            let k = r.u32()? as usize;
            let mut layers = Vec::with_capacity(layer_count);
            for _ in 0..layer_count {
                let raw = r.take(k * dim * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect();
                layers.push(Matrix::from_vec(k, dim, data)?);
            }
            if docs.insert(id.clone(), layers).is_some() {
                return Err(Error::Corruption(format!("duplicate document id {id:?}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Corruption(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(PrecomputedStore { dim, layer_count, docs })
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.docs.contains_key(doc_id)
    }

    /// The last `layers` stored layers of `doc_id`, checked against the
    /// configured label-embedding dimension.
    pub fn sequences(&self, doc_id: &str, layers: usize, m_l: usize) -> Result<Vec<EncodedSequence>> {
        if self.dim != m_l {
            return Err(dim_constraint(self.dim, m_l));
        }
        if layers == 0 || layers > self.layer_count {
            return Err(Error::Config(format!(
                "requested {layers} encoder layers but the file provides {}",
                self.layer_count
            )));
        }
        let stored = self
            .docs
            .get(doc_id)
            .ok_or_else(|| Error::Lookup(format!("document {doc_id:?} not in precomputed file")))?;
        Ok(stored[self.layer_count - layers..]
            .iter()
            .map(|m| EncodedSequence::constant(m.clone()))
            .collect())
    }
}

/// Convenience wrapper around [`PrecomputedStore`] for a single lookup.
pub fn load_precomputed_contextual(path: &Path, doc_id: &str, layers: usize, m_l: usize) -> Result<Vec<EncodedSequence>> {
    PrecomputedStore::open(path)?.sequences(doc_id, layers, m_l)
}

/// Serialises documents into the precomputed-contextual layout. Values are
/// narrowed to f32.
pub fn encode_precomputed(dim: usize, docs: &[PrecomputedDoc]) -> Result<Vec<u8>> {
    let layer_count = docs.first().map_or(0, |d| d.layers.len());
    let mut out = Vec::new();
    out.extend_from_slice(PRECOMPUTED_MAGIC);
    for v in [PRECOMPUTED_VERSION, dim as u32, layer_count as u32, docs.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for doc in docs {
        if doc.layers.len() != layer_count {
            return Err(Error::Usage(format!(
                "document {:?} has {} layers, expected {layer_count}",
                doc.doc_id,
                doc.layers.len()
            )));
        }
        let k = doc.layers.first().map_or(0, Matrix::rows);
        out.extend_from_slice(&(doc.doc_id.len() as u32).to_le_bytes());
        out.extend_from_slice(doc.doc_id.as_bytes());
        out.extend_from_slice(&(k as u32).to_le_bytes());
        for layer in &doc.layers {
            if layer.shape() != (k, dim) {
                return Err(Error::shape("precomputed layer", layer.shape(), (k, dim)));
            }
            for &v in layer.as_slice() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn write_precomputed(path: &Path, dim: usize, docs: &[PrecomputedDoc]) -> Result<()> {
    let bytes = encode_precomputed(dim, docs)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corruption(format!("unexpected end of data at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
