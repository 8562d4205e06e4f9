//! Label-guided attentive encoding.
//!
//! Each label owns a matrix of `t` prototype columns. A token's compatibility
//! with a label is its best cosine match among that label's prototypes; the
//! compatibilities are softmax-normalised over the real tokens and used to
//! pool the contextual rows into one vector per label. The per-label vectors
//! are concatenated in label order.

use serde::{Deserialize, Serialize};

use crate::contextual::EncodedSequence;
use crate::error::{dim_constraint, Error, Result};
use crate::numerics::{cosine_backward, cosine_similarity, softmax, Matrix, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbeddingSpace {
    pub labels: Vec<String>,
    /// One `m_l × t` matrix per label; column `p` is prototype `p`.
    pub matrices: Vec<Matrix>,
}

impl LabelEmbeddingSpace {
    /// Prototypes uniform in ±0.5/√m_l.
    pub fn init(labels: &[String], dim: usize, prototypes: usize, rng: &mut SeededRng) -> Result<Self> {
        if prototypes == 0 {
            return Err(Error::Usage("each label needs at least one prototype (t >= 1)".into()));
        }
        let scale = 0.5 / (dim as f64).sqrt();
        let matrices = labels
            .iter()
            .map(|_| crate::numerics::init_uniform(rng, dim, prototypes, scale))
            .collect::<Result<Vec<_>>>()?;
        Ok(LabelEmbeddingSpace {
            labels: labels.to_vec(),
            matrices,
        })
    }

    pub fn new(labels: Vec<String>, matrices: Vec<Matrix>) -> Result<Self> {
        if labels.len() != matrices.len() || matrices.is_empty() {
            return Err(Error::Config(format!(
                "{} labels but {} label matrices",
                labels.len(),
                matrices.len()
            )));
        }
        let shape = matrices[0].shape();
        if shape.1 == 0 {
            return Err(Error::Usage("each label needs at least one prototype (t >= 1)".into()));
        }
        if let Some(m) = matrices.iter().find(|m| m.shape() != shape) {
            return Err(Error::shape("label matrices", shape, m.shape()));
        }
        Ok(LabelEmbeddingSpace { labels, matrices })
    }

    pub fn label_count(&self) -> usize {
        self.matrices.len()
    }

    /// `m_l`
    pub fn dim(&self) -> usize {
        self.matrices[0].rows()
    }

    /// `t`
    pub fn prototypes(&self) -> usize {
        self.matrices[0].cols()
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.matrices.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect()
    }
}

/// Normalised weights, raw max-pooled scores, and the winning prototype for
/// every (label, position). Rows are labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub weights: Matrix,
    /// `-inf` at masked positions.
    pub raw_scores: Matrix,
    pub winners: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelWiseEmbedding {
    pub per_label: Vec<Vec<f64>>,
    pub concatenated: Vec<f64>,
}

fn check_dims(encoded: &EncodedSequence, label_matrix: &Matrix) -> Result<()> {
    if encoded.dim() != label_matrix.rows() {
        return Err(dim_constraint(encoded.dim(), label_matrix.rows()));
    }
    Ok(())
}

/// Max-pooled cosine compatibility of every position with one label.
/// Ties resolve to the lowest prototype index. Masked positions score `-inf`.
pub fn raw_score(encoded: &EncodedSequence, label_matrix: &Matrix) -> Result<(Vec<f64>, Vec<usize>)> {
    check_dims(encoded, label_matrix)?;
    let prototypes: Vec<Vec<f64>> = (0..label_matrix.cols()).map(|p| label_matrix.column(p)).collect();
    let k = encoded.len();
    let mut scores = vec![f64::NEG_INFINITY; k];
    let mut winners = vec![0; k];
    for j in 0..k {
        if !encoded.mask[j] {
            continue;
        }
        let row = encoded.contextual.row(j);
        for (p, c) in prototypes.iter().enumerate() {
            let s = cosine_similarity(row, c)?;
            if s > scores[j] {
                scores[j] = s;
                winners[j] = p;
            }
        }
    }
    Ok((scores, winners))
}

/// Softmax over unmasked positions; masked positions get exactly 0.
pub fn normalize(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if scores.len() != mask.len() {
        return Err(Error::Shape(format!("{} scores vs mask of {}", scores.len(), mask.len())));
    }
    let live: Vec<f64> = scores.iter().zip(mask).filter(|(_, &m)| m).map(|(&s, _)| s).collect();
    if live.is_empty() {
        return Err(Error::Usage("cannot normalise attention over a fully masked sequence".into()));
    }
    let probs = softmax(&live)?;
    let mut out = vec![0.0; scores.len()];
    let mut it = probs.into_iter();
    for (o, &m) in out.iter_mut().zip(mask) {
        if m {
            *o = it.next().expect("one probability per live position");
        }
    }
    Ok(out)
}

/// `Σ_j w_j ē_j`
pub fn label_wise_embedding(encoded: &EncodedSequence, weights: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != encoded.len() {
        return Err(Error::shape(
            "attention weights",
            (weights.len(), 1),
            (encoded.len(), 1),
        ));
    }
    let mut v = vec![0.0; encoded.dim()];
    for (j, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (acc, &e) in v.iter_mut().zip(encoded.contextual.row(j)) {
            *acc += w * e;
        }
    }
    Ok(v)
}

pub fn encode_all(encoded: &EncodedSequence, space: &LabelEmbeddingSpace) -> Result<(LabelWiseEmbedding, AttentionRecord)> {
    let (l, k) = (space.label_count(), encoded.len());
    let mut weights = Matrix::zeros(l, k);
    let mut raw_scores = Matrix::zeros(l, k);
    let mut winners = Vec::with_capacity(l);
    let mut per_label = Vec::with_capacity(l);
    for (i, c) in space.matrices.iter().enumerate() {
        let (scores, win) = raw_score(encoded, c)?;
        let w = normalize(&scores, &encoded.mask)?;
        per_label.push(label_wise_embedding(encoded, &w)?);
        weights.row_mut(i).copy_from_slice(&w);
        raw_scores.row_mut(i).copy_from_slice(&scores);
        winners.push(win);
    }
    let concatenated = per_label.concat();
    Ok((
        LabelWiseEmbedding { per_label, concatenated },
        AttentionRecord {
            weights,
            raw_scores,
            winners,
        },
    ))
}

/// Gradients of a scalar loss through [`encode_all`].
///
/// Returns the gradient with respect to `encoded.contextual` and one gradient
/// matrix per label. Max-pooling routes each position's gradient to its
/// recorded winning prototype only.
pub fn encode_all_backward(
    encoded: &EncodedSequence,
    space: &LabelEmbeddingSpace,
    record: &AttentionRecord,
    grad_v: &[f64],
) -> Result<(Matrix, Vec<Matrix>)> {
    let (l, k, m) = (space.label_count(), encoded.len(), encoded.dim());
    if record.weights.shape() != (l, k) || record.winners.len() != l || grad_v.len() != l * m {
        return Err(Error::Usage(format!(
            "attention record {:?} / gradient of {} does not match {l} labels over {k} positions of width {m}",
            record.weights.shape(),
            grad_v.len()
        )));
    }
    check_dims(encoded, &space.matrices[0])?;
    let mut grad_e = Matrix::zeros(k, m);
    let mut grad_c = space.zeros_like();
    for i in 0..l {
        let g = &grad_v[i * m..(i + 1) * m];
        let w = record.weights.row(i);
        // v_i = Σ_j w_ij e_j
        let mut dw = vec![0.0; k];
        for j in 0..k {
            if !encoded.mask[j] {
                continue;
            }
            let e = encoded.contextual.row(j);
            dw[j] = crate::numerics::dot(g, e);
            for (ge, &gv) in grad_e.row_mut(j).iter_mut().zip(g) {
                *ge += w[j] * gv;
            }
        }
        // Softmax Jacobian over live positions.
        let inner: f64 = (0..k).filter(|&j| encoded.mask[j]).map(|j| w[j] * dw[j]).sum();
        let c = &space.matrices[i];
        for j in 0..k {
            if !encoded.mask[j] {
                continue;
            }
            let ds = w[j] * (dw[j] - inner);
            if ds == 0.0 {
                continue;
            }
            let p = record.winners[i][j];
            let proto = c.column(p);
            let mut g_proto = vec![0.0; m];
            cosine_backward(encoded.contextual.row(j), &proto, ds, grad_e.row_mut(j), &mut g_proto);
            for (r, gp) in g_proto.into_iter().enumerate() {
                let cur = grad_c[i].get(r, p);
                grad_c[i].set(r, p, cur + gp);
            }
        }
    }
    Ok((grad_e, grad_c))
}

/// Runs [`encode_all`] per layer with that layer's own label space and
/// concatenates the layer outputs in order.
pub fn multi_layer_encode(
    layers: &[EncodedSequence],
    spaces: &[LabelEmbeddingSpace],
) -> Result<(Vec<f64>, Vec<AttentionRecord>)> {
    if layers.len() != spaces.len() || layers.is_empty() {
        return Err(Error::Config(format!(
            "{} encoder layers but {} label spaces",
            layers.len(),
            spaces.len()
        )));
    }
    let l = spaces[0].label_count();
    if spaces.iter().any(|s| s.label_count() != l) {
        return Err(Error::Config("label spaces disagree on the number of labels".into()));
    }
    let mut v = Vec::new();
    let mut records = Vec::with_capacity(layers.len());
    for (enc, space) in layers.iter().zip(spaces) {
        let (emb, rec) = encode_all(enc, space)?;
        v.extend_from_slice(&emb.concatenated);
        records.push(rec);
    }
    Ok((v, records))
}

/// One document's attention, as exported for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
    /// `L × K`
    pub weights: Vec<Vec<f64>>,
    /// `L × K` winning prototype per position.
    pub winners: Vec<Vec<usize>>,
    pub predicted_label: String,
    pub gold_label: String,
}

impl AttentionExport {
    pub fn new(
        doc_id: String,
        tokens: Vec<String>,
        labels: Vec<String>,
        record: &AttentionRecord,
        predicted_label: String,
        gold_label: String,
    ) -> Self {
        let weights = (0..record.weights.rows()).map(|i| record.weights.row(i).to_vec()).collect();
        AttentionExport {
            doc_id,
            tokens,
            labels,
            weights,
            winners: record.winners.clone(),
            predicted_label,
            gold_label,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::init_uniform;

    fn seq(rows: usize, dim: usize, seed: u64) -> EncodedSequence {
        EncodedSequence::constant(init_uniform(&mut SeededRng::new(seed), rows, dim, 1.0).unwrap())
    }

    fn space(l: usize, dim: usize, t: usize, seed: u64) -> LabelEmbeddingSpace {
        let labels: Vec<String> = (0..l).map(|i| format!("l{i}")).collect();
        let mut rng = SeededRng::new(seed);
        let mats = (0..l).map(|_| init_uniform(&mut rng, dim, t, 1.0).unwrap()).collect();
        LabelEmbeddingSpace::new(labels, mats).unwrap()
    }

    #[test]
    fn single_prototype_score_is_plain_cosine() {
        let e = seq(3, 4, 1);
        let c = init_uniform(&mut SeededRng::new(2), 4, 1, 1.0).unwrap();
        let (s, w) = raw_score(&e, &c).unwrap();
        for j in 0..3 {
            assert_eq!(s[j], cosine_similarity(e.contextual.row(j), &c.column(0)).unwrap());
            assert_eq!(w[j], 0);
        }
    }

    #[test]
    fn self_similarity_scores_one() {
        let e = seq(3, 4, 3);
        let mut c = init_uniform(&mut SeededRng::new(4), 4, 2, 1.0).unwrap();
        for r in 0..4 {
            c.set(r, 1, e.contextual.get(2, r));
        }
        let (s, w) = raw_score(&e, &c).unwrap();
        assert!((s[2] - 1.0).abs() < 1e-15);
        assert_eq!(w[2], 1);
    }

    #[test]
    fn raw_score_matches_double_loop() {
        let e = seq(3, 4, 5);
        let c = init_uniform(&mut SeededRng::new(6), 4, 2, 1.0).unwrap();
        let (s, w) = raw_score(&e, &c).unwrap();
        for j in 0..3 {
            let all: Vec<f64> = (0..2)
                .map(|p| {
                    let a = e.contextual.row(j);
                    let b = c.column(p);
                    let d: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                    d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
                })
                .collect();
            let best = if all[1] > all[0] { 1 } else { 0 };
            assert!((s[j] - all[best]).abs() < 1e-15);
            assert_eq!(w[j], best);
        }
    }

    #[test]
    fn raw_score_ties_pick_lowest_index() {
        let e = seq(2, 3, 7);
        let col = init_uniform(&mut SeededRng::new(8), 3, 1, 1.0).unwrap();
        let c = Matrix::from_vec(3, 2, (0..3).flat_map(|r| [col.get(r, 0), col.get(r, 0)]).collect()).unwrap();
        let (_, w) = raw_score(&e, &c).unwrap();
        assert_eq!(w, vec![0, 0]);
    }

    #[test]
    fn dimension_mismatch_cites_constraint() {
        let e = seq(2, 4, 1);
        let err = raw_score(&e, &Matrix::zeros(3, 2)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("m_c == m_l"));
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(normalize(&[0.3], &[true]).unwrap(), vec![1.0]);
        assert_eq!(normalize(&[0.2; 4], &[true; 4]).unwrap(), vec![0.25; 4]);
        let w = normalize(&[1.0, 2.0, f64::NEG_INFINITY], &[true, true, false]).unwrap();
        let z = 1f64.exp() + 2f64.exp();
        assert_eq!(w[2], 0.0);
        assert!((w[0] - 1f64.exp() / z).abs() < 1e-15);
        assert!((w[1] - 2f64.exp() / z).abs() < 1e-15);
        assert!(matches!(normalize(&[1.0, 2.0], &[false, false]), Err(Error::Usage(_))));
    }

    #[test]
    fn weighted_sum_cases() {
        let e = seq(3, 4, 9);
        assert_eq!(label_wise_embedding(&e, &[0.0, 1.0, 0.0]).unwrap(), e.contextual.row(1));
        let mean = label_wise_embedding(&e, &[1.0 / 3.0; 3]).unwrap();
        for (c, &m) in mean.iter().enumerate() {
            let oracle = (0..3).map(|j| e.contextual.get(j, c)).sum::<f64>() / 3.0;
            assert!((m - oracle).abs() < 1e-12);
        }
        let w = [0.2, 0.5, 0.3];
        let v = label_wise_embedding(&e, &w).unwrap();
        for (c, &x) in v.iter().enumerate() {
            let mut acc = 0.0;
            for j in 0..3 {
                acc += w[j] * e.contextual.get(j, c);
            }
            assert!((x - acc).abs() < 1e-12);
        }
        assert!(label_wise_embedding(&e, &[1.0]).is_err());
    }

    #[test]
    fn encode_all_single_label_and_identical_labels() {
        let e = seq(4, 3, 10);
        let one = space(1, 3, 2, 11);
        let (emb, _) = encode_all(&e, &one).unwrap();
        assert_eq!(emb.concatenated, emb.per_label[0]);

        let mut two = space(2, 3, 2, 12);
        two.matrices[1] = two.matrices[0].clone();
        let (emb, rec) = encode_all(&e, &two).unwrap();
        assert_eq!(emb.per_label[0], emb.per_label[1]);
        assert_eq!(rec.winners[0], rec.winners[1]);
    }

    #[test]
    fn multi_layer_degenerate_cases() {
        let e = seq(3, 4, 13);
        let s = space(2, 4, 2, 14);
        let (single, _) = encode_all(&e, &s).unwrap();
        let (v1, _) = multi_layer_encode(std::slice::from_ref(&e), std::slice::from_ref(&s)).unwrap();
        assert_eq!(v1, single.concatenated);
        let (v2, recs) = multi_layer_encode(&[e.clone(), e.clone()], &[s.clone(), s.clone()]).unwrap();
        assert_eq!(v2, [single.concatenated.clone(), single.concatenated].concat());
        assert_eq!(recs.len(), 2);
        assert!(matches!(multi_layer_encode(&[e], &[s.clone(), s]), Err(Error::Config(_))));
    }

    #[test]
    fn non_winning_columns_receive_no_gradient() {
        let e = seq(3, 4, 15);
        let s = space(2, 4, 3, 16);
        let (_, rec) = encode_all(&e, &s).unwrap();
        let g = init_uniform(&mut SeededRng::new(17), 1, 8, 1.0).unwrap().into_vec();
        let (_, gc) = encode_all_backward(&e, &s, &rec, &g).unwrap();
        for i in 0..2 {
            for p in 0..3 {
                let won = rec.winners[i].contains(&p);
                let col_zero = gc[i].column(p).iter().all(|&v| v == 0.0);
                if !won {
                    assert!(col_zero, "label {i} prototype {p} lost everywhere yet has gradient");
                }
            }
        }
    }

    #[test]
    fn backward_rejects_mismatched_record() {
        let e = seq(3, 4, 18);
        let s = space(2, 4, 2, 19);
        let (_, rec) = encode_all(&e, &s).unwrap();
        assert!(matches!(encode_all_backward(&e, &s, &rec, &[0.0; 4]), Err(Error::Usage(_))));
    }
}
