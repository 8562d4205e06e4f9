//! Classifying layer: `ȳ = softmax(W₂ · relu(W₁v + b₁) + b₂)`, the
//! cross-entropy loss, and the pooled head used when the label-guided layer
//! is ablated.

use serde::{Deserialize, Serialize};

use crate::contextual::EncodedSequence;
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, softmax, Matrix, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl DenseLayer {
    /// Weights uniform in ±1/√in, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut SeededRng) -> Self {
        let scale = 1.0 / (input as f64).sqrt();
        let mut w = Matrix::zeros(output, input);
        for v in w.as_mut_slice() {
            *v = rng.uniform(scale);
        }
        DenseLayer { w, b: vec![0.0; output] }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        DenseLayer {
            w: Matrix::zeros(output, input),
            b: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.w.matvec(x)?;
        for (o, b) in y.iter_mut().zip(&self.b) {
            *o += b;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub compress: DenseLayer,
    pub output: DenseLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub compress: DenseLayer,
    pub output: DenseLayer,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    pub input: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// `m_f = 10 · L`
pub fn default_compressed_dim(labels: usize) -> usize {
    10 * labels
}

impl ClassifierHead {
    pub fn init(input: usize, compressed: usize, labels: usize, rng: &mut SeededRng) -> Self {
        let compress = DenseLayer::init(input, compressed, rng);
        let output = DenseLayer::init(compressed, labels, rng);
        ClassifierHead { compress, output }
    }

    pub fn zeros(input: usize, compressed: usize, labels: usize) -> Self {
        ClassifierHead {
            compress: DenseLayer::zeros(input, compressed),
            output: DenseLayer::zeros(compressed, labels),
        }
    }

    pub fn labels(&self) -> usize {
        self.output.output_dim()
    }

    pub fn zero_grads(&self) -> HeadGrads {
        HeadGrads {
            compress: DenseLayer::zeros(self.compress.input_dim(), self.compress.output_dim()),
            output: DenseLayer::zeros(self.output.input_dim(), self.output.output_dim()),
        }
    }

    pub fn forward(&self, v: &[f64]) -> Result<HeadCache> {
        if v.len() != self.compress.input_dim() {
            return Err(Error::shape(
                "classifier input",
                (v.len(), 1),
                (self.compress.input_dim(), 1),
            ));
        }
        let pre_activation = self.compress.apply(v)?;
        let hidden: Vec<f64> = pre_activation.iter().map(|x| x.max(0.0)).collect();
        let logits = self.output.apply(&hidden)?;
        let probs = softmax(&logits)?;
        Ok(HeadCache {
            input: v.to_vec(),
            pre_activation,
            hidden,
            logits,
            probs,
        })
    }

    /// Gradients of `cross_entropy_logits(cache.logits, gold)`; returns the
    /// gradient with respect to the head input as well.
    pub fn backward(&self, cache: &HeadCache, gold: usize) -> Result<(HeadGrads, Vec<f64>)> {
        if cache.input.len() != self.compress.input_dim()
            || cache.hidden.len() != self.compress.output_dim()
            || cache.probs.len() != self.labels()
        {
            return Err(Error::Usage("classifier cache does not match this head".into()));
        }
        if gold >= self.labels() {
            return Err(Error::Usage(format!("gold label {gold} out of range for {} labels", self.labels())));
        }
        let mut grads = self.zero_grads();
        let d_logits = logit_gradient(&cache.probs, gold);
        grads.output.w.add_outer(&d_logits, &cache.hidden)?;
        grads.output.b.copy_from_slice(&d_logits);
        let mut d_pre = self.output.w.matvec_t(&d_logits)?;
        for (d, &z) in d_pre.iter_mut().zip(&cache.pre_activation) {
            if z <= 0.0 {
                *d = 0.0;
            }
        }
        grads.compress.w.add_outer(&d_pre, &cache.input)?;
        grads.compress.b.copy_from_slice(&d_pre);
        let d_input = self.compress.w.matvec_t(&d_pre)?;
        Ok((grads, d_input))
    }
}

/// Fused softmax + cross-entropy gradient at the logits: `ȳ − onehot(gold)`.
pub fn logit_gradient(probs: &[f64], gold: usize) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(i, &p)| if i == gold { p - 1.0 } else { p })
        .collect()
}

/// `−ln ȳ[gold]` for an already-normalised distribution.
pub fn cross_entropy(probs: &[f64], gold: usize) -> Result<f64> {
    let p = probs
        .get(gold)
        .ok_or_else(|| Error::Usage(format!("gold label {gold} out of range for {} labels", probs.len())))?;
    Ok(-p.ln())
}

/// `log Σ exp(z) − z[gold]`, the stable form used during training.
pub fn cross_entropy_logits(logits: &[f64], gold: usize) -> Result<f64> {
    let z = logits
        .get(gold)
        .ok_or_else(|| Error::Usage(format!("gold label {gold} out of range for {} labels", logits.len())))?;
    Ok((log_sum_exp(logits)? - z).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
    Last,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            "last" => Ok(Pooling::Last),
            other => Err(Error::Usage(format!("unknown pooling {other:?} (mean, max, last)"))),
        }
    }
}

/// Which rows fed each pooled coordinate, for the backward pass.
#[derive(Debug, Clone)]
pub enum PoolCache {
    Mean { live: Vec<usize> },
    Max { argmax: Vec<usize> },
    Last { row: usize },
}

/// Pools the unmasked contextual rows into one `m_c` vector.
pub fn pooled_baseline_forward(encoded: &EncodedSequence, pooling: Pooling) -> Result<(Vec<f64>, PoolCache)> {
    let live: Vec<usize> = (0..encoded.len()).filter(|&j| encoded.mask[j]).collect();
    if live.is_empty() {
        return Err(Error::Usage("cannot pool a fully masked sequence".into()));
    }
    let m = encoded.dim();
    let e = &encoded.contextual;
    match pooling {
        Pooling::Mean => {
            let mut v = vec![0.0; m];
            for &j in &live {
                for (acc, &x) in v.iter_mut().zip(e.row(j)) {
                    *acc += x;
                }
            }
            let n = live.len() as f64;
            v.iter_mut().for_each(|x| *x /= n);
            Ok((v, PoolCache::Mean { live }))
        }
        Pooling::Max => {
            let mut v = vec![f64::NEG_INFINITY; m];
            let mut argmax = vec![live[0]; m];
            for &j in &live {
                for (c, &x) in e.row(j).iter().enumerate() {
                    if x > v[c] {
                        v[c] = x;
                        argmax[c] = j;
                    }
                }
            }
            Ok((v, PoolCache::Max { argmax }))
        }
        Pooling::Last => {
            let row = *live.last().expect("non-empty");
            Ok((e.row(row).to_vec(), PoolCache::Last { row }))
        }
    }
}

pub fn pooled_baseline_backward(cache: &PoolCache, grad_v: &[f64], rows: usize) -> Matrix {
    let m = grad_v.len();
    let mut g = Matrix::zeros(rows, m);
    match cache {
        PoolCache::Mean { live } => {
            let n = live.len() as f64;
            for &j in live {
                for (o, &d) in g.row_mut(j).iter_mut().zip(grad_v) {
                    *o = d / n;
                }
            }
        }
        PoolCache::Max { argmax } => {
            for (c, &j) in argmax.iter().enumerate() {
                let cur = g.get(j, c);
                g.set(j, c, cur + grad_v[c]);
            }
        }
        PoolCache::Last { row } => g.row_mut(*row).copy_from_slice(grad_v),
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::init_uniform;

    #[test]
    fn zero_head_is_uniform() {
        let head = ClassifierHead::zeros(6, 30, 3);
        let c = head.forward(&[0.3; 6]).unwrap();
        for p in &c.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_set_two_label_head() {
        // v = [1, -2]; W1 = [[1, 0], [0.5, 1]], b1 = [0, 0.5]
        // pre = [1, -1] -> hidden = [1, 0]
        // W2 = [[2, 1], [-1, 3]], b2 = [0, 1] -> logits = [2, 0]
        let head = ClassifierHead {
            compress: DenseLayer {
                w: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 1.0]]).unwrap(),
                b: vec![0.0, 0.5],
            },
            output: DenseLayer {
                w: Matrix::from_rows(&[vec![2.0, 1.0], vec![-1.0, 3.0]]).unwrap(),
                b: vec![0.0, 1.0],
            },
        };
        let c = head.forward(&[1.0, -2.0]).unwrap();
        assert_eq!(c.hidden, vec![1.0, 0.0]);
        assert_eq!(c.logits, vec![2.0, 0.0]);
        // 1/(1+e^-2) = 0.88079707797788244...
        assert!((c.probs[0] - 0.880_797_077_977_882_4).abs() < 1e-15);
        assert!((c.probs[1] - 0.119_202_922_022_117_56).abs() < 1e-15);
    }

    #[test]
    fn probabilities_are_valid_for_extreme_inputs() {
        let mut rng = SeededRng::new(1);
        let head = ClassifierHead::init(5, 20, 2, &mut rng);
        for scale in [1e-6, 1.0, 1e3] {
            let v: Vec<f64> = (0..5).map(|_| rng.uniform(scale)).collect();
            let c = head.forward(&v).unwrap();
            assert!((c.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(c.probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        assert!(head.forward(&[0.0; 4]).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!((cross_entropy(&[0.25; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
        assert!(cross_entropy_logits(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn cross_entropy_logits_matches_reference() {
        // logits [0.3, -1.2, 2.5, 0.0], gold 1; reference from mpmath at 50 digits.
        let loss = cross_entropy_logits(&[0.3, -1.2, 2.5, 0.0], 1).unwrap();
        assert!((loss - 3.896_891_303_559_35).abs() < 1e-10, "{loss}");
    }

    #[test]
    fn logit_gradient_is_probs_minus_onehot() {
        let mut rng = SeededRng::new(2);
        let head = ClassifierHead::init(4, 30, 3, &mut rng);
        let c = head.forward(&[0.1, -0.4, 0.9, 0.2]).unwrap();
        let (g, _) = head.backward(&c, 2).unwrap();
        let expected: Vec<f64> = c.probs.iter().enumerate().map(|(i, &p)| p - f64::from(u8::from(i == 2))).collect();
        assert_eq!(g.output.b, expected);
    }

    #[test]
    fn dead_relu_units_get_no_gradient() {
        let mut rng = SeededRng::new(3);
        let head = ClassifierHead::init(4, 30, 3, &mut rng);
        let c = head.forward(&[0.5, -0.2, 0.3, 0.7]).unwrap();
        let (g, _) = head.backward(&c, 0).unwrap();
        let mut dead = 0;
        for (u, &z) in c.pre_activation.iter().enumerate() {
            if z < 0.0 {
                dead += 1;
                assert!(g.compress.w.row(u).iter().all(|&v| v == 0.0));
                assert_eq!(g.compress.b[u], 0.0);
            }
        }
        assert!(dead > 0);
    }

    #[test]
    fn backward_rejects_bad_inputs() {
        let head = ClassifierHead::zeros(3, 20, 2);
        let c = head.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(head.backward(&c, 2).is_err());
        let other = ClassifierHead::zeros(4, 20, 2);
        assert!(matches!(other.backward(&c, 0), Err(Error::Usage(_))));
    }

    fn seq(rows: Vec<Vec<f64>>, mask: Vec<bool>) -> EncodedSequence {
        EncodedSequence::with_mask(Matrix::from_rows(&rows).unwrap(), mask).unwrap()
    }

    #[test]
    fn mean_pooling_cases() {
        let s = seq(vec![vec![1.0, 2.0], vec![9.0, 9.0]], vec![true, false]);
        assert_eq!(pooled_baseline_forward(&s, Pooling::Mean).unwrap().0, vec![1.0, 2.0]);
        let s = seq(vec![vec![1.0, 2.0], vec![3.0, -4.0]], vec![true, true]);
        assert_eq!(pooled_baseline_forward(&s, Pooling::Mean).unwrap().0, vec![2.0, -1.0]);
        let s = seq(vec![vec![1.0, 2.0]], vec![false]);
        assert!(pooled_baseline_forward(&s, Pooling::Mean).is_err());
    }

    #[test]
    fn mean_pooling_matches_loop_oracle() {
        let m = init_uniform(&mut SeededRng::new(4), 5, 3, 1.0).unwrap();
        let mask = vec![true, false, true, true, false];
        let s = EncodedSequence::with_mask(m.clone(), mask.clone()).unwrap();
        let (v, _) = pooled_baseline_forward(&s, Pooling::Mean).unwrap();
        for c in 0..3 {
            let mut acc = 0.0;
            let mut n = 0.0;
            for j in 0..5 {
                if mask[j] {
                    acc += m.get(j, c);
                    n += 1.0;
                }
            }
            assert!((v[c] - acc / n).abs() < 1e-12);
        }
    }

    #[test]
    fn max_and_last_pooling() {
        let s = seq(vec![vec![1.0, 5.0], vec![3.0, -4.0], vec![0.0, 0.0]], vec![true, true, false]);
        let (v, cache) = pooled_baseline_forward(&s, Pooling::Max).unwrap();
        assert_eq!(v, vec![3.0, 5.0]);
        let g = pooled_baseline_backward(&cache, &[1.0, 2.0], 3);
        assert_eq!(g.as_slice(), &[0.0, 2.0, 1.0, 0.0, 0.0, 0.0]);
        let (v, _) = pooled_baseline_forward(&s, Pooling::Last).unwrap();
        assert_eq!(v, vec![3.0, -4.0]);
    }
}
