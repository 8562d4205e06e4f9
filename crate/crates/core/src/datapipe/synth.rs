use serde::{Deserialize, Serialize};

use super::corpus::{from_splits, Dataset, Document};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Recipe for a keyword-driven synthetic corpus.
///
/// Class `c` owns keywords `k{c}_0..k{c}_{vocab_per_class}`; its pool also
/// borrows the first `overlap` keywords of class `c+1 (mod L)`. Every token
/// is drawn from the class pool with probability `1 − noise_rate`, otherwise
/// from the shared filler words `w0..w{shared_vocab}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub labels: usize,
    pub docs_per_class: usize,
    pub test_docs_per_class: usize,
    pub vocab_per_class: usize,
    pub shared_vocab: usize,
    pub doc_len: usize,
    pub noise_rate: f64,
    pub overlap: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            labels: 4,
            docs_per_class: 200,
            test_docs_per_class: 50,
            vocab_per_class: 10,
            shared_vocab: 50,
            doc_len: 20,
            noise_rate: 0.2,
            overlap: 0,
        }
    }
}

impl SynthSpec {
    pub fn label_name(c: usize) -> String {
        format!("c{c}")
    }

    pub fn keyword_pool(&self, class: usize) -> Vec<String> {
        let mut pool: Vec<String> = (0..self.vocab_per_class).map(|i| format!("k{class}_{i}")).collect();
        let next = (class + 1) % self.labels;
        if next != class {
            pool.extend((0..self.overlap.min(self.vocab_per_class)).map(|i| format!("k{next}_{i}")));
        }
        pool
    }

    fn validate(&self) -> Result<()> {
        if self.labels < 2 || self.docs_per_class == 0 || self.vocab_per_class == 0 || self.doc_len == 0 {
            return Err(Error::Usage(
                "synthetic corpus needs >= 2 labels and positive docs, vocabulary and length".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Usage(format!("noise rate must be in [0, 1), got {}", self.noise_rate)));
        }
        if self.noise_rate > 0.0 && self.shared_vocab == 0 {
            return Err(Error::Usage("noise needs a non-empty shared vocabulary".into()));
        }
        Ok(())
    }
}

pub fn synth_corpus(rng: &mut SeededRng, spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let pools: Vec<Vec<String>> = (0..spec.labels).map(|c| spec.keyword_pool(c)).collect();
    let shared: Vec<String> = (0..spec.shared_vocab).map(|i| format!("w{i}")).collect();
    let mut make = |split: &str, per_class: usize| -> Vec<Document> {
        let mut docs = Vec::with_capacity(per_class * spec.labels);
        for (c, pool) in pools.iter().enumerate() {
            for _ in 0..per_class {
                let tokens = (0..spec.doc_len)
                    .map(|_| {
                        if rng.next_f64() < spec.noise_rate {
                            shared[rng.below(shared.len())].clone()
                        } else {
                            pool[rng.below(pool.len())].clone()
                        }
                    })
                    .collect();
                docs.push(Document {
                    id: format!("{split}-{}", docs.len() + 1),
                    tokens,
                    label: SynthSpec::label_name(c),
                });
            }
        }
        docs
    };
    let train = make("train", spec.docs_per_class);
    let test = make("test", spec.test_docs_per_class);
    from_splits(train, None, test, format!("synthetic:{}", serde_json::to_string(spec).unwrap_or_default()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_keywords_identify_class() {
        let spec = SynthSpec {
            labels: 2,
            noise_rate: 0.0,
            docs_per_class: 10,
            test_docs_per_class: 2,
            ..SynthSpec::default()
        };
        let ds = synth_corpus(&mut SeededRng::new(1), &spec).unwrap();
        for d in &ds.train {
            let c: usize = d.label[1..].parse().unwrap();
            let pool = spec.keyword_pool(c);
            assert!(d.tokens.iter().all(|t| pool.contains(t)));
            let other = spec.keyword_pool(1 - c);
            assert!(d.tokens.iter().all(|t| !other.contains(t)));
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = SynthSpec::default();
        let a = synth_corpus(&mut SeededRng::new(3), &spec).unwrap();
        let b = synth_corpus(&mut SeededRng::new(3), &spec).unwrap();
        assert_eq!(a, b);
        let c = synth_corpus(&mut SeededRng::new(4), &spec).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn overlap_borrows_next_class_keywords() {
        let spec = SynthSpec {
            labels: 3,
            overlap: 2,
            ..SynthSpec::default()
        };
        let pool = spec.keyword_pool(2);
        assert!(pool.contains(&"k0_0".to_string()));
        assert!(pool.contains(&"k0_1".to_string()));
        assert!(!pool.contains(&"k0_2".to_string()));
    }

    #[test]
    fn bad_spec_is_rejected() {
        let spec = SynthSpec {
            noise_rate: 1.0,
            ..SynthSpec::default()
        };
        assert!(synth_corpus(&mut SeededRng::new(0), &spec).is_err());
    }
}
