//! Pointer-match toy task.
//!
//! Position 0 holds a marker token naming a key. Somewhere in the second half
//! of the sequence sits the payload: an item token carrying the same key and
//! a class. The label is that class. Distractor items with other keys and
//! random classes are scattered over the remaining positions, and filler
//! tokens pad the rest. Reading the label therefore needs position 0 to
//! attend to one input-dependent, distant position.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{param_err, Result};
use crate::linalg::Rng;

/// Layout of the vocabulary and sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ToyTaskSpec {
    pub seq_len: usize,
    pub num_keys: usize,
    pub num_classes: usize,
    pub num_fillers: usize,
    /// Items with non-matching keys per sequence.
    pub distractors: usize,
}

/// What a token id encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Filler(usize),
    Marker { key: usize },
    Item { key: usize, class: usize },
}

impl ToyTaskSpec {
    /// Four keys, two classes, eight fillers and `seq_len / 4` distractors.
    pub fn new(seq_len: usize) -> Self {
        ToyTaskSpec {
            seq_len,
            num_keys: 4,
            num_classes: 2,
            num_fillers: 8,
            distractors: seq_len / 4,
        }
    }

    pub fn vocab(&self) -> usize {
        self.num_fillers + self.num_keys + self.num_keys * self.num_classes
    }

    pub fn marker_token(&self, key: usize) -> usize {
        self.num_fillers + key
    }

    pub fn item_token(&self, key: usize, class: usize) -> usize {
        self.num_fillers + self.num_keys + key * self.num_classes + class
    }

    pub fn decode(&self, token: usize) -> Option<TokenKind> {
        let items = self.num_fillers + self.num_keys;
        if token < self.num_fillers {
            Some(TokenKind::Filler(token))
        } else if token < items {
            Some(TokenKind::Marker {
                key: token - self.num_fillers,
            })
        } else if token < self.vocab() {
            let t = token - items;
            Some(TokenKind::Item {
                key: t / self.num_classes,
                class: t % self.num_classes,
            })
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.seq_len;
        if l < 8 {
            return Err(param_err("toy_task", alloc::format!("seq_len {l} < 8")));
        }
        if self.num_keys < 2 || self.num_classes < 2 || self.num_fillers == 0 {
            return Err(param_err(
                "toy_task",
                "need at least 2 keys, 2 classes and 1 filler",
            ));
        }
        // Marker and payload occupy two slots.
        if self.distractors > l - 2 {
            return Err(param_err(
                "toy_task",
                alloc::format!("{} distractors do not fit in l={l}", self.distractors),
            ));
        }
        Ok(())
    }
}

/// One labelled sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub payload_pos: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub spec: ToyTaskSpec,
    pub samples: Vec<Sample>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Draws one sample.
pub fn sample_sequence(spec: &ToyTaskSpec, rng: &mut Rng) -> Sample {
    let l = spec.seq_len;
    let mut tokens: Vec<usize> = (0..l).map(|_| rng.below(spec.num_fillers)).collect();
    let key = rng.below(spec.num_keys);
    let label = rng.below(spec.num_classes);
    tokens[0] = spec.marker_token(key);

    let payload_pos = l / 2 + rng.below(l - l / 2);
    tokens[payload_pos] = spec.item_token(key, label);

    let mut free: Vec<usize> = (1..l).filter(|&p| p != payload_pos).collect();
    rng.shuffle(&mut free);
    for &pos in free.iter().take(spec.distractors) {
        let other = (key + 1 + rng.below(spec.num_keys - 1)) % spec.num_keys;
        tokens[pos] = spec.item_token(other, rng.below(spec.num_classes));
    }
    Sample {
        tokens,
        label,
        payload_pos,
    }
}

/// `n_samples` independent pointer-match sequences.
pub fn make_toy_task(spec: &ToyTaskSpec, n_samples: usize, rng: &mut Rng) -> Result<ToyDataset> {
    spec.validate()?;
    Ok(ToyDataset {
        spec: *spec,
        samples: (0..n_samples).map(|_| sample_sequence(spec, rng)).collect(),
    })
}

/// Reads the label by scanning for the item whose key matches the marker.
pub fn brute_force_reader(spec: &ToyTaskSpec, tokens: &[usize]) -> Option<usize> {
    let Some(TokenKind::Marker { key }) = tokens.first().and_then(|&t| spec.decode(t)) else {
        return None;
    };
    tokens[1..].iter().find_map(|&t| match spec.decode(t) {
        Some(TokenKind::Item { key: k, class }) if k == key => Some(class),
        _ => None,
    })
}

/// Test accuracy of a multinomial logistic regression on normalized token
/// counts, fitted by full-batch gradient descent. Order information is
/// discarded, so a high score would mean the task leaks its label.
pub fn bag_of_words_baseline(train: &ToyDataset, test: &ToyDataset, epochs: usize, lr: f64) -> f64 {
    let spec = train.spec;
    let (v, c) = (spec.vocab(), spec.num_classes);
    let features = |s: &Sample| {
        let mut f = vec![0.0; v + 1];
        for &t in &s.tokens {
            f[t] += 1.0 / s.tokens.len() as f64 * 8.0;
        }
        f[v] = 1.0;
        f
    };
    let xs: Vec<Vec<f64>> = train.samples.iter().map(features).collect();
    let mut w = vec![vec![0.0; v + 1]; c];
    let logits = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter()
            .map(|wc| wc.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    };
    for _ in 0..epochs {
        let mut grad = vec![vec![0.0; v + 1]; c];
        for (x, s) in xs.iter().zip(&train.samples) {
            let z = logits(&w, x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|zi| libm::exp(zi - m)).collect();
            let sum: f64 = e.iter().sum();
            for (k, gk) in grad.iter_mut().enumerate() {
                let p = e[k] / sum - if k == s.label { 1.0 } else { 0.0 };
                for (g, xi) in gk.iter_mut().zip(x) {
                    *g += p * xi;
                }
            }
        }
        let n = xs.len() as f64;
        for (wk, gk) in w.iter_mut().zip(&grad) {
            for (a, g) in wk.iter_mut().zip(gk) {
                *a -= lr * g / n;
            }
        }
    }
    let correct = test
        .samples
        .iter()
        .filter(|s| {
            let z = logits(&w, &features(s));
            let pred = (0..c)
                .max_by(|&a, &b| z[a].partial_cmp(&z[b]).unwrap().then(b.cmp(&a)))
                .unwrap();
            pred == s.label
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}
