//! Retrieval datastore: keys are encoder outputs on training prefixes,
//! values are the tokens that followed. Search is exact (full scan,
//! squared-Euclidean, ties broken by lower index) — at desk scale this is
//! cheap and removes recall as a confound.

use alloc::collections::BinaryHeap;
use alloc::vec;
use alloc::vec::Vec;

use crate::dist::Distribution;
use crate::error::{CoreError, Result};
use crate::math;
use crate::model::{encode_batch, FrozenBinding, Model};
use crate::tensor::sq_euclidean;
use crate::tokenizer::{with_bos, Corpus};

/// Retrieval hyperparameters. The metric is fixed to squared Euclidean.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KnnConfig {
    pub k: usize,
    pub temperature: f64,
    pub lambda: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig { k: 16, temperature: 1.0, lambda: 0.25 }
    }
}

#[derive(Debug, Clone)]
pub struct Datastore {
    d_model: usize,
    keys: Vec<f64>,
    values: Vec<u32>,
    /// `(sequence index, position)`: the key is the encoding of
    /// `[BOS] + body[..position]` and the value is `body[position]`.
    provenance: Vec<(u32, u32)>,
    model_fingerprint: u64,
}

impl Datastore {
    pub fn from_parts(
        d_model: usize,
        keys: Vec<f64>,
        values: Vec<u32>,
        provenance: Vec<(u32, u32)>,
        model_fingerprint: u64,
    ) -> Result<Datastore> {
        if values.is_empty() {
            return Err(CoreError::EmptyCorpus);
        }
        if keys.len() != values.len() * d_model || provenance.len() != values.len() {
            return Err(CoreError::ShapeMismatch {
                op: "datastore",
                lhs: vec![keys.len() / d_model.max(1), d_model],
                rhs: vec![values.len()],
            });
        }
        Ok(Datastore { d_model, keys, values, provenance, model_fingerprint })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d_model
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.d_model..(i + 1) * self.d_model]
    }

    pub fn keys_flat(&self) -> &[f64] {
        &self.keys
    }

    pub fn value(&self, i: usize) -> u32 {
        self.values[i]
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn provenance(&self) -> &[(u32, u32)] {
        &self.provenance
    }

    pub fn fingerprint(&self) -> u64 {
        self.model_fingerprint
    }

    /// Exact k-nearest-neighbour search: the `k` smallest squared-Euclidean
    /// distances, ascending, ties broken by lower index.
    pub fn query(&self, q: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if q.len() != self.d_model {
            return Err(CoreError::ShapeMismatch {
                op: "query",
                lhs: vec![q.len()],
                rhs: vec![self.d_model],
            });
        }
        if k == 0 {
            return Err(CoreError::InvalidParameter { what: "k", value: 0.0 });
        }
        if k > self.len() {
            return Err(CoreError::KTooLarge { k, store: self.len() });
        }
        let mut heap: BinaryHeap<Neighbor> = BinaryHeap::with_capacity(k + 1);
        for i in 0..self.len() {
            let d = sq_euclidean(q, self.key(i));
            if heap.len() < k {
                heap.push(Neighbor { dist: d, index: i });
            } else if let Some(worst) = heap.peek() {
                if (d, i) < (worst.dist, worst.index) {
                    heap.pop();
                    heap.push(Neighbor { dist: d, index: i });
                }
            }
        }
        let mut out: Vec<(usize, f64)> =
            heap.into_iter().map(|n| (n.index, n.dist)).collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        Ok(out)
    }
}

#[derive(PartialEq)]
struct Neighbor {
    dist: f64,
    index: usize,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        self.dist.total_cmp(&other.dist).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// One datastore entry per predictable position of every sequence: the key
/// is the encoder output on the BOS-prefixed context, the value the next
/// token. Sequences are batched (right-padded) for the encoding pass.
pub fn build_datastore(model: &Model, corpus: &Corpus) -> Result<Datastore> {
    if corpus.sequences.is_empty() || corpus.token_count() == 0 {
        return Err(CoreError::EmptyCorpus);
    }
    let cfg = model.config();
    let d = cfg.d_model;
    let n_total = corpus.token_count();
    let mut keys = vec![0.0f64; n_total * d];
    let mut values = Vec::with_capacity(n_total);
    let mut provenance = Vec::with_capacity(n_total);

    const BATCH: usize = 64;
    let mut written = 0usize;
    for (chunk_start, chunk) in corpus
        .sequences
        .chunks(BATCH)
        .enumerate()
        .map(|(ci, c)| (ci * BATCH, c))
    {
        let inputs: Vec<Vec<u32>> = chunk
            .iter()
            .map(|body| with_bos(&body[..body.len() - 1]))
            .collect();
        let src = FrozenBinding::new(model);
        let enc = encode_batch(&src, cfg, &inputs, None)?;
        let hidden = enc.hidden.value();
        for (s, body) in chunk.iter().enumerate() {
            for (p, &next) in body.iter().enumerate() {
                let row = hidden.row(s * enc.seq + p);
                keys[written * d..(written + 1) * d].copy_from_slice(row);
                values.push(next);
                provenance.push(((chunk_start + s) as u32, p as u32));
                written += 1;
            }
        }
    }
    debug_assert_eq!(written, n_total);
    Datastore::from_parts(d, keys, values, provenance, model.enc_fingerprint())
}

/// Retrieval distribution: `p(y) ∝ Σ_{i: value_i = y} exp(−distance_i / τ)`,
/// with zero mass outside the retrieved tokens.
pub fn knn_distribution(
    store: &Datastore,
    neighbors: &[(usize, f64)],
    temperature: f64,
    vocab_size: usize,
) -> Result<Distribution> {
    if neighbors.is_empty() {
        return Err(CoreError::InvalidParameter { what: "neighbor count", value: 0.0 });
    }
    if temperature <= 0.0 {
        return Err(CoreError::InvalidParameter { what: "temperature", value: temperature });
    }
    let d_min = neighbors.iter().map(|n| n.1).fold(f64::INFINITY, f64::min);
    let mut probs = vec![0.0f64; vocab_size];
    let mut total = 0.0;
    for &(idx, dist) in neighbors {
        let y = store.value(idx);
        if y as usize >= vocab_size {
            return Err(CoreError::TokenOutOfRange { id: y, vocab: vocab_size });
        }
        let w = math::exp(-(dist - d_min) / temperature);
        probs[y as usize] += w;
        total += w;
    }
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(Distribution::new_unchecked(probs))
}

/// `λ·p_knn + (1−λ)·p_lm`.
pub fn interpolate(p_lm: &Distribution, p_knn: &Distribution, lambda: f64) -> Result<Distribution> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CoreError::InvalidParameter { what: "lambda", value: lambda });
    }
    if p_lm.len() != p_knn.len() {
        return Err(CoreError::ShapeMismatch {
            op: "interpolate",
            lhs: vec![p_lm.len()],
            rhs: vec![p_knn.len()],
        });
    }
    let probs = p_lm
        .probs()
        .iter()
        .zip(p_knn.probs())
        .map(|(&a, &b)| lambda * b + (1.0 - lambda) * a)
        .collect();
    Ok(Distribution::new_unchecked(probs))
}
