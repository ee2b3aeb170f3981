//! Decoder-only transformer with an explicit three-stage factorization.
//!
//! The forward pass is exposed as `prefix encoder → final-MLP stage → output
//! head`, with a fixed boundary contract:
//!
//! * **encoder** (`encode_batch` / [`Model::forward_enc`]) — token and
//!   position embeddings, every block before the last in full, and the last
//!   block's attention sublayer with its residual;
//! * **final-MLP stage** (`apply_g_node` / [`Model::apply_g`]) — the last
//!   block's MLP sublayer with its residual, then the final layernorm; with
//!   `ablate_last_mlp` set this collapses to the final layernorm alone;
//! * **output head** (`apply_f_node` / [`Model::apply_f`]) — the (optionally
//!   tied) output matrix followed by softmax, nothing else.
//!
//! The monolithic forward pass *is* the composition of the three builders,
//! so the factorization identity holds by construction.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::dist::Distribution;
use crate::error::{CoreError, Result};
use crate::graph::{ops, DiffNode, NodeRef, Parameter};
use crate::rng;
use crate::tensor::Tensor;
use crate::tokenizer::PAD_ID;

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub ablate_last_mlp: bool,
    pub tie_embeddings: bool,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults around a given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 64,
            ablate_last_mlp: false,
            tie_embeddings: true,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(CoreError::InvalidConfig(format!(
                "vocab_size must be >= 2, got {}",
                self.vocab_size
            )));
        }
        if self.max_seq_len < 2 {
            return Err(CoreError::InvalidConfig(format!(
                "max_seq_len must be >= 2, got {}",
                self.max_seq_len
            )));
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return Err(CoreError::InvalidConfig("zero-sized model".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::InvalidParameter { what: "dropout", value: self.dropout });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn has_block_mlp(&self, layer: usize) -> bool {
        layer + 1 < self.n_layers || !self.ablate_last_mlp
    }
}

#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Expected parameter names and shapes for a config, in canonical order.
pub fn expected_param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d) = (cfg.vocab_size, cfg.d_model);
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    out.push(("wte".into(), vec![v, d]));
    out.push(("wpe".into(), vec![cfg.max_seq_len, d]));
    for i in 0..cfg.n_layers {
        let p = format!("block{i}");
        out.push((format!("{p}.ln1.gain"), vec![d]));
        out.push((format!("{p}.ln1.bias"), vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{p}.attn.{w}"), vec![d, d]));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            out.push((format!("{p}.attn.{b}"), vec![d]));
        }
        if cfg.has_block_mlp(i) {
            out.push((format!("{p}.ln2.gain"), vec![d]));
            out.push((format!("{p}.ln2.bias"), vec![d]));
            out.push((format!("{p}.mlp.w_in"), vec![d, 4 * d]));
            out.push((format!("{p}.mlp.b_in"), vec![4 * d]));
            out.push((format!("{p}.mlp.w_out"), vec![4 * d, d]));
            out.push((format!("{p}.mlp.b_out"), vec![d]));
        }
    }
    out.push(("ln_f.gain".into(), vec![d]));
    out.push(("ln_f.bias".into(), vec![d]));
    if !cfg.tie_embeddings {
        out.push(("lm_head".into(), vec![v, d]));
    }
    out
}

/// Trained parameters grouped behind the three-stage factorization.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Vec<NamedTensor>,
    index: BTreeMap<String, usize>,
}

impl Model {
    /// Fresh model: weights `N(0, 0.02)`, biases zero, layernorm gain 1.
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut stream = rng::substream(config.seed, "model.init");
        let is_bias = |name: &str| {
            [".bias", ".bq", ".bk", ".bv", ".bo", ".b_in", ".b_out"]
                .iter()
                .any(|s| name.ends_with(s))
        };
        let mut params = Vec::new();
        for (name, shape) in expected_param_shapes(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if is_bias(&name) {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng::normal(&mut stream) * INIT_STD).collect()
            };
            params.push(NamedTensor { name, tensor: Tensor::new(&shape, data), trainable: true });
        }
        Model::from_parts(config, params)
    }

    /// Assemble from explicit parameters, validating names and shapes.
    pub fn from_parts(config: ModelConfig, params: Vec<NamedTensor>) -> Result<Model> {
        config.validate()?;
        let expected = expected_param_shapes(&config);
        if expected.len() != params.len() {
            return Err(CoreError::InvalidConfig(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        let mut index = BTreeMap::new();
        for (i, (p, (name, shape))) in params.iter().zip(&expected).enumerate() {
            if &p.name != name {
                return Err(CoreError::InvalidConfig(format!(
                    "parameter {i} should be {name:?}, got {:?}",
                    p.name
                )));
            }
            if p.tensor.shape() != shape.as_slice() {
                return Err(CoreError::InvalidConfig(format!(
                    "parameter {name:?} should have shape {shape:?}, got {:?}",
                    p.tensor.shape()
                )));
            }
            if index.insert(p.name.clone(), i).is_some() {
                return Err(CoreError::InvalidConfig(format!("duplicate parameter {name:?}")));
            }
        }
        Ok(Model { config, params, index })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[self.index[name]].tensor
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index[name];
        &mut self.params[i].tensor
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// True for parameters consumed by the prefix encoder (everything before
    /// the last block's MLP sublayer).
    pub fn is_enc_param(&self, name: &str) -> bool {
        let last = format!("block{}", self.config.n_layers - 1);
        !(name == "lm_head"
            || name.starts_with("ln_f")
            || name.starts_with(&format!("{last}.ln2"))
            || name.starts_with(&format!("{last}.mlp")))
    }

    /// FNV-1a over the encoder parameters; identifies the datastore's encoder.
    pub fn enc_fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut mix = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        mix(&(self.config.d_model as u64).to_le_bytes());
        for p in &self.params {
            if !self.is_enc_param(&p.name) {
                continue;
            }
            mix(p.name.as_bytes());
            for &x in p.tensor.data() {
                mix(&x.to_le_bytes());
            }
        }
        h
    }

    /// Checksum over all parameters (used to assert frozen weights).
    pub fn param_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for p in &self.params {
            h = h.wrapping_mul(31).wrapping_add(rng::fnv1a64(p.name.as_bytes()));
            for &x in p.tensor.data() {
                for &b in &x.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

// ── Parameter sources ───────────────────────────────────────────────────

/// Where a graph builder gets its parameter leaves from.
pub trait ParamSource {
    fn leaf(&self, name: &str) -> NodeRef;
}

/// Eager binding used by training: every parameter becomes one persistent
/// *variable* leaf; graphs built across steps share those leaves, so
/// gradients land in one place and the optimizer mutates values in place.
pub struct Binding {
    order: Vec<String>,
    leaves: BTreeMap<String, NodeRef>,
    trainable: BTreeMap<String, bool>,
}

impl Binding {
    pub fn new(model: &Model) -> Binding {
        let mut leaves = BTreeMap::new();
        let mut trainable = BTreeMap::new();
        let mut order = Vec::new();
        for p in model.params() {
            leaves.insert(p.name.clone(), DiffNode::leaf(p.tensor.clone()));
            trainable.insert(p.name.clone(), p.trainable);
            order.push(p.name.clone());
        }
        Binding { order, leaves, trainable }
    }

    /// Parameter views in canonical model order.
    pub fn parameters(&self) -> Vec<Parameter> {
        self.order
            .iter()
            .map(|name| Parameter {
                node: self.leaves[name].clone(),
                name: name.clone(),
                trainable: self.trainable[name],
            })
            .collect()
    }

    /// Copy current leaf values back into a model (after training).
    pub fn write_back(&self, model: &mut Model) {
        for name in &self.order {
            let v = self.leaves[name].value().clone();
            *model.param_mut(name) = v;
        }
    }
}

impl ParamSource for Binding {
    fn leaf(&self, name: &str) -> NodeRef {
        self.leaves[name].clone()
    }
}

/// Lazy read-only binding used by inference and projection: leaves are
/// *constants* (excluded from gradient propagation — the parameters stay
/// frozen by construction) and are only materialized when first used.
pub struct FrozenBinding<'m> {
    model: &'m Model,
    cache: RefCell<BTreeMap<String, NodeRef>>,
}

impl<'m> FrozenBinding<'m> {
    pub fn new(model: &'m Model) -> Self {
        FrozenBinding { model, cache: RefCell::new(BTreeMap::new()) }
    }
}

impl ParamSource for FrozenBinding<'_> {
    fn leaf(&self, name: &str) -> NodeRef {
        let mut cache = self.cache.borrow_mut();
        cache
            .entry(name.into())
            .or_insert_with(|| DiffNode::constant(self.model.param(name).clone()))
            .clone()
    }
}

// ── Graph builders ──────────────────────────────────────────────────────

/// Optional inverted-dropout context for training-time graphs.
pub struct Dropout<'r> {
    pub rng: &'r mut ChaCha12Rng,
    pub rate: f64,
}

fn maybe_dropout(x: &NodeRef, ctx: &mut Option<Dropout<'_>>) -> Result<NodeRef> {
    let Some(d) = ctx.as_mut() else {
        return Ok(x.clone());
    };
    if d.rate <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - d.rate;
    let (shape, n) = {
        let v = x.value();
        (v.shape().to_vec(), v.numel())
    };
    let mask: Vec<f64> = (0..n)
        .map(|_| if d.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    ops::mul(x, &DiffNode::constant(Tensor::new(&shape, mask)))
}

/// Hidden states after the prefix encoder, flattened to `(batch·seq, d)`.
pub struct EncodedBatch {
    pub hidden: NodeRef,
    pub batch: usize,
    pub seq: usize,
}

fn validate_seq(cfg: &ModelConfig, ids: &[u32]) -> Result<()> {
    if ids.is_empty() {
        return Err(CoreError::EmptyCorpus);
    }
    if ids.len() > cfg.max_seq_len {
        return Err(CoreError::SequenceTooLong { len: ids.len(), max: cfg.max_seq_len });
    }
    for &id in ids {
        if id as usize >= cfg.vocab_size {
            return Err(CoreError::TokenOutOfRange { id, vocab: cfg.vocab_size });
        }
    }
    Ok(())
}

fn mlp_sublayer<S: ParamSource>(
    src: &S,
    x: &NodeRef,
    prefix: &str,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<NodeRef> {
    let m = ops::layernorm(
        x,
        &src.leaf(&format!("{prefix}.ln2.gain")),
        &src.leaf(&format!("{prefix}.ln2.bias")),
        LAYERNORM_EPS,
    )?;
    let m = ops::add(&ops::matmul(&m, &src.leaf(&format!("{prefix}.mlp.w_in")))?, &src.leaf(&format!("{prefix}.mlp.b_in")))?;
    let m = ops::gelu(&m)?;
    let m = ops::add(&ops::matmul(&m, &src.leaf(&format!("{prefix}.mlp.w_out")))?, &src.leaf(&format!("{prefix}.mlp.b_out")))?;
    let m = maybe_dropout(&m, dropout)?;
    ops::add(x, &m)
}

/// Prefix encoder over a right-padded batch: embeddings, all blocks before
/// the last, and the last block's attention sublayer (with residual).
pub fn encode_batch<S: ParamSource>(
    src: &S,
    cfg: &ModelConfig,
    seqs: &[Vec<u32>],
    mut dropout: Option<Dropout<'_>>,
) -> Result<EncodedBatch> {
    if seqs.is_empty() {
        return Err(CoreError::EmptyCorpus);
    }
    for s in seqs {
        validate_seq(cfg, s)?;
    }
    let b = seqs.len();
    let t = seqs.iter().map(Vec::len).max().unwrap();
    let mut flat_ids = Vec::with_capacity(b * t);
    let mut flat_pos = Vec::with_capacity(b * t);
    for s in seqs {
        for (p, &id) in s.iter().enumerate() {
            flat_ids.push(id);
            flat_pos.push(p as u32);
        }
        for p in s.len()..t {
            flat_ids.push(PAD_ID);
            flat_pos.push(p as u32);
        }
    }

    let tok_emb = ops::embed_lookup(&src.leaf("wte"), &flat_ids)?;
    let pos_emb = ops::embed_lookup(&src.leaf("wpe"), &flat_pos)?;
    let mut x = ops::add(&tok_emb, &pos_emb)?;
    x = maybe_dropout(&x, &mut dropout)?;

    let h = cfg.n_heads;
    let inv_sqrt_hd = 1.0 / crate::math::sqrt(cfg.head_dim() as f64);
    for i in 0..cfg.n_layers {
        let p = format!("block{i}");
        let a = ops::layernorm(
            &x,
            &src.leaf(&format!("{p}.ln1.gain")),
            &src.leaf(&format!("{p}.ln1.bias")),
            LAYERNORM_EPS,
        )?;
        let q = ops::add(&ops::matmul(&a, &src.leaf(&format!("{p}.attn.wq")))?, &src.leaf(&format!("{p}.attn.bq")))?;
        let k = ops::add(&ops::matmul(&a, &src.leaf(&format!("{p}.attn.wk")))?, &src.leaf(&format!("{p}.attn.bk")))?;
        let v = ops::add(&ops::matmul(&a, &src.leaf(&format!("{p}.attn.wv")))?, &src.leaf(&format!("{p}.attn.bv")))?;
        let q3 = ops::split_heads(&q, b, h)?;
        let k3 = ops::split_heads(&k, b, h)?;
        let v3 = ops::split_heads(&v, b, h)?;
        let scores = ops::scale(&ops::matmul_nt(&q3, &k3)?, inv_sqrt_hd)?;
        let attn = ops::softmax(&ops::mask_causal(&scores)?)?;
        let attn = maybe_dropout(&attn, &mut dropout)?;
        let ctx = ops::matmul(&attn, &v3)?;
        let merged = ops::merge_heads(&ctx, b, h)?;
        let o = ops::add(&ops::matmul(&merged, &src.leaf(&format!("{p}.attn.wo")))?, &src.leaf(&format!("{p}.attn.bo")))?;
        let o = maybe_dropout(&o, &mut dropout)?;
        x = ops::add(&x, &o)?;
        if i + 1 < cfg.n_layers {
            x = mlp_sublayer(src, &x, &p, &mut dropout)?;
        }
    }
    Ok(EncodedBatch { hidden: x, batch: b, seq: t })
}

/// Final-MLP stage on `(rows, d)` hidden states: last block's MLP sublayer
/// plus residual, then the final layernorm. With the ablation flag set this
/// is the final layernorm alone.
pub fn apply_g_node<S: ParamSource>(
    src: &S,
    cfg: &ModelConfig,
    hidden: &NodeRef,
    mut dropout: Option<Dropout<'_>>,
) -> Result<NodeRef> {
    let pre = if cfg.ablate_last_mlp {
        hidden.clone()
    } else {
        mlp_sublayer(src, hidden, &format!("block{}", cfg.n_layers - 1), &mut dropout)?
    };
    ops::layernorm(&pre, &src.leaf("ln_f.gain"), &src.leaf("ln_f.bias"), LAYERNORM_EPS)
}

/// Output head on `(rows, d)` states: (optionally tied) output matrix, then
/// softmax. Returns row-wise distributions `(rows, vocab)`.
pub fn apply_f_node<S: ParamSource>(src: &S, cfg: &ModelConfig, z: &NodeRef) -> Result<NodeRef> {
    let head = if cfg.tie_embeddings { src.leaf("wte") } else { src.leaf("lm_head") };
    ops::softmax(&ops::matmul_nt(z, &head)?)
}

/// Mean next-token cross-entropy over a batch of bodies (each sequence is
/// consumed as `[BOS] + body[..n-1] → body`); PAD positions contribute 0.
pub struct LossGraph {
    pub loss: NodeRef,
    pub probs: NodeRef,
    pub predicted: usize,
}

pub fn build_loss_graph<S: ParamSource>(
    src: &S,
    cfg: &ModelConfig,
    bodies: &[Vec<u32>],
    mut dropout: Option<Dropout<'_>>,
) -> Result<LossGraph> {
    for b in bodies {
        if b.is_empty() {
            return Err(CoreError::EmptyCorpus);
        }
    }
    let inputs: Vec<Vec<u32>> = bodies
        .iter()
        .map(|b| crate::tokenizer::with_bos(&b[..b.len() - 1]))
        .collect();
    let enc = encode_batch(
        src,
        cfg,
        &inputs,
        dropout.as_mut().map(|d| Dropout { rng: &mut *d.rng, rate: d.rate }),
    )?;
    let z = apply_g_node(
        src,
        cfg,
        &enc.hidden,
        dropout.as_mut().map(|d| Dropout { rng: &mut *d.rng, rate: d.rate }),
    )?;
    let probs = apply_f_node(src, cfg, &z)?;
    let (bt, v) = (enc.batch * enc.seq, cfg.vocab_size);
    let mut onehot = vec![0.0f64; bt * v];
    let mut predicted = 0usize;
    for (r, body) in bodies.iter().enumerate() {
        for (p, &target) in body.iter().enumerate() {
            onehot[(r * enc.seq + p) * v + target as usize] = 1.0;
            predicted += 1;
        }
    }
    let target = DiffNode::constant(Tensor::new(&[bt, v], onehot));
    let ce = ops::cross_entropy(&probs, &target)?;
    let loss = ops::scale(&ce, 1.0 / predicted as f64)?;
    Ok(LossGraph { loss, probs, predicted })
}

// ── Convenience inference API ───────────────────────────────────────────

impl Model {
    /// Encoder output for every prefix position of one sequence, `(len, d)`.
    pub fn forward_enc(&self, tokens: &[u32]) -> Result<Tensor> {
        let src = FrozenBinding::new(self);
        let enc = encode_batch(&src, &self.config, &[tokens.to_vec()], None)?;
        let out = enc.hidden.value().clone();
        Ok(out)
    }

    /// Final-MLP stage on a single hidden vector.
    pub fn apply_g(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.config.d_model {
            return Err(CoreError::ShapeMismatch {
                op: "apply_g",
                lhs: vec![h.len()],
                rhs: vec![self.config.d_model],
            });
        }
        let src = FrozenBinding::new(self);
        let node = DiffNode::constant(Tensor::new(&[1, h.len()], h.to_vec()));
        let z = apply_g_node(&src, &self.config, &node, None)?;
        let out = z.value().data().to_vec();
        Ok(out)
    }

    /// Output head on a single pre-head vector.
    pub fn apply_f(&self, z: &[f64]) -> Result<Distribution> {
        if z.len() != self.config.d_model {
            return Err(CoreError::ShapeMismatch {
                op: "apply_f",
                lhs: vec![z.len()],
                rhs: vec![self.config.d_model],
            });
        }
        let src = FrozenBinding::new(self);
        let node = DiffNode::constant(Tensor::new(&[1, z.len()], z.to_vec()));
        let probs = apply_f_node(&src, &self.config, &node)?;
        let out = probs.value().data().to_vec();
        Ok(Distribution::new_unchecked(out))
    }

    /// Distributions at every position of one sequence, `(len, vocab)`.
    pub fn forward_probs(&self, tokens: &[u32]) -> Result<Tensor> {
        let src = FrozenBinding::new(self);
        let enc = encode_batch(&src, &self.config, &[tokens.to_vec()], None)?;
        let z = apply_g_node(&src, &self.config, &enc.hidden, None)?;
        let probs = apply_f_node(&src, &self.config, &z)?;
        let out = probs.value().clone();
        Ok(out)
    }

    /// Distributions at the last position of each sequence in a batch.
    pub fn next_token_distribution_batch(&self, seqs: &[Vec<u32>]) -> Result<Vec<Distribution>> {
        let src = FrozenBinding::new(self);
        let enc = encode_batch(&src, &self.config, seqs, None)?;
        let z = apply_g_node(&src, &self.config, &enc.hidden, None)?;
        let probs = apply_f_node(&src, &self.config, &z)?;
        let value = probs.value();
        Ok(seqs
            .iter()
            .enumerate()
            .map(|(r, s)| {
                let row = value.row(r * enc.seq + s.len() - 1);
                Distribution::new_unchecked(row.to_vec())
            })
            .collect())
    }

    /// Next-token distribution after `tokens` (the composed forward pass at
    /// the last position).
    pub fn next_token_distribution(&self, tokens: &[u32]) -> Result<Distribution> {
        Ok(self.next_token_distribution_batch(&[tokens.to_vec()])?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::BOS_ID;

    fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 12,
            ablate_last_mlp: false,
            tie_embeddings: true,
            dropout: 0.0,
            seed: 9,
        }
    }

    #[test]
    fn forward_enc_shape_contract() {
        let m = Model::new(tiny_config(11)).unwrap();
        let h = m.forward_enc(&[BOS_ID, 4, 5, 6]).unwrap();
        assert_eq!(h.shape(), &[4, 16]);
    }

    #[test]
    fn shared_prefixes_encode_identically() {
        let m = Model::new(tiny_config(11)).unwrap();
        let a = m.forward_enc(&[BOS_ID, 4, 5, 6, 7]).unwrap();
        let b = m.forward_enc(&[BOS_ID, 4, 5, 8, 9]).unwrap();
        for p in 0..3 {
            assert_eq!(a.row(p), b.row(p), "prefix position {p} diverged");
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn out_of_range_token_and_overlong_sequence_error() {
        let m = Model::new(tiny_config(11)).unwrap();
        assert!(matches!(
            m.forward_enc(&[BOS_ID, 11]),
            Err(CoreError::TokenOutOfRange { .. })
        ));
        let long: Vec<u32> = (0..13).map(|_| 1).collect();
        assert!(matches!(
            m.forward_enc(&long),
            Err(CoreError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn ablated_stage_is_exactly_the_final_layernorm() {
        let mut cfg = tiny_config(11);
        cfg.ablate_last_mlp = true;
        let m = Model::new(cfg).unwrap();
        let h: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).sin()).collect();
        let z = m.apply_g(&h).unwrap();
        let mut expect = vec![0.0; 16];
        crate::tensor::layernorm_rows(
            &h,
            m.param("ln_f.gain").data(),
            m.param("ln_f.bias").data(),
            &mut expect,
            16,
            LAYERNORM_EPS,
        );
        assert_eq!(z, expect);
    }

    #[test]
    fn zeroed_mlp_weights_reduce_stage_to_final_layernorm() {
        let mut m = Model::new(tiny_config(11)).unwrap();
        m.param_mut("block1.mlp.w_out").fill(0.0);
        m.param_mut("block1.mlp.b_out").fill(0.0);
        let h: Vec<f64> = (0..16).map(|i| (i as f64 * 0.21).cos()).collect();
        let z = m.apply_g(&h).unwrap();
        let mut expect = vec![0.0; 16];
        crate::tensor::layernorm_rows(
            &h,
            m.param("ln_f.gain").data(),
            m.param("ln_f.bias").data(),
            &mut expect,
            16,
            LAYERNORM_EPS,
        );
        for (a, b) in z.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn composed_path_equals_monolithic_distribution() {
        let m = Model::new(tiny_config(11)).unwrap();
        let toks = [BOS_ID, 3, 9, 2, 7];
        let enc = m.forward_enc(&toks).unwrap();
        let z = m.apply_g(enc.row(toks.len() - 1)).unwrap();
        let composed = m.apply_f(&z).unwrap();
        let mono = m.next_token_distribution(&toks).unwrap();
        for (a, b) in composed.probs().iter().zip(mono.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_gives_uniform_distribution() {
        let mut cfg = tiny_config(8);
        cfg.tie_embeddings = false;
        let mut m = Model::new(cfg).unwrap();
        m.param_mut("lm_head").fill(0.0);
        let p = m.apply_f(&vec![0.3; 16]).unwrap();
        for &x in p.probs() {
            assert!((x - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn ablation_changes_only_the_mlp_stage_parameters() {
        let full = Model::new(tiny_config(11)).unwrap();
        let mut cfg = tiny_config(11);
        cfg.ablate_last_mlp = true;
        let ablated = Model::new(cfg).unwrap();
        let enc_count = |m: &Model| -> usize {
            m.params()
                .iter()
                .filter(|p| m.is_enc_param(&p.name))
                .map(|p| p.tensor.numel())
                .sum()
        };
        assert_eq!(enc_count(&full), enc_count(&ablated));
        assert!(full.param_count() > ablated.param_count());
    }

    #[test]
    fn padded_batch_rows_match_unpadded_forward() {
        let m = Model::new(tiny_config(11)).unwrap();
        let short = vec![BOS_ID, 5, 6];
        let long = vec![BOS_ID, 1, 2, 3, 4, 5, 6];
        let batch = m
            .next_token_distribution_batch(&[short.clone(), long.clone()])
            .unwrap();
        let alone = m.next_token_distribution(&short).unwrap();
        assert_eq!(batch[0].probs(), alone.probs());
    }
}
