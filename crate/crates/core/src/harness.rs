//! Training loop, evaluation metrics, and the perplexity machinery shared by
//! the packaged experiments.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::datastore::{interpolate, knn_distribution, Datastore, KnnConfig};
use crate::dist::Distribution;
use crate::error::{CoreError, Result};
use crate::graph::{self, Parameter};
use crate::macondo::EvalPrompt;
use crate::math;
use crate::model::{
    apply_f_node, apply_g_node, build_loss_graph, encode_batch, Binding, Dropout, FrozenBinding,
    Model,
};
use crate::rng::substream;
use crate::tensor::Tensor;
use crate::tokenizer::{with_bos, Corpus, Tokenizer};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 32,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("steps and batch_size must be positive".into()));
        }
        if self.eval_every == 0 || self.eval_every > self.steps {
            return Err(CoreError::InvalidConfig(alloc::format!(
                "eval_every {} must be in 1..=steps ({})",
                self.eval_every,
                self.steps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsRow {
    pub seed: u64,
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricsRow {
    pub fn new(seed: u64, step: usize, split: &str, metric: &str, value: f64) -> Self {
        MetricsRow { seed, step, split: split.into(), metric: metric.into(), value }
    }
}

// ── Optimizer ───────────────────────────────────────────────────────────

/// Adam with bias correction; moment buffers follow the parameter order of
/// the binding, so updates are deterministic.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &[Parameter]) -> Adam {
        let m = params.iter().map(|p| alloc::vec![0.0; p.node.value().numel()]).collect();
        let v = params.iter().map(|p| alloc::vec![0.0; p.node.value().numel()]).collect();
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, params: &[Parameter]) {
        self.t += 1;
        let bc1 = 1.0 - math::powi(self.beta1, self.t as i32);
        let bc2 = 1.0 - math::powi(self.beta2, self.t as i32);
        for (i, p) in params.iter().enumerate() {
            if !p.trainable {
                continue;
            }
            let grad = p.node.grad();
            let mut value = p.node.value_mut();
            let data = value.data_mut();
            for (j, &g) in grad.data().iter().enumerate() {
                let m = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g;
                let v = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g * g;
                self.m[i][j] = m;
                self.v[i][j] = v;
                data[j] -= self.lr * (m / bc1) / (math::sqrt(v / bc2) + self.eps);
            }
        }
    }
}

// ── Training loop ───────────────────────────────────────────────────────

/// Standard next-token cross-entropy training.
///
/// `on_eval(step, model)` runs at step 0, every `eval_every` steps, and at
/// the final step; it returns extra metric rows plus a stop flag. Training
/// is fully deterministic for a fixed `(model seed, train seed)` pair.
///
/// On loss divergence (NaN) the model is rolled back to the last evaluated
/// checkpoint and `Diverged` is returned.
pub fn train<F>(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut on_eval: F,
) -> Result<Vec<MetricsRow>>
where
    F: FnMut(usize, &Model) -> Result<(Vec<MetricsRow>, bool)>,
{
    cfg.validate()?;
    if corpus.sequences.is_empty() {
        return Err(CoreError::EmptyCorpus);
    }
    let mcfg = model.config().clone();
    let binding = Binding::new(model);
    let params = binding.parameters();
    let mut adam = Adam::new(cfg, &params);
    let mut batch_rng = substream(cfg.seed, "train.batches");
    let mut dropout_rng = substream(cfg.seed, "train.dropout");

    let mut rows: Vec<MetricsRow> = Vec::new();
    let (first_rows, stop) = on_eval(0, model)?;
    rows.extend(first_rows);
    if stop {
        return Ok(rows);
    }

    let mut order: Vec<usize> = (0..corpus.sequences.len()).collect();
    order.shuffle(&mut batch_rng);
    let mut cursor = 0usize;
    let mut last_good = model.clone();
    let mut loss_accum = 0.0f64;
    let mut loss_n = 0usize;

    for step in 1..=cfg.steps {
        let mut bodies: Vec<Vec<u32>> = Vec::with_capacity(cfg.batch_size);
        while bodies.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            bodies.push(corpus.sequences[order[cursor]].clone());
            cursor += 1;
        }
        let dropout = (mcfg.dropout > 0.0)
            .then (|| Dropout { rng: &mut dropout_rng, rate: mcfg.dropout });
        let lg = build_loss_graph(&binding, &mcfg, &bodies, dropout)?;
        let loss = lg.loss.value().item();
        if !loss.is_finite() {
            *model = last_good;
            return Err(CoreError::Diverged { step });
        }
        loss_accum += loss;
        loss_n += 1;
        for p in &params {
            p.node.zero_grad();
        }
        graph::backward(&lg.loss)?;
        adam.step(&params);

        if step % cfg.eval_every == 0 || step == cfg.steps {
            binding.write_back(&mut last_good);
            rows.push(MetricsRow::new(
                cfg.seed,
                step,
                "train",
                "loss",
                loss_accum / loss_n as f64,
            ));
            loss_accum = 0.0;
            loss_n = 0;
            let (mut extra, stop) = on_eval(step, &last_good)?;
            rows.append(&mut extra);
            if stop {
                break;
            }
        }
    }
    binding.write_back(model);
    Ok(rows)
}

// ── Shared forward helpers ──────────────────────────────────────────────

/// Encoder rows, pre-head rows and probability rows for a chunk of
/// sequences, as plain tensors.
pub struct EvalChunk {
    pub enc: Tensor,
    pub probs: Tensor,
    pub pre_head: Tensor,
    pub seq: usize,
}

pub fn forward_eval_chunk(model: &Model, inputs: &[Vec<u32>]) -> Result<EvalChunk> {
    let src = FrozenBinding::new(model);
    let cfg = model.config();
    let enc = encode_batch(&src, cfg, inputs, None)?;
    let z = apply_g_node(&src, cfg, &enc.hidden, None)?;
    let probs = apply_f_node(&src, cfg, &z)?;
    let out = EvalChunk {
        enc: enc.hidden.value().clone(),
        pre_head: z.value().clone(),
        probs: probs.value().clone(),
        seq: enc.seq,
    };
    Ok(out)
}

fn interpolated_row(
    store: &Datastore,
    knn: &KnnConfig,
    enc_row: &[f64],
    p_lm: &[f64],
) -> Result<Distribution> {
    let neighbors = store.query(enc_row, knn.k.min(store.len()))?;
    let p_knn = knn_distribution(store, &neighbors, knn.temperature, p_lm.len())?;
    let lm = Distribution::new_unchecked(p_lm.to_vec());
    interpolate(&lm, &p_knn, knn.lambda)
}

// ── Metrics ─────────────────────────────────────────────────────────────

/// `exp` of the mean negative log-likelihood over all predictable tokens,
/// under the vanilla or retrieval-interpolated distribution.
pub fn perplexity(
    model: &Model,
    corpus: &Corpus,
    knn: Option<(&Datastore, &KnnConfig)>,
) -> Result<f64> {
    if corpus.sequences.is_empty() || corpus.token_count() == 0 {
        return Err(CoreError::EmptyCorpus);
    }
    const CHUNK: usize = 32;
    let chunks: Vec<&[Vec<u32>]> = corpus.sequences.chunks(CHUNK).collect();
    let partials = crate::parallel::par_map_indexed(chunks.len(), |ci| -> Result<(f64, usize)> {
        let chunk = chunks[ci];
        let inputs: Vec<Vec<u32>> =
            chunk.iter().map(|b| with_bos(&b[..b.len() - 1])).collect();
        let fwd = forward_eval_chunk(model, &inputs)?;
        let mut nll = 0.0;
        let mut n = 0usize;
        for (s, body) in chunk.iter().enumerate() {
            for (p, &y) in body.iter().enumerate() {
                let row = fwd.probs.row(s * fwd.seq + p);
                let prob = match knn {
                    None => row[y as usize],
                    Some((store, kc)) => {
                        let enc_row = fwd.enc.row(s * fwd.seq + p);
                        interpolated_row(store, kc, enc_row, row)?.prob(y)
                    }
                };
                nll -= math::ln(prob.max(1e-300));
                n += 1;
            }
        }
        Ok((nll, n))
    });
    let mut nll = 0.0;
    let mut n = 0usize;
    for p in partials {
        let (a, b) = p?;
        nll += a;
        n += b;
    }
    Ok(math::exp(nll / n as f64))
}

#[derive(Debug, Clone)]
pub struct GroupStat {
    pub mean_loglik: f64,
    pub perfect_bound: f64,
    pub pairs: usize,
}

/// Children log-likelihood report (the Fig-style metric: mean over all
/// (prompt, gold-child) pairs, plus the perfect-model bound `log(1/#children)`).
#[derive(Debug, Clone)]
pub struct ChildrenEval {
    pub mean_loglik: f64,
    pub perfect_bound: f64,
    pub pairs: usize,
    pub by_children_count: BTreeMap<usize, GroupStat>,
}

/// Score `log p(child | prompt)` for every gold pair, vanilla or
/// retrieval-interpolated.
pub fn eval_children_loglik(
    model: &Model,
    tok: &Tokenizer,
    prompts: &[EvalPrompt],
    knn: Option<(&Datastore, &KnnConfig)>,
) -> Result<ChildrenEval> {
    if prompts.is_empty() {
        return Err(CoreError::EmptyCorpus);
    }
    // resolve children up front so vocabulary violations fail loudly
    let mut gold_ids: Vec<Vec<u32>> = Vec::with_capacity(prompts.len());
    for p in prompts {
        let ids = p
            .gold_children
            .iter()
            .map(|c| tok.single_token_id(c))
            .collect::<Result<Vec<u32>>>()?;
        gold_ids.push(ids);
    }

    const CHUNK: usize = 128;
    let idx_chunks: Vec<usize> = (0..prompts.len().div_ceil(CHUNK)).collect();
    let partials = crate::parallel::par_map_indexed(idx_chunks.len(), |ci| -> Result<Vec<(usize, f64, f64)>> {
        let lo = ci * CHUNK;
        let hi = (lo + CHUNK).min(prompts.len());
        let inputs: Vec<Vec<u32>> = prompts[lo..hi]
            .iter()
            .map(|p| with_bos(&tok.encode_line(&p.prompt)))
            .collect();
        let fwd = forward_eval_chunk(model, &inputs)?;
        let mut out = Vec::new();
        for (s, (prompt, ids)) in prompts[lo..hi].iter().zip(&gold_ids[lo..hi]).enumerate() {
            let last = s * fwd.seq + inputs[s].len() - 1;
            let row = fwd.probs.row(last);
            let dist = match knn {
                None => Distribution::new_unchecked(row.to_vec()),
                Some((store, kc)) => interpolated_row(store, kc, fwd.enc.row(last), row)?,
            };
            let c = prompt.gold_children.len();
            for &id in ids {
                out.push((c, math::ln(dist.prob(id).max(1e-300)), -math::ln(c as f64)));
            }
        }
        Ok(out)
    });

    let mut by: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    let mut total = (0.0f64, 0.0f64, 0usize);
    for p in partials {
        for (c, lp, bound) in p? {
            let e = by.entry(c).or_insert((0.0, 0.0, 0));
            e.0 += lp;
            e.1 += bound;
            e.2 += 1;
            total.0 += lp;
            total.1 += bound;
            total.2 += 1;
        }
    }
    let by_children_count = by
        .into_iter()
        .map(|(c, (lp, b, n))| {
            (c, GroupStat { mean_loglik: lp / n as f64, perfect_bound: b / n as f64, pairs: n })
        })
        .collect();
    Ok(ChildrenEval {
        mean_loglik: total.0 / total.2 as f64,
        perfect_bound: total.1 / total.2 as f64,
        pairs: total.2,
        by_children_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model(vocab: usize, seed: u64) -> Model {
        let cfg = ModelConfig {
            vocab_size: vocab,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 16,
            ablate_last_mlp: false,
            tie_embeddings: true,
            dropout: 0.0,
            seed,
        };
        Model::new(cfg).unwrap()
    }

    #[test]
    fn one_step_descends_on_a_single_sentence() {
        let tok = Tokenizer::build(["a b c d e f"], 1);
        let corpus = Corpus::from_lines(&tok, ["a b c d e f"], true);
        let mut model = tiny_model(tok.vocab_size(), 3);
        let cfg = TrainConfig {
            steps: 2,
            batch_size: 1,
            learning_rate: 1e-3,
            eval_every: 1,
            seed: 1,
            ..TrainConfig::default()
        };
        let rows = train(&mut model, &corpus, &cfg, |_, _| Ok((Vec::new(), false))).unwrap();
        let losses: Vec<f64> =
            rows.iter().filter(|r| r.metric == "loss").map(|r| r.value).collect();
        assert_eq!(losses.len(), 2);
        assert!(losses[1] < losses[0], "loss did not descend: {losses:?}");
    }

    #[test]
    fn overfits_ten_sentences_to_argmax_accuracy() {
        let lines: Vec<String> = (0..10)
            .map(|i| alloc::format!("s{i} verb{} obj{}", i % 3, (i * 7) % 5))
            .collect();
        let tok = Tokenizer::build(lines.iter().map(String::as_str), 1);
        let corpus = Corpus::from_lines(&tok, lines.iter().map(String::as_str), true);
        let mut model = tiny_model(tok.vocab_size(), 5);
        let cfg = TrainConfig {
            steps: 2000,
            batch_size: 10,
            learning_rate: 3e-3,
            eval_every: 2000,
            seed: 2,
            ..TrainConfig::default()
        };
        train(&mut model, &corpus, &cfg, |_, _| Ok((Vec::new(), false))).unwrap();
        let mut correct = 0usize;
        let mut totaled = 0usize;
        for body in &corpus.sequences {
            let probs = model.forward_probs(&with_bos(&body[..body.len() - 1])).unwrap();
            // position 0 is genuinely ambiguous (ten equally likely openers)
            for (p, &y) in body.iter().enumerate().skip(1) {
                let row = probs.row(p);
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0;
                correct += usize::from(argmax == y as usize);
                totaled += 1;
            }
        }
        assert_eq!(correct, totaled, "memorization incomplete: {correct}/{totaled}");
    }

    #[test]
    fn same_seed_gives_identical_metrics_streams() {
        let lines = ["u v w x", "w x y z", "u z y v"];
        let tok = Tokenizer::build(lines, 1);
        let corpus = Corpus::from_lines(&tok, lines, true);
        let cfg = TrainConfig {
            steps: 20,
            batch_size: 2,
            learning_rate: 1e-3,
            eval_every: 5,
            seed: 7,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = tiny_model(tok.vocab_size(), 11);
            train(&mut model, &corpus, &cfg, |step, m| {
                Ok((
                    alloc::vec![MetricsRow::new(7, step, "train", "perplexity", {
                        perplexity(m, &corpus, None).unwrap()
                    })],
                    false,
                ))
            })
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let tok = Tokenizer::build(["a b c d e f g h"], 1);
        let corpus = Corpus::from_lines(&tok, ["a b c d e f g h"], true);
        let mut cfg = ModelConfig::desk(tok.vocab_size());
        cfg.d_model = 16;
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.tie_embeddings = false;
        let mut model = Model::new(cfg).unwrap();
        model.param_mut("lm_head").fill(0.0);
        let ppl = perplexity(&model, &corpus, None).unwrap();
        let v = tok.vocab_size() as f64;
        assert!((ppl - v).abs() < 1e-9 * v, "ppl {ppl} vs vocab {v}");
    }

    #[test]
    fn lambda_zero_interpolation_matches_vanilla_exactly() {
        let tok = Tokenizer::build(["a b c a b d"], 1);
        let corpus = Corpus::from_lines(&tok, ["a b c a b d"], true);
        let model = tiny_model(tok.vocab_size(), 13);
        let store = crate::datastore::build_datastore(&model, &corpus).unwrap();
        let vanilla = perplexity(&model, &corpus, None).unwrap();
        let kc = KnnConfig { lambda: 0.0, ..KnnConfig::default() };
        let knn = perplexity(&model, &corpus, Some((&store, &kc))).unwrap();
        assert_eq!(vanilla, knn);
    }

    #[test]
    fn divergence_aborts_with_last_good_checkpoint() {
        let tok = Tokenizer::build(["a b c d"], 1);
        let corpus = Corpus::from_lines(&tok, ["a b c d"], true);
        let mut model = tiny_model(tok.vocab_size(), 1);
        let cfg = TrainConfig {
            steps: 200,
            batch_size: 4,
            learning_rate: 1e18, // guaranteed blow-up
            eval_every: 1,
            seed: 0,
            ..TrainConfig::default()
        };
        let before = model.param_checksum();
        match train(&mut model, &corpus, &cfg, |_, _| Ok((Vec::new(), false))) {
            Err(CoreError::Diverged { step }) => {
                assert!(step >= 1);
                // rolled back to the step-1 checkpoint, not left at the wreckage
                assert_ne!(model.param_checksum(), before);
                assert!(model.param("wte").all_finite());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
