//! Exact-search oracle: the heap-based query must match a naive
//! sort-everything scan, index for index.

use knnlab_core::datastore::{build_datastore, Datastore};
use knnlab_core::model::{Model, ModelConfig};
use knnlab_core::rng::{normal, substream};
use knnlab_core::tokenizer::Corpus;
use rand::Rng;

/// The oracle: compute every distance with its own loop, sort by
/// (distance, index), take k.
fn full_scan(store: &Datastore, q: &[f64], k: usize) -> Vec<(usize, f64)> {
    let d = store.dim();
    let mut all: Vec<(usize, f64)> = (0..store.len())
        .map(|i| {
            let key = store.key(i);
            let mut s = 0.0;
            for j in 0..d {
                let diff = q[j] - key[j];
                s += diff * diff;
            }
            (i, s)
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn random_store(n: usize, d: usize, seed: u64) -> Datastore {
    let mut rng = substream(seed, "knn.store");
    let keys: Vec<f64> = (0..n * d).map(|_| normal(&mut rng)).collect();
    let values: Vec<u32> = (0..n).map(|i| (i % 50) as u32).collect();
    let prov: Vec<(u32, u32)> = (0..n).map(|i| (i as u32, 0)).collect();
    Datastore::from_parts(d, keys, values, prov, 0).unwrap()
}

#[test]
fn query_matches_full_scan_oracle_exactly() {
    let store = random_store(5000, 24, 1);
    let mut rng = substream(2, "knn.queries");
    for trial in 0..1000 {
        let q: Vec<f64> = (0..24).map(|_| normal(&mut rng)).collect();
        let k = [1, 3, 16, 100][trial % 4];
        let got = store.query(&q, k).unwrap();
        let want = full_scan(&store, &q, k);
        assert_eq!(got, want, "trial {trial} k {k}");
    }
}

#[test]
fn duplicate_keys_tie_break_by_lower_index() {
    // three identical keys at indices 2, 5, 9
    let d = 4;
    let mut keys = vec![0.0f64; 12 * d];
    let mut rng = substream(3, "ties");
    for x in keys.iter_mut() {
        *x = normal(&mut rng);
    }
    let dup: Vec<f64> = (0..d).map(|j| keys[2 * d + j]).collect();
    for &i in &[5usize, 9] {
        keys[i * d..(i + 1) * d].copy_from_slice(&dup);
    }
    let values: Vec<u32> = (0..12).collect();
    let prov: Vec<(u32, u32)> = (0..12).map(|i| (i, 0)).collect();
    let store = Datastore::from_parts(d, keys, values, prov, 0).unwrap();
    let hits = store.query(&dup, 3).unwrap();
    assert_eq!(hits.iter().map(|h| h.0).collect::<Vec<_>>(), vec![2, 5, 9]);
    assert!(hits.iter().all(|h| h.1 == 0.0));
}

#[test]
fn datastore_counts_and_exact_prefix_retrieval() {
    let cfg = ModelConfig {
        vocab_size: 23,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 10,
        ablate_last_mlp: false,
        tie_embeddings: true,
        dropout: 0.0,
        seed: 31,
    };
    let model = Model::new(cfg).unwrap();
    let mut rng = substream(4, "ds.corpus");
    let sequences: Vec<Vec<u32>> = (0..40)
        .map(|_| {
            let len = rng.random_range(2..=8usize);
            (0..len).map(|_| rng.random_range(4..23) as u32).collect()
        })
        .collect();
    let corpus = Corpus { sequences };
    let store = build_datastore(&model, &corpus).unwrap();

    // one entry per predictable position
    let expected: usize = corpus.sequences.iter().map(Vec::len).sum();
    assert_eq!(store.len(), expected);
    assert_eq!(store.fingerprint(), model.enc_fingerprint());

    // a key built from an exact training prefix comes back at distance 0
    let body = &corpus.sequences[7];
    let t = body.len() - 1;
    let input = knnlab_core::tokenizer::with_bos(&body[..body.len() - 1]);
    let hidden = model.forward_enc(&input).unwrap();
    let hits = store.query(hidden.row(t), 1).unwrap();
    assert_eq!(hits[0].1, 0.0, "exact training prefix should match at distance 0");
    assert_eq!(store.value(hits[0].0), body[t]);

    // rebuilding with the identical model and corpus is bitwise identical
    let again = build_datastore(&model, &corpus).unwrap();
    assert_eq!(store.keys_flat(), again.keys_flat());
    assert_eq!(store.values(), again.values());
}

#[test]
fn single_sentence_with_bos_yields_len_entries() {
    let cfg = ModelConfig {
        vocab_size: 10,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 8,
        ablate_last_mlp: false,
        tie_embeddings: true,
        dropout: 0.0,
        seed: 1,
    };
    let model = Model::new(cfg).unwrap();
    let corpus = Corpus { sequences: vec![vec![4, 5, 6, 7, 8]] };
    let store = build_datastore(&model, &corpus).unwrap();
    assert_eq!(store.len(), 5);
    assert_eq!(store.provenance(), &[(0, 0), (0, 1), (0, 2), (0, 3), (0, 4)]);
}
