// quick throughput probe: kernel ceiling + forward/backward split
use knnlab_core::model::*;
use knnlab_core::tensor;
use std::time::Instant;

fn main() {
    // raw kernel ceiling
    for (m, k, n) in [(288usize, 64usize, 64usize), (288, 64, 1700), (2048, 128, 512), (1024, 512, 128)] {
        let a = vec![0.5f64; m * k];
        let b = vec![0.25f64; k * n];
        let mut out = vec![0.0f64; m * n];
        let reps = (2e9 / (m * k * n) as f64).max(1.0) as usize;
        let t0 = Instant::now();
        for _ in 0..reps { tensor::mm_nn(&a, &b, &mut out, m, k, n); }
        let dt = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        for _ in 0..reps { tensor::mm_nt(&a, &b, &mut out, m, k, n); }
        let dt_nt = t1.elapsed().as_secs_f64();
        println!("mm {m}x{k}x{n}: nn {:.2} GFLOP/s, nt {:.2} GFLOP/s", 2.0 * (reps * m * k * n) as f64 / dt / 1e9, 2.0 * (reps * m * k * n) as f64 / dt_nt / 1e9);
    }
    // forward vs backward split
    for (v, d, layers, t, b) in [(1700usize, 64usize, 4usize, 9usize, 32usize), (1500, 128, 4, 32, 32)] {
        let cfg = ModelConfig { vocab_size: v, d_model: d, n_layers: layers, n_heads: 4, max_seq_len: 64, ablate_last_mlp: false, tie_embeddings: true, dropout: 0.0, seed: 1 };
        let model = Model::new(cfg.clone()).unwrap();
        let binding = Binding::new(&model);
        let bodies: Vec<Vec<u32>> = (0..b).map(|i| (0..t).map(|j| (4 + (i * 7 + j * 3) % (v - 4)) as u32).collect()).collect();
        let n_steps = 5;
        let mut fw = 0.0; let mut bw = 0.0;
        for _ in 0..n_steps {
            let t0 = Instant::now();
            let lg = build_loss_graph(&binding, &cfg, &bodies, None).unwrap();
            fw += t0.elapsed().as_secs_f64();
            for p in binding.parameters() { p.node.zero_grad(); }
            let t1 = Instant::now();
            knnlab_core::graph::backward(&lg.loss).unwrap();
            bw += t1.elapsed().as_secs_f64();
        }
        println!("V={v} d={d} T={t}: fwd {:.3} s/step, bwd {:.3} s/step", fw / n_steps as f64, bw / n_steps as f64);
    }
}
