use std::hint::black_box;

use codemae::diagnostics::{ssim, Matrix, SsimConfig};
use codemae::nn::{self_attention, AttentionParams};
use codemae::trainer::{load_registry, load_teacher, TrainConfig, Trainer};
use codemae::{Graph, ParamStore, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16usize, 64, 128] {
        let a = Tensor::<f32>::from_fn(&[n, n], |i| (i % 7) as f32 * 0.1);
        let b = Tensor::<f32>::from_fn(&[n, n], |i| (i % 5) as f32 * 0.2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("self_attention_fwd_bwd");
    for tokens in [16usize, 64] {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AttentionParams::init(&mut store, &mut rng, "attn", 64, 4, 0.02).unwrap();
        let x = Tensor::<f32>::from_fn(&[tokens, 64], |i| ((i * 31) % 17) as f32 / 17.0);
        group.bench_with_input(BenchmarkId::from_parameter(tokens), &tokens, |bch, _| {
            bch.iter(|| {
                let mut g = Graph::new();
                let v = g.constant(x.clone());
                let y = self_attention(&mut g, &store, &p, v).unwrap();
                let l = g.sum(y);
                g.backward(l).unwrap();
                black_box(g.param_grads(&store))
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut cfg = TrainConfig::default();
    for (k, v) in [
        ("image_size", "32"),
        ("patch", "8"),
        ("width", "32"),
        ("heads", "4"),
        ("encoder_depth", "2"),
        ("decoder_width", "32"),
        ("decoder_heads", "4"),
        ("decoder_depth", "2"),
        ("cdr_depth", "2"),
        ("synth_scenes", "16"),
        ("epochs", "100000"),
    ] {
        cfg.set(k, v).unwrap();
    }
    let mut t = Trainer::new(cfg.clone(), load_registry(&cfg).unwrap(), load_teacher(&cfg).unwrap()).unwrap();
    c.bench_function("train_step_toy", |b| {
        b.iter(|| black_box(t.train_step().unwrap()))
    });
}

fn ssim_bench(c: &mut Criterion) {
    let a = Matrix::new(64, 64, (0..64 * 64).map(|i| ((i * 13) % 29) as f64 / 29.0).collect());
    let b = Matrix::new(64, 64, (0..64 * 64).map(|i| ((i * 7) % 23) as f64 / 23.0).collect());
    let cfg = SsimConfig::default();
    c.bench_function("ssim_64x64", |bch| bch.iter(|| ssim(black_box(&a), black_box(&b), &cfg).unwrap()));
}

criterion_group!(benches, matmul, attention, train_step, ssim_bench);
criterion_main!(benches);
