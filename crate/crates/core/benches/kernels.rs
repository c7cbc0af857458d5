use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uot_core::bench::problems;
use uot_core::fields::{init_params, Trainable};
use uot_core::par;
use uot_core::trainer::{evaluate, TrainConfig};
use uot_core::{Tape, Tensor};

const PATHS: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>() - 0.5).collect())
}

fn tape_ops(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(1024, 100, &mut rng);
    let w = random(100, 20, &mut rng);
    let mut g = c.benchmark_group("tape_matmul_tanh_backward");
    for (name, on) in PATHS {
        g.bench_function(BenchmarkId::new(name, "1024x100x20"), |b| {
            par::set_parallel(on);
            b.iter(|| {
                let mut tape = Tape::new();
                let xn = tape.constant(x.clone()).unwrap();
                let wn = tape.param(w.clone()).unwrap();
                let h = tape.matmul(xn, wn).unwrap();
                let t = tape.tanh(h).unwrap();
                let s = tape.sum_all(t).unwrap();
                black_box(tape.backward(s).unwrap());
            });
        });
    }
    g.finish();
    par::set_parallel(true);
}

fn epoch(c: &mut Criterion) {
    let mut g = c.benchmark_group("objective_and_gradient");
    g.sample_size(10);
    for d in [2, 30] {
        let b = problems::builtin(5, d).unwrap();
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fields = init_params(cfg.field_shape(d), &mut rng);
        let points = b.problem.rho0.sample(cfg.batch, &mut rng).points;
        for (name, on) in PATHS {
            g.bench_function(BenchmarkId::new(name, format!("d{d}")), |bench| {
                par::set_parallel(on);
                bench.iter(|| black_box(evaluate(&fields, &b.problem, &cfg, &points, Trainable::ALL).unwrap()));
            });
        }
    }
    g.finish();
    par::set_parallel(true);
}

criterion_group!(benches, tape_ops, epoch);
criterion_main!(benches);
