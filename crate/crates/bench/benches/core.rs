use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use elsa_core::autodiff::{mlp_forward, Activation, MlpParams, Tape, Tensor};
use elsa_core::convergence::{simulate_training, DiracGame, GdScheme};
use elsa_core::data::{gen_circle, CircleConfig};
use elsa_core::divergence::{js_divergence, GridDensity};
use elsa_core::rng;
use elsa_core::smoothing::{els_discriminator_loss, SmoothingSpec};
use elsa_core::trainer::{train_dat, Schedule, TrainConfig};

fn mlp_backward(c: &mut Criterion) {
    let mut r = rng::stream(0, "bench");
    let net = MlpParams::init(&[2, 32, 16, 30], Activation::Tanh, &mut r).unwrap();
    let x = Tensor::new(
        64,
        2,
        (0..128).map(|_| rng::standard_normal(&mut r)).collect(),
    )
    .unwrap();
    let labels: Vec<usize> = (0..64).map(|i| i % 30).collect();
    let spec = SmoothingSpec::two_sided(0.8, 30).unwrap();
    c.bench_function("mlp_backward_64x[2,32,16,30]", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let (bound, logits) = mlp_forward(&mut tape, &net, xv).unwrap();
            let loss = els_discriminator_loss(&mut tape, logits, &labels, &spec).unwrap();
            let g = tape.backward(loss).unwrap();
            black_box(bound.grads(&g))
        })
    });
}

fn divergence(c: &mut Criterion) {
    let p = GridDensity::gaussian(0.0, 1.0, -8.0, 9.0, 4096).unwrap();
    let q = GridDensity::gaussian(1.0, 1.0, -8.0, 9.0, 4096).unwrap();
    c.bench_function("js_divergence_4096", |b| {
        b.iter(|| js_divergence(black_box(&p), black_box(&q)).unwrap())
    });
}

fn dirac_game(c: &mut Criterion) {
    let game = DiracGame::new(1.0, -1.0);
    let scheme = GdScheme::alternating(0.5, 5, 1, 0.9).unwrap();
    c.bench_function("simulate_training_alternating_1e4", |b| {
        b.iter(|| simulate_training(&game, black_box(&scheme), 10_000, (0.01, 0.0)).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let ds = gen_circle(&CircleConfig::default()).unwrap();
    let mut cfg = TrainConfig::new(SmoothingSpec::annealed(30));
    cfg.schedule = Schedule::Grl;
    cfg.steps = 50;
    cfg.eval_every = 50;
    cfg.lr = 0.005;
    cfg.model.activation = Activation::Tanh;
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("circle_grl_50_steps", |b| {
        b.iter(|| train_dat(&ds, black_box(&cfg)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, mlp_backward, divergence, dirac_game, training);
criterion_main!(benches);
