use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use symdiff_core::equitest::perm_two_sample_test;
use symdiff_core::io::{generate_toy_dataset, ToyDatasetSpec};
use symdiff_core::nets::{InitMode, Model};
use symdiff_core::objective::{symdiff_step_loss, value_and_grad};
use symdiff_core::ortho::sample_haar;
use symdiff_core::sampler::generate;
use symdiff_core::schedule::{make_cosine_schedule, WeightMode};
use symdiff_core::{GammaKind, NetConfig, RngStream};

fn model() -> Model {
    let mut cfg = NetConfig::new(1, 32, 2);
    cfg.f_hidden = 16;
    Model::new(cfg, InitMode::Random, &mut RngStream::new(0)).unwrap()
}

fn loss_and_grad(c: &mut Criterion) {
    let m = model();
    let nets = m.nets();
    let sched = make_cosine_schedule(100, 0.008).unwrap();
    let spec = ToyDatasetSpec { count: 1, ..ToyDatasetSpec::default() };
    let z0 = generate_toy_dataset(&spec).unwrap().remove(0);
    for (name, gamma) in [("plain", GammaKind::Identity), ("symdiff", GammaKind::Recursive)] {
        c.bench_function(&format!("loss_grad_{name}_n6"), |b| {
            let mut s = RngStream::new(1);
            b.iter(|| {
                value_and_grad(&nets, |tape, bound| {
                    symdiff_step_loss(tape, bound, &nets, &sched, &z0, 50, gamma, WeightMode::Unit, &mut s)
                })
                .unwrap()
            })
        });
    }
}

fn haar(c: &mut Criterion) {
    let mut s = RngStream::new(2);
    c.bench_function("sample_haar", |b| b.iter(|| sample_haar(&mut s).unwrap()));
}

fn perm_test(c: &mut Criterion) {
    let mut s = RngStream::new(3);
    let mk = |s: &mut RngStream| -> Vec<Vec<f64>> { (0..300).map(|_| s.randn(1, 24).into_data()).collect() };
    let (a, b_) = (mk(&mut s), mk(&mut s));
    c.bench_function("perm_test_300x300_p50", |b| {
        b.iter(|| perm_two_sample_test(black_box(&a), black_box(&b_), 50, 0.01, &mut RngStream::new(4)).unwrap())
    });
}

fn sampling(c: &mut Criterion) {
    let m = model();
    let nets = m.nets();
    let sched = make_cosine_schedule(100, 0.008).unwrap();
    let mut g = c.benchmark_group("generate_t100_n6");
    g.sample_size(10);
    for (name, gamma) in [("identity", GammaKind::Identity), ("recursive", GammaKind::Recursive)] {
        g.bench_function(name, |b| {
            let mut s = RngStream::new(5);
            b.iter(|| generate(&nets, &sched, gamma, 6, 1, &mut s).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, loss_and_grad, haar, perm_test, sampling);
criterion_main!(benches);
