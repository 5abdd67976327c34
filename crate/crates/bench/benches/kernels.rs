use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use hywu_bench::{adapters, experiment, layout, square};
use hywu_core::manifold::{kmeans, random_project, ProjectionKind};
use hywu_core::rng;
use hywu_core::tasks::sample_balanced;
use hywu_core::tokenizer::{detokenize, tokenize};
use hywu_core::train::{pg_instance_loss, EvalShuffle, TrainedModel};
use hywu_core::{Tape, Tensor};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let (a, b) = (square(n, 1), square(n, 2));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| bench.iter(|| black_box(&a).matmul(&b)));
    }
    g.finish();
}

fn tokenizer(c: &mut Criterion) {
    let l = layout();
    let set = adapters(&l);
    let tokens = tokenize(&set, &l).unwrap();
    c.bench_function("tokenize", |b| b.iter(|| tokenize(black_box(&set), &l).unwrap()));
    c.bench_function("detokenize", |b| b.iter(|| detokenize(black_box(&tokens)).unwrap()));
}

fn generator(c: &mut Criterion) {
    let exp = experiment();
    let state = exp.init_generator().unwrap();
    let data = sample_balanced(&exp.tasks, 1, &mut rng::seeded(1, 2));
    let inst = &data[0];
    let cond = exp.condition(inst);
    c.bench_function("generator forward", |b| b.iter(|| state.generate(black_box(&cond)).unwrap()));
    c.bench_function("generator forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let p = state.params.load(&mut tape, true);
            let loss = pg_instance_loss(&mut tape, &exp, &state, &p, inst, &cond).unwrap();
            tape.backward(loss).unwrap()
        })
    });
    let eval_set = exp.eval_set(32);
    let model = TrainedModel::Generator(state.clone());
    c.bench_function("eval 64 instances", |b| {
        b.iter(|| hywu_core::train::eval(&model, &exp, black_box(&eval_set), EvalShuffle::None).unwrap())
    });
}

fn analysis(c: &mut Criterion) {
    let mut r = rng::seeded(3, 3);
    let pts: Vec<Vec<f64>> = (0..200).map(|_| Tensor::randn(&[64], 1.0, &mut r).into_data()).collect();
    c.bench_function("kmeans 200x64 k=4", |b| b.iter(|| kmeans(black_box(&pts), 4, 1).unwrap()));
    let wide: Vec<Vec<f64>> = (0..50).map(|_| Tensor::randn(&[1024], 1.0, &mut r).into_data()).collect();
    c.bench_function("project 50x1024 to 128", |b| {
        b.iter(|| random_project(black_box(&wide), 128, ProjectionKind::Gaussian, 1).unwrap())
    });
}

criterion_group!(benches, matmul, tokenizer, generator, analysis);
criterion_main!(benches);
