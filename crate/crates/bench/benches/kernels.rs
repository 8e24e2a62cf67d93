use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use skelreid::eval::{evaluate, pairwise_distances, Identity};
use skelreid::nn::{Attention, Binder, Init, ParamStore, WeightInit};
use skelreid::Graph;
use skelreid_bench::random_tensor;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let (a, b) = (random_tensor(&[n, n], 1), random_tensor(&[n, n], 2));
        group.bench_with_input(BenchmarkId::new("forward", n), &n, |bench, _| {
            bench.iter(|| {
                let g = Graph::new();
                g.constant(a.clone()).matmul(&g.constant(b.clone())).unwrap().tensor()
            })
        });
        group.bench_with_input(BenchmarkId::new("backward", n), &n, |bench, _| {
            bench.iter(|| {
                let g = Graph::new();
                let (x, y) = (g.leaf(a.clone(), true), g.leaf(b.clone(), true));
                g.backward(x.matmul(&y).unwrap().sum()).unwrap()
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    let (dim, heads) = (64, 4);
    let mut store = ParamStore::new();
    let attn = Attention::new(&mut Init::new(&mut store, 0), "attn", dim, heads, WeightInit::Uniform).unwrap();
    for tokens in [9, 18, 36] {
        let x = random_tensor(&[16, tokens, dim], 3);
        group.bench_with_input(BenchmarkId::new("forward_backward", tokens), &tokens, |bench, _| {
            bench.iter(|| {
                let g = Graph::new();
                let b = Binder::new(&g, &store);
                let out = attn.self_attend(&b, &g.constant(x.clone())).unwrap();
                b.grads(&g.backward(out.sum()).unwrap())
            })
        });
    }
    group.finish();
}

fn softmax(c: &mut Criterion) {
    let x = random_tensor(&[256, 64], 4);
    c.bench_function("log_softmax_256x64", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            g.constant(x.clone()).log_softmax().unwrap().tensor()
        })
    });
}

fn retrieval_metrics(c: &mut Criterion) {
    let (q, g) = (random_tensor(&[128, 64], 5), random_tensor(&[512, 64], 6));
    let ids = |n: usize, cam: usize| (0..n).map(|i| Identity { pid: i % 32, cam }).collect::<Vec<_>>();
    let (qi, gi) = (ids(128, 0), ids(512, 1));
    c.bench_function("evaluate_128x512", |bench| {
        bench.iter(|| evaluate(&pairwise_distances(&q, &g).unwrap(), &qi, &gi, true).unwrap())
    });
}

criterion_group!(benches, matmul, attention, softmax, retrieval_metrics);
criterion_main!(benches);
