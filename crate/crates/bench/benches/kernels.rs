use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ehrtext::encoder::Pass;
use ehrtext::evaluation::auprc;
use ehrtext::rng::stream;
use ehrtext::training::weighted_bce_loss;
use ehrtext_bench::{model_fixture, score_fixture, text_fixture};
use std::hint::black_box;

fn bench_tokenize(c: &mut Criterion) {
    let (descriptions, vocab) = text_fixture();
    c.bench_function("tokenize_catalog", |b| {
        b.iter(|| {
            for d in &descriptions {
                black_box(vocab.tokenize(d));
            }
        })
    });
}

fn bench_encoder(c: &mut Criterion) {
    let mut group = c.benchmark_group("encoder");
    group.sample_size(20);
    for len in [64, 256] {
        let (model, seq) = model_fixture(len);
        group.bench_with_input(BenchmarkId::new("forward", len), &seq, |b, seq| {
            let mut rng = stream(0, &[]);
            b.iter(|| black_box(model.encode_forward(seq, Pass::Eval, &mut rng).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", len), &seq, |b, seq| {
            let mut rng = stream(0, &[]);
            b.iter(|| {
                let enc = model.encode_forward(seq, Pass::Train, &mut rng).unwrap();
                let mut grads = model.params.zeros_like();
                let mut d_hidden = enc.hidden.zeros_like();
                let d_logits = vec![0.1; model.config.num_phenotypes];
                model.classify_backward(&enc.hidden, &d_logits, &mut grads, &mut d_hidden);
                model.backward(&enc, &d_hidden, &mut grads).unwrap();
                black_box(grads)
            })
        });
    }
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let (scores, labels) = score_fixture(20_000);
    c.bench_function("auprc_20k", |b| b.iter(|| black_box(auprc(&scores, &labels).unwrap())));
    let z: Vec<Vec<f64>> = scores.chunks(4).map(|c| c.iter().map(|s| 4.0 * s - 2.0).collect()).collect();
    let y: Vec<Vec<u8>> = labels.chunks(4).map(<[u8]>::to_vec).collect();
    let omega = vec![vec![1u8; 4]; y.len()];
    c.bench_function("weighted_bce_5k_x4", |b| {
        b.iter(|| black_box(weighted_bce_loss(&z, &y, &omega, &[3.0, 9.0, 30.0, 30.0]).unwrap()))
    });
}

criterion_group!(kernels, bench_tokenize, bench_encoder, bench_metrics);
criterion_main!(kernels);
