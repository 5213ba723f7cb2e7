use std::collections::{BTreeSet, HashSet};
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use rap_bench::{random_embedding, random_store, rng};
use rap_core::eval::{caption_metrics, CaptionSample};
use rap_core::{knn, Delimiters, NewConcept, DEFAULT_DIM};

fn bench_knn(c: &mut Criterion) {
    let mut group = c.benchmark_group("knn");
    for n in [1_000, 10_000, 100_000] {
        let snap = random_store(n, DEFAULT_DIM, 1).snapshot();
        let query = random_embedding(&mut rng(2), DEFAULT_DIM);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| knn(&snap, black_box(&query), 5).unwrap())
        });
    }
    group.finish();
}

fn bench_add(c: &mut Criterion) {
    let mut group = c.benchmark_group("add_concept");
    for n in [1_000, 10_000] {
        let base = random_store(n, DEFAULT_DIM, 3);
        let embedding = random_embedding(&mut rng(4), DEFAULT_DIM);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter_batched(
                || base.clone(),
                |mut store| {
                    store
                        .add_concept(NewConcept {
                            name: "⟨new⟩".into(),
                            category: "object".into(),
                            description: String::new(),
                            image_ref: "new.png".into(),
                            embedding: embedding.clone(),
                        })
                        .unwrap();
                    store
                },
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn bench_caption_metrics(c: &mut Criterion) {
    let known: HashSet<String> = (0..50).map(|i| format!("⟨c{i}⟩")).collect();
    let samples: Vec<CaptionSample> = (0..1_000)
        .map(|i| CaptionSample {
            generated_caption: format!(
                "⟨c{}⟩ sits next to ⟨c{}⟩ near ⟨x{}⟩ on a sunny day",
                i % 50,
                (i * 7) % 50,
                i % 3
            ),
            ground_truth_concepts: BTreeSet::from([format!("⟨c{}⟩", i % 50), format!("⟨c{}⟩", (i + 1) % 50)]),
        })
        .collect();
    let delims = Delimiters::default();
    c.bench_function("caption_metrics/1000", |b| {
        b.iter(|| caption_metrics(black_box(&samples), &known, &delims).unwrap())
    });
}

criterion_group!(benches, bench_knn, bench_add, bench_caption_metrics);
criterion_main!(benches);
