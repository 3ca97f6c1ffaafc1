use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use dmll_bench::BatchFixture;
use dmll_core::metrics::{evaluate, ScoreMatrix};
use dmll_core::oracle::{enumerate_expected_loss, Benchmark, BenchmarkConfig};
use dmll_core::prompt::{
    build_similarity_index, select_optimal_prompt, PromptContext, PromptState, PromptTemplate,
    SyntheticProvider,
};
use dmll_core::risk::{expected_loss, DEFAULT_EPSILON};
use dmll_core::trainer::TrainConfig;
use dmll_core::{LabelVocabulary, Objective, RiskConfig, SoftLabels};

fn expected_loss_vs_enumeration(c: &mut Criterion) {
    let mut group = c.benchmark_group("expected_loss");
    for k in [4usize, 8, 12] {
        let f: Vec<f64> = (0..k).map(|j| (j as f64 + 0.5) / k as f64).collect();
        let d: Vec<f64> = f.iter().rev().copied().collect();
        let soft = SoftLabels::new(d.clone()).unwrap();
        group.bench_with_input(BenchmarkId::new("closed_form", k), &k, |b, _| {
            b.iter(|| expected_loss(black_box(&f), &soft, DEFAULT_EPSILON).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("enumeration", k), &k, |b, _| {
            b.iter(|| enumerate_expected_loss(black_box(&f), &d, DEFAULT_EPSILON).unwrap())
        });
    }
    group.finish();
}

fn loss_and_gradient(c: &mut Criterion) {
    let fixture = BatchFixture::new(128, 10, 16, 32);
    let batch = fixture.batch();
    let risk = RiskConfig::new(10).unwrap();
    c.bench_function("loss_and_gradient/128x10", |b| {
        b.iter(|| {
            fixture
                .params
                .loss_and_gradient(black_box(&batch), &risk)
                .unwrap()
        })
    });
}

fn metrics(c: &mut Criterion) {
    let fixture = BatchFixture::new(2000, 10, 16, 32);
    let full = &fixture.sample.full;
    let scores = fixture
        .params
        .score_all(full.instances().iter().map(|x| x.features.as_slice()))
        .unwrap();
    let matrix = ScoreMatrix::from_dataset(full, scores).unwrap();
    c.bench_function("evaluate/2000x10", |b| {
        b.iter(|| evaluate(black_box(&matrix)).unwrap())
    });
}

fn prompt_selection(c: &mut Criterion) {
    let fixture = BatchFixture::new(128, 10, 16, 32);
    let batch = fixture.batch();
    let provider = SyntheticProvider::new(32, 1).unwrap();
    let template = PromptTemplate::default();
    let targets = LabelVocabulary::numbered("class", 10);
    let vocabulary: Vec<String> = (0..200).map(|i| format!("word{i}")).collect();
    let index = build_similarity_index(&provider, &template, &targets, &vocabulary, 5).unwrap();
    let start = PromptState::initial(&provider, &template, &targets, &index).unwrap();
    let mut params = fixture.params.clone();
    params.set_prototypes(start.prototypes.clone()).unwrap();
    let context = PromptContext {
        provider: &provider,
        template: &template,
        targets: &targets,
        index: &index,
    };
    let objective = Objective::rc(RiskConfig::new(10).unwrap());
    c.bench_function("select_optimal_prompt/k10_sigma5", |b| {
        b.iter(|| {
            select_optimal_prompt(&params, black_box(&batch), &context, 5, &objective, &start)
                .unwrap()
        })
    });
}

fn training(c: &mut Criterion) {
    let bench = Benchmark::new(&BenchmarkConfig::new(1)).unwrap();
    let config = TrainConfig {
        epochs: 1,
        prompt_update_period: 1,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("benchmark_epoch", |b| {
        b.iter(|| bench.run(black_box(&config)).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    expected_loss_vs_enumeration,
    loss_and_gradient,
    metrics,
    prompt_selection,
    training
);
criterion_main!(benches);
