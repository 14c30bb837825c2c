use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use thermsentry_core::config::PipelineConfig;
use thermsentry_core::fuzzyhealth::{assess_health, RuleBase};
use thermsentry_core::grouping::vote_instant;
use thermsentry_core::pipeline::{run_detect, Resources};
use thermsentry_core::scorer::{score_stream, ScorerParams};
use thermsentry_core::simulator::{default_hotspot, simulate};

fn vote(c: &mut Criterion) {
    let values: Vec<Option<f64>> = (0..4).map(|i| Some(22.0 + 0.1 * i as f64)).collect();
    c.bench_function("vote_instant/4", |b| b.iter(|| vote_instant(black_box(&values), 0.5)));
}

fn scorer(c: &mut Criterion) {
    let n = 1440;
    let ts: Vec<i64> = (0..n as i64).map(|i| i * 60).collect();
    let series: Vec<Option<f64>> = (0..n).map(|i| Some(22.0 + (i as f64 * 0.05).sin())).collect();
    let params = ScorerParams::default();
    c.bench_function("score_stream/1440", |b| b.iter(|| score_stream("g", &ts, black_box(&series), &params).unwrap()));
}

fn health(c: &mut Criterion) {
    let names: Vec<String> = (0..39).map(|i| format!("g{i:02}")).collect();
    let rb = RuleBase::default_for(&names);
    let inputs: BTreeMap<String, f64> = names.iter().enumerate().map(|(i, n)| (n.clone(), i as f64 / 39.0)).collect();
    c.bench_function("assess_health/39", |b| b.iter(|| assess_health(&rb, black_box(&inputs)).unwrap()));
}

fn detect(c: &mut Criterion) {
    let (layout, scenario) = default_hotspot(1);
    let trace = simulate(&layout, &scenario).unwrap();
    let cfg = PipelineConfig::default();
    let res = Resources::default();
    let mut g = c.benchmark_group("run_detect");
    g.sample_size(10);
    g.bench_function("hotspot_default", |b| b.iter(|| run_detect(&cfg, black_box(&trace), &res).unwrap()));
    g.finish();
}

criterion_group!(benches, vote, scorer, health, detect);
criterion_main!(benches);
