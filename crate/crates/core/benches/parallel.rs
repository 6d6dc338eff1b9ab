//! Sequential vs rayon execution of the three batch loops: per-utterance
//! feature extraction, per-sentence scoring and per-session simulation.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2t_core::features::extract_batch;
use s2t_core::scorers::{bleu_with, chrf_with, wer_with, ChrfOptions};
use s2t_core::simul::{evaluate_corpus, SimulCase, SimulSource, WaitK};
use s2t_core::{synth_sine, BleuOptions, Exec, FbankConfig};

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn sentences(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(8..30);
            (0..len).map(|_| format!("w{}", rng.random_range(0..200))).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

fn fbank_batch(c: &mut Criterion) {
    let cfg = FbankConfig::default();
    let waves: Vec<_> = (0..32).map(|i| synth_sine(200.0 + 37.0 * i as f64, 2.0, 16000, 0.5).unwrap()).collect();
    let mut group = c.benchmark_group("fbank_batch");
    group.throughput(Throughput::Elements(waves.len() as u64));
    for (name, exec) in POLICIES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| extract_batch(black_box(&waves), &cfg, exec))
        });
    }
    group.finish();
}

fn corpus_scoring(c: &mut Criterion) {
    let refs = sentences(2000, 1);
    let hyps = sentences(2000, 2);
    let mut group = c.benchmark_group("corpus_scoring");
    group.throughput(Throughput::Elements(refs.len() as u64));
    for (name, exec) in POLICIES {
        group.bench_with_input(BenchmarkId::new("wer", name), &exec, |b, &exec| {
            b.iter(|| wer_with(black_box(&refs), &hyps, exec).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("bleu", name), &exec, |b, &exec| {
            b.iter(|| bleu_with(black_box(&refs), &hyps, BleuOptions::default(), exec).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("chrf", name), &exec, |b, &exec| {
            b.iter(|| chrf_with(black_box(&refs), &hyps, ChrfOptions::default(), exec).unwrap())
        });
    }
    group.finish();
}

fn simul_sessions(c: &mut Criterion) {
    let cases: Vec<SimulCase> = sentences(1000, 3)
        .into_iter()
        .enumerate()
        .map(|(i, s)| SimulCase { source: SimulSource::words(format!("s{i}"), &s), reference: s })
        .collect();
    let mut group = c.benchmark_group("simul_sessions");
    group.throughput(Throughput::Elements(cases.len() as u64));
    for (name, exec) in POLICIES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                evaluate_corpus(
                    black_box(&cases),
                    |_| Ok(Box::new(WaitK::echo(3))),
                    10_000,
                    BleuOptions::default(),
                    exec,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, fbank_batch, corpus_scoring, simul_sessions);
criterion_main!(benches);
