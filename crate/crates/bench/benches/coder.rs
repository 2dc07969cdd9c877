//! Range coder throughput: symbol encode/decode and CDF quantization.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::hint::black_box;

use rdvq_core::coder::{QuantizedCdf, RangeDecoder, RangeEncoder};

const PRECISION: u32 = 16;
const SYMBOLS: usize = 1024;

/// Skewed random categorical rows plus a matching symbol draw.
fn fixture(k: usize) -> (Vec<QuantizedCdf>, Vec<usize>) {
    let mut rng = ChaCha12Rng::seed_from_u64(k as u64);
    let mut cdfs = Vec::with_capacity(SYMBOLS);
    let mut symbols = Vec::with_capacity(SYMBOLS);
    for _ in 0..SYMBOLS {
        let mut probs: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(3) + 1e-4).collect();
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        cdfs.push(QuantizedCdf::from_probs(&probs, PRECISION).unwrap());
        symbols.push(rng.random_range(0..k));
    }
    (cdfs, symbols)
}

fn bench_encode(c: &mut Criterion) {
    let mut group = c.benchmark_group("range_encode");
    for k in [16usize, 64, 256] {
        let (cdfs, symbols) = fixture(k);
        group.throughput(Throughput::Elements(SYMBOLS as u64));
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| {
            b.iter(|| {
                let mut enc = RangeEncoder::new();
                for (s, cdf) in symbols.iter().zip(&cdfs) {
                    enc.encode(*s, cdf).unwrap();
                }
                black_box(enc.finish())
            });
        });
    }
    group.finish();
}

fn bench_decode(c: &mut Criterion) {
    let mut group = c.benchmark_group("range_decode");
    for k in [16usize, 64, 256] {
        let (cdfs, symbols) = fixture(k);
        let mut enc = RangeEncoder::new();
        for (s, cdf) in symbols.iter().zip(&cdfs) {
            enc.encode(*s, cdf).unwrap();
        }
        let bytes = enc.finish();
        group.throughput(Throughput::Elements(SYMBOLS as u64));
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| {
            b.iter(|| {
                let mut dec = RangeDecoder::new(&bytes);
                let mut out = Vec::with_capacity(SYMBOLS);
                for cdf in &cdfs {
                    out.push(dec.decode(cdf).unwrap());
                }
                black_box(out)
            });
        });
    }
    group.finish();
}

fn bench_quantize(c: &mut Criterion) {
    let mut group = c.benchmark_group("quantize_probs");
    for k in [64usize, 4096] {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut probs: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-6).collect();
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| {
            b.iter(|| black_box(QuantizedCdf::from_probs(&probs, PRECISION).unwrap()));
        });
    }
    group.finish();
}

criterion_group!(benches, bench_encode, bench_decode, bench_quantize);
criterion_main!(benches);
