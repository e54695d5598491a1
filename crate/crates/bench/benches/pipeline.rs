use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use terraseg_core::clustering::kmeans;
use terraseg_core::eval::{evaluate, GroundTruthMap, Matching, Protocol};
use terraseg_core::features::{descriptors_for_frame, DescriptorMode, FeatureMap};
use terraseg_core::imageproc::{gaussian_blur, rgb_to_lab, slico_segment};
use terraseg_core::{KMeansParams, LabelMap, RgbImage};

fn xorshift(seed: u64) -> impl FnMut() -> u64 {
    let mut s = seed | 1;
    move || {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        s
    }
}

fn noise_image(side: u32) -> RgbImage {
    let mut next = xorshift(7);
    let pixels = (0..side * side * 3).map(|_| (next() >> 24) as u8).collect();
    RgbImage::new(side, side, pixels).unwrap()
}

fn slico(c: &mut Criterion) {
    let mut g = c.benchmark_group("slico");
    g.sample_size(10);
    for side in [256u32, 512] {
        let lab = gaussian_blur(&rgb_to_lab(&noise_image(side)), 0.7).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(side), &lab, |b, lab| {
            b.iter(|| slico_segment(black_box(lab), 30, 10).unwrap())
        });
    }
    g.finish();
}

fn clustering(c: &mut Criterion) {
    let mut next = xorshift(11);
    let points: Vec<Vec<f64>> = (0..5000)
        .map(|_| (0..64).map(|_| (next() >> 11) as f64 / (1u64 << 53) as f64).collect())
        .collect();
    let mut g = c.benchmark_group("kmeans");
    g.sample_size(10);
    for k in [12usize, 50] {
        g.bench_with_input(BenchmarkId::new("n5000_d64", k), &k, |b, &k| {
            b.iter(|| kmeans(black_box(&points), &KMeansParams::new(k, 0)).unwrap())
        });
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let (side, frames) = (256u32, 20);
    let mut next = xorshift(5);
    let pairs: Vec<(LabelMap, GroundTruthMap)> = (0..frames)
        .map(|_| {
            let n = (side * side) as usize;
            let pred = (0..n).map(|_| (next() % 50) as u16).collect();
            let gt = (0..n).map(|_| (next() % 8) as u32).collect();
            (LabelMap::new(side, side, pred).unwrap(), GroundTruthMap::new(side, side, gt).unwrap())
        })
        .collect();
    let refs: Vec<_> = pairs.iter().map(|(p, g)| (p, g)).collect();
    let mut g = c.benchmark_group("evaluate_20x256");
    for (name, protocol) in [("temporal", Protocol::Temporal), ("zeroshot", Protocol::Zeroshot)] {
        g.bench_function(name, |b| b.iter(|| evaluate(black_box(&refs), protocol, Matching::Majority).unwrap()));
    }
    g.bench_function("temporal_hungarian", |b| {
        b.iter(|| evaluate(black_box(&refs), Protocol::Temporal, Matching::Hungarian).unwrap())
    });
    g.finish();
}

fn pooling(c: &mut Criterion) {
    let lab = gaussian_blur(&rgb_to_lab(&noise_image(512)), 0.7).unwrap();
    let mask = slico_segment(&lab, 30, 10).unwrap();
    let mut next = xorshift(3);
    let (grid, dim) = (37, 768);
    let tokens = (0..grid * grid * dim).map(|_| (next() >> 40) as f32 / (1 << 24) as f32).collect();
    let map = FeatureMap::new(grid, grid, dim, tokens, Some(vec![0.1; dim]), vec![0.2; 4 * dim]).unwrap();
    let mut g = c.benchmark_group("pool_512_vitb");
    g.bench_function("pooled_only", |b| {
        b.iter(|| descriptors_for_frame(black_box(&map), &mask, DescriptorMode::PooledOnly, 0).unwrap())
    });
    g.bench_function("register_cls", |b| {
        b.iter(|| descriptors_for_frame(black_box(&map), &mask, DescriptorMode::register_cls_default(), 0).unwrap())
    });
    g.finish();
}

criterion_group!(benches, slico, clustering, metrics, pooling);
criterion_main!(benches);
