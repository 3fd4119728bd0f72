//! Criterion groups for the fast paths, wired up by the files in `benches/`.

use std::hint::black_box;

use criterion::{BenchmarkId, Criterion, Throughput};
use stvs_core::network::{init_weights, Network, NetworkConfig};
use stvs_core::reference::{naive_cyclic_conv3d, naive_shuffle, reorganize_windows};
use stvs_core::temporal::{cyclic_expand, cyclic_windows};
use stvs_core::{
    temporal_module_forward, temporal_shuffle, tm_conv3d_layer, Conv2dWeights, Conv3dWeights,
    FrameClip, PaddingPolicy, SeededRng, TemporalBlock, TemporalConfig, TemporalModuleWeights,
};

fn block(rng: &mut SeededRng, c: usize, hw: usize) -> TemporalBlock {
    TemporalBlock::from_stacked(rng.uniform_tensor(&[3, c, hw, hw], 1.0)).expect("dims")
}

fn conv3d_weights(rng: &mut SeededRng, c: usize) -> Conv3dWeights {
    let bound = (6.0 / (27 * c) as f64).sqrt();
    Conv3dWeights::new(
        rng.uniform_tensor(&[c, c, 3, 3, 3], bound),
        rng.uniform_tensor(&[c], 0.1),
    )
    .expect("dims")
}

pub fn padding(c: &mut Criterion) {
    let mut group = c.benchmark_group("cyclic_padding");
    let mut rng = SeededRng::new(1);
    for &(ch, hw) in &[(16, 32), (64, 64)] {
        let b = block(&mut rng, ch, hw);
        group.throughput(Throughput::Bytes((3 * ch * hw * hw * 4) as u64));
        let id = format!("{ch}x{hw}x{hw}");
        group.bench_with_input(BenchmarkId::new("repeat_slide", &id), &b, |bench, b| {
            bench.iter(|| {
                let e = cyclic_expand(b);
                black_box(cyclic_windows(&e)[2][2].len());
                e
            })
        });
        group.bench_with_input(BenchmarkId::new("reorganize", &id), &b, |bench, b| {
            bench.iter(|| reorganize_windows(b, PaddingPolicy::CyclicAll, 1))
        });
    }
    group.finish();
}

pub fn shuffle(c: &mut Criterion) {
    let mut group = c.benchmark_group("temporal_shuffle");
    let mut rng = SeededRng::new(2);
    for &(ch, hw) in &[(16, 32), (64, 64)] {
        let b = block(&mut rng, ch, hw);
        group.throughput(Throughput::Bytes((3 * ch * hw * hw * 4) as u64));
        let id = format!("{ch}x{hw}x{hw}");
        group.bench_with_input(BenchmarkId::new("shuffle", &id), &b, |bench, b| {
            bench.iter(|| temporal_shuffle(b))
        });
        group.bench_with_input(BenchmarkId::new("enumeration", &id), &b, |bench, b| {
            bench.iter(|| naive_shuffle(b))
        });
        group.bench_with_input(BenchmarkId::new("copy", &id), &b, |bench, b| {
            bench.iter(|| b.stacked().data().to_vec())
        });
    }
    group.finish();
}

pub fn conv3d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d_layer");
    group.sample_size(20);
    let mut rng = SeededRng::new(3);
    for &(ch, hw) in &[(8, 32), (32, 32)] {
        let b = block(&mut rng, ch, hw);
        let w = conv3d_weights(&mut rng, ch);
        let id = format!("{ch}x{hw}x{hw}");
        for policy in [PaddingPolicy::CyclicAll, PaddingPolicy::ZeroPad] {
            group.bench_function(BenchmarkId::new(format!("fast/{policy:?}"), &id), |bench| {
                bench.iter(|| tm_conv3d_layer(&b, &w, policy, 1).expect("conv"))
            });
        }
        group.bench_function(BenchmarkId::new("naive/CyclicAll", &id), |bench| {
            bench.iter(|| naive_cyclic_conv3d(&b, &w, PaddingPolicy::CyclicAll, 1).expect("conv"))
        });
    }
    group.finish();
}

pub fn temporal_module(c: &mut Criterion) {
    let mut group = c.benchmark_group("temporal_module");
    group.sample_size(20);
    let mut rng = SeededRng::new(4);
    let ch = 16;
    let b = block(&mut rng, ch, 32);
    for layers in [1, 3, 5] {
        let cfg = TemporalConfig {
            policy: PaddingPolicy::Eq6Literal,
            num_layers: layers,
            shuffle: true,
            residual_last: true,
        };
        let w = TemporalModuleWeights {
            conv3d: (0..layers).map(|_| conv3d_weights(&mut rng, ch)).collect(),
            res2d: (0..cfg.num_residuals())
                .map(|_| {
                    Conv2dWeights::same(
                        rng.uniform_tensor(&[ch, ch, 3, 3], 0.1),
                        rng.uniform_tensor(&[ch], 0.1),
                        1,
                    )
                    .expect("dims")
                })
                .collect(),
        };
        group.bench_function(BenchmarkId::new("layers", layers), |bench| {
            bench.iter(|| temporal_module_forward(&b, &w, &cfg).expect("forward"))
        });
    }
    group.finish();
}

pub fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("network_forward");
    group.sample_size(10);
    for size in [32, 64] {
        let cfg = NetworkConfig::toy(size);
        let store = init_weights(&cfg, 5).expect("init");
        let net = Network::from_store(&store, &cfg).expect("weights");
        let mut rng = SeededRng::new(6);
        let clip = FrameClip::from_frames(
            [(); 3].map(|_| rng.interval_tensor(&[3, size, size], 0.0, 1.0)),
        )
        .expect("clip");
        group.throughput(Throughput::Elements(1));
        group.bench_function(BenchmarkId::new("toy", size), |bench| {
            bench.iter(|| net.forward(&clip).expect("forward"))
        });
    }
    group.finish();
}
