//! Hot-path benchmarks: network forward/backward, environment stepping,
//! segment distance series, and macro decoding.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use famarl_core::env::{ContinuousWorld, PrimitiveAction, WorldConfig};
use famarl_core::favae::{decode_z, pad_segment, FavaeModel, LadderConfig};
use famarl_core::nn::{backward, forward_cached, Block, NetworkSpec};
use famarl_core::segmentation::{
    distance_series, slice_windows, synthetic_regime_corpus, train_window_ae, MacroSegment,
    WindowConfig,
};
use famarl_core::Tensor;

fn bench_nn(c: &mut Criterion) {
    let spec = NetworkSpec::new(
        vec![10],
        vec![
            Block::Dense { input: 10, output: 64 },
            Block::Tanh,
            Block::Dense { input: 64, output: 64 },
            Block::Tanh,
            Block::Dense { input: 64, output: 12 },
        ],
        1,
    )
    .unwrap();
    let params = spec.init_params();
    let x = Tensor::from_vec((0..10).map(|i| (i as f64).sin()).collect());
    c.bench_function("mlp_forward_backward", |b| {
        b.iter(|| {
            let cache = forward_cached(&spec, &params, black_box(&x)).unwrap();
            let gout = Tensor::from_vec(vec![1.0; 12]);
            black_box(backward(&spec, &params, &cache, &gout).unwrap());
        })
    });
}

fn bench_env(c: &mut Criterion) {
    let mut env = ContinuousWorld::new(WorldConfig::maze(3)).unwrap();
    let mut state = env.reset();
    let action = PrimitiveAction::new(0.3, -0.8);
    c.bench_function("maze_env_step", |b| {
        b.iter(|| {
            let step = env.step(black_box(&state), &action).unwrap();
            if step.done {
                state = env.reset();
            } else {
                state = step.next_state;
            }
        })
    });
}

fn bench_segmentation(c: &mut Criterion) {
    let cfg = WindowConfig::default();
    let (corpus, _) = synthetic_regime_corpus(10, 4, 7);
    let windows: Vec<Vec<f64>> = corpus.iter().flat_map(|a| slice_windows(a, &cfg)).collect();
    let enc = train_window_ae(&windows, &cfg, 1).unwrap();
    c.bench_function("distance_series_600_windows", |b| {
        b.iter(|| black_box(distance_series(&enc, black_box(&windows)).unwrap()))
    });
}

fn bench_favae_decode(c: &mut Criterion) {
    let cfg = LadderConfig::for_input_len(19);
    let model = FavaeModel::new(cfg, 2).unwrap();
    let seg = MacroSegment {
        actions: vec![PrimitiveAction::new(0.2, -0.4); 8],
        episode: 0,
        start: 0,
        end: 8,
    };
    let padded = pad_segment(&seg, 19).unwrap();
    let z = model.encode_mean(&padded).unwrap().concat_z();
    c.bench_function("favae_decode_macro", |b| {
        b.iter(|| black_box(decode_z(&model, black_box(&z)).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_nn,
    bench_env,
    bench_segmentation,
    bench_favae_decode
);
criterion_main!(benches);
