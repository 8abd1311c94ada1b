use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use priorseg_core::blindspot::simulate_sharded;
use priorseg_core::losses::{consensus_loss_with_grad, prior_loss_with_grad, supervised_loss_with_grad};
use priorseg_core::trainer::initialize_weights;
use priorseg_core::{ArchConfig, BlindSpotModel, ClassPrior, ClassWeights, RsNet, Tensor};

fn desk_arch() -> ArchConfig {
    ArchConfig {
        input_size: 128,
        block_depths: vec![8, 16, 32, 64, 128],
        ..ArchConfig::default()
    }
}

fn forward(c: &mut Criterion) {
    let mut net = RsNet::<f32>::new(desk_arch()).unwrap();
    initialize_weights(&mut net, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::from_fn([4, 3, 128, 128], |_| rng.random_range(0.0..1.0));
    c.bench_function("forward_main 4x128x128", |b| b.iter(|| net.forward_main(black_box(&x)).unwrap()));
    let z = net.forward_main(&x).unwrap().1.z;
    c.bench_function("forward_aux 4x128x128", |b| b.iter(|| net.forward_aux(black_box(&z)).unwrap()));
}

fn losses(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shape = [4, 1, 128, 128];
    let pred = Tensor::<f32>::from_fn(shape, |_| rng.random_range(0.0..1.0));
    let aux = Tensor::<f32>::from_fn(shape, |_| rng.random_range(0.0..1.0));
    let reference = Tensor::<f32>::from_fn(shape, |_| f32::from(rng.random_bool(0.36)));
    let weights = ClassWeights::inverse_frequency(&[0.638, 0.362]);
    let prior = ClassPrior::new(vec![0.638, 0.362], vec![0.05, 0.05]).unwrap();
    c.bench_function("supervised_loss_with_grad", |b| {
        b.iter(|| supervised_loss_with_grad(black_box(&pred), &reference, &weights).unwrap())
    });
    c.bench_function("consensus_loss_with_grad", |b| b.iter(|| consensus_loss_with_grad(black_box(&pred), &aux).unwrap()));
    c.bench_function("prior_loss_with_grad", |b| b.iter(|| prior_loss_with_grad(black_box(&aux), &prior).unwrap()));
}

fn blindspot(c: &mut Criterion) {
    let model = BlindSpotModel::new(vec![0.362, 0.638], 0.2).unwrap();
    c.bench_function("blind spot simulation 1e5 trials", |b| {
        b.iter(|| simulate_sharded(black_box(&model), 100_000, 0, 16).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = forward, losses, blindspot
}
criterion_main!(benches);
