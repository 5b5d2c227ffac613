use criterion::{black_box, criterion_group, criterion_main, Criterion};
use daedl::data::two_moons;
use daedl::dirichlet::{loss_grad_wrt_logits, LossConfig, OneHotLabel};
use daedl::linalg::Matrix;
use daedl::metrics::{aupr, auroc, ScoredBinarySet};
use daedl::network::{spectral_normalize, Activation, Architecture, DenseLayer, EvidentialNetwork};
use daedl::{GdaModel, Parameterization};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn loss_gradient(c: &mut Criterion) {
    let cfg = LossConfig::default();
    let z: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.5).collect();
    let y = OneHotLabel::new(3, 10).unwrap();
    c.bench_function("loss_grad_wrt_logits C=10", |b| {
        b.iter(|| loss_grad_wrt_logits(black_box(&z), &y, &cfg, 0.7).unwrap())
    });
}

fn forward(c: &mut Criterion) {
    let arch = Architecture {
        input_dim: 784,
        hidden: vec![128, 128, 128],
        num_classes: 10,
    };
    let net = EvidentialNetwork::new(&arch, Parameterization::Exp, true, 0).unwrap();
    let x: Vec<f64> = (0..784).map(|i| (i % 17) as f64 / 17.0).collect();
    c.bench_function("forward 784-128x3-10", |b| {
        b.iter(|| net.forward(black_box(&x)).unwrap())
    });
}

fn power_iteration(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = random_matrix(128, 128, &mut rng);
    let layer = DenseLayer::from_parts(w, vec![0.0; 128], Activation::Relu).unwrap();
    c.bench_function("spectral_normalize 128x128 one round", |b| {
        b.iter_batched(
            || layer.clone(),
            |mut l| spectral_normalize(&mut l, 1),
            criterion::BatchSize::SmallInput,
        )
    });
}

fn gda(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let feats = random_matrix(2000, 64, &mut rng);
    let labels: Vec<usize> = (0..2000).map(|i| i % 10).collect();
    let model = GdaModel::fit(&feats, &labels, 10).unwrap();
    let z = feats.row(0).to_vec();
    c.bench_function("gda fit N=2000 H=64 C=10", |b| {
        b.iter(|| GdaModel::fit(black_box(&feats), &labels, 10).unwrap())
    });
    c.bench_function("gda log_density H=64 C=10", |b| {
        b.iter(|| model.log_density(black_box(&z)).unwrap())
    });
}

fn ranking(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
    let labels: Vec<bool> = (0..10_000).map(|_| rng.gen_bool(0.5)).collect();
    let set = ScoredBinarySet::new(scores, labels).unwrap();
    c.bench_function("auroc N=10000", |b| b.iter(|| auroc(black_box(&set))));
    c.bench_function("aupr N=10000", |b| b.iter(|| aupr(black_box(&set))));
}

fn training_epoch(c: &mut Criterion) {
    let ds = two_moons(800, 0.1, 0).unwrap();
    let arch = Architecture {
        input_dim: 2,
        hidden: vec![64, 64],
        num_classes: 2,
    };
    let net = EvidentialNetwork::new(&arch, Parameterization::Exp, true, 0).unwrap();
    let cfg = daedl::TrainConfig {
        max_epochs: 1,
        patience: 1,
        ..Default::default()
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("one epoch two-moons 64x64 sn", |b| {
        b.iter(|| daedl::network::train(net.clone(), &ds, &ds, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    loss_gradient,
    forward,
    power_iteration,
    gda,
    ranking,
    training_epoch
);
criterion_main!(benches);
