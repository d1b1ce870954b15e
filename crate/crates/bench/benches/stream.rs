use candi_core::backbone::{Backbone, BackboneConfig};
use candi_core::fpm::{build_reference_sets, compute_threshold, fit_gaussian, CurationConfig, Curator};
use candi_core::metrics::{auroc, LabeledScores};
use candi_core::sana::{adapt_step, AdaptConfig, Sana, SanaConfig};
use candi_core::stats::chi2_inv_cdf;
use candi_core::Tensor;
use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 8;
const L: usize = 10;
const BATCH: usize = 256;

fn windows(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::new(
        vec![n, D, L],
        (0..n * D * L).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn backbone() -> Backbone {
    let mut b = Backbone::new(BackboneConfig::new(D, L), 0).unwrap();
    b.freeze();
    b
}

fn scoring(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = windows(&mut rng, BATCH);
    let bb = backbone();
    let sana = Sana::new(
        SanaConfig {
            gating_init: 0.1,
            ..SanaConfig::default()
        },
        D,
        L,
        0,
    )
    .unwrap();
    c.bench_function("backbone_reconstruct_256", |b| {
        b.iter(|| bb.reconstruct(black_box(&x)).unwrap())
    });
    c.bench_function("sana_score_batch_256", |b| {
        b.iter(|| sana.score_batch(black_box(&x), &bb).unwrap())
    });
}

fn adaptation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pool = windows(&mut rng, 16);
    let bb = backbone();
    let sana = Sana::new(SanaConfig::default(), D, L, 0).unwrap();
    let cfg = AdaptConfig::default();
    c.bench_function("adapt_step_pool16_h512", |b| {
        b.iter_batched(
            || sana.clone(),
            |mut s| adapt_step(&pool, &bb, &mut s, &cfg).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn curation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 64;
    let unit = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let val: Vec<Vec<f64>> = (0..1600).map(|_| unit(&mut rng)).collect();
    let scores: Vec<f64> = (0..1600).map(|_| rng.random_range(0.0..1.0)).collect();
    let threshold = compute_threshold(&scores, 0.01).unwrap();
    let sets = build_reference_sets(&val, &scores, &threshold).unwrap();
    let cfg = CurationConfig::default();
    let curator = Curator::new(threshold, &sets, fit_gaussian(&val, cfg.epsilon).unwrap(), &cfg).unwrap();
    let batch: Vec<Vec<f64>> = (0..BATCH).map(|_| unit(&mut rng)).collect();
    let batch_scores: Vec<f64> = (0..BATCH).map(|_| rng.random_range(0.0..1.0)).collect();
    c.bench_function("curate_256_against_1600_d64", |b| {
        b.iter(|| curator.curate(black_box(&batch_scores), &batch).unwrap())
    });
    c.bench_function("chi2_inv_cdf_d64", |b| {
        b.iter(|| chi2_inv_cdf(black_box(0.05), 64).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 8000;
    let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 40 == 0)).collect();
    let ls = LabeledScores::new(scores, labels).unwrap();
    c.bench_function("auroc_8000", |b| b.iter(|| auroc(black_box(&ls)).unwrap()));
}

criterion_group!(benches, scoring, adaptation, curation, metrics);
criterion_main!(benches);
