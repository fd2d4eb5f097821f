use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use conceptx::crop_index::{CropIndex, CropRecord, Exclusion, IndexManifest};
use conceptx::dataset::BBox;
use conceptx::harness::fixture::fixture_architecture;
use conceptx::model::network::Network;
use conceptx::model::{InputSize, LayerId, ModelHandle, Normalization};
use conceptx::nmf::{nmf_fit, NmfOptions};

fn uniform2(r: usize, c: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((r, c), || rng.gen::<f64>())
}

fn bench_nmf(c: &mut Criterion) {
    let mut g = c.benchmark_group("nmf_fit");
    for &p in &[1_000usize, 10_000] {
        let v = uniform2(p, 32, 1);
        let opts = NmfOptions { max_iter: 200, tol: 0.0 };
        g.bench_with_input(BenchmarkId::from_parameter(p), &v, |b, v| {
            b.iter(|| nmf_fit(black_box(v.view()), 4, 0, opts).unwrap())
        });
    }
    g.finish();
}

fn random_index(n: usize, c: usize) -> CropIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let records = (0..n)
        .map(|i| CropRecord {
            source_id: format!("s{:05}", i / 9),
            grid_row: (i % 9) / 3,
            grid_col: i % 3,
            bbox: BBox { x: 0, y: 0, width: 10, height: 10 },
            crop_pred: rng.gen_range(0..10),
            image_pred: rng.gen_range(0..10),
        })
        .collect();
    let manifest = IndexManifest {
        model_id: "bench".into(),
        model_fingerprint: String::new(),
        layer: LayerId { name: "l".into(), post_relu: true, receptive_crop: 10 },
        crop_side: 10,
        dataset_fingerprint: String::new(),
        count: n,
    };
    CropIndex::from_parts(manifest, records, uniform2(n, c, 3)).unwrap()
}

fn bench_topk(c: &mut Criterion) {
    let mut g = c.benchmark_group("topk_crops");
    let index = random_index(90_000, 512);
    let q = Array1::from_shape_fn(512, |i| (i as f64 * 0.1).sin().abs());
    for ex in [Exclusion::None, Exclusion::CropAndImageNotTarget] {
        g.bench_function(BenchmarkId::new("90k_x_512", ex), |b| {
            b.iter(|| index.topk_crops(black_box(q.view()), 8, ex, 3).unwrap())
        });
    }
    g.finish();
}

fn bench_forward(c: &mut Criterion) {
    let (arch, catalog) = fixture_architecture(10, 32);
    let net = Network::init(&arch, 4).unwrap();
    let model = ModelHandle::new(
        "bench",
        arch,
        net,
        InputSize::Fixed { height: 32, width: 32 },
        10,
        Normalization::default(),
        catalog,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Array4::from_shape_simple_fn((32, 3, 32, 32), || rng.gen_range(-2.0..2.0));
    let mut g = c.benchmark_group("forward");
    g.bench_function("full_32x32_batch32", |b| b.iter(|| model.forward_full(black_box(&x)).unwrap()));
    let acts = model.forward_to_layer("block2", &x).unwrap();
    g.bench_function("logit_gradient_block2", |b| {
        b.iter(|| model.logit_gradient("block2", black_box(&acts), 1).unwrap())
    });
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_nmf, bench_topk, bench_forward
}
criterion_main!(benches);
