use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ndarray::Array3;
use superfeat_bench::{codebook, local_set, random_index, template_bank, unit_rows};
use superfeat_core::asmk::{train_codebook, KernelParams};
use superfeat_core::encoder::DEFAULT_SCALES;
use superfeat_core::lit::{extract_superfeatures, lit_forward};
use superfeat_core::matching::{select_matches, MatchConstraints, RatioDirection, RatioTest};
use superfeat_core::{ConvEncoder, EncoderConfig, ImageTensor, LitConfig, Model, WhiteningTransform};

fn lit(c: &mut Criterion) {
    let mut group = c.benchmark_group("lit_forward");
    for &(locations, templates) in &[(64, 16), (256, 16), (256, 64)] {
        let bank = template_bank(templates, 128, 1);
        let u = local_set(locations, 128, 2);
        group.throughput(Throughput::Elements(locations as u64));
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("L{locations}_N{templates}")),
            &u,
            |b, u| b.iter(|| lit_forward(black_box(u), &bank).unwrap()),
        );
    }
    group.finish();
}

fn matching(c: &mut Criterion) {
    let bank = template_bank(32, 128, 3);
    let whiten = WhiteningTransform::identity(128);
    let a = extract_superfeatures(&local_set(128, 128, 4), &bank, &whiten).unwrap();
    let b = extract_superfeatures(&local_set(128, 128, 5), &bank, &whiten).unwrap();
    let ratio = RatioTest {
        tau: 0.9,
        direction: RatioDirection::StandardLowe,
    };
    c.bench_function("select_matches/N32", |bench| {
        bench.iter(|| {
            select_matches(
                black_box(&a),
                &b,
                ratio,
                MatchConstraints::ALL,
                ("a".into(), "b".into()),
            )
        })
    });
}

fn encoder(c: &mut Criterion) {
    let enc = ConvEncoder::new(EncoderConfig {
        hidden_channels: [16, 32, 64],
        output_dim: 256,
        seed: 0,
    });
    let mut group = c.benchmark_group("encoder");
    group.sample_size(20);
    for size in [48usize, 96] {
        let img = ImageTensor::new(
            "x",
            Array3::from_shape_fn((size, size, 3), |(y, x, k)| ((y * 7 + x * 3 + k) % 11) as f64 / 10.0),
        )
        .unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(size), &img, |b, img| {
            b.iter(|| enc.extract_local_features(black_box(img), 1.0).unwrap())
        });
    }
    group.finish();
}

fn extraction(c: &mut Criterion) {
    let model = Model::new(
        EncoderConfig {
            hidden_channels: [16, 32, 64],
            output_dim: 256,
            seed: 0,
        },
        LitConfig {
            templates: 16,
            dim: 256,
            input_dim: 256,
            ..Default::default()
        },
        128,
    )
    .unwrap();
    let img = ImageTensor::new(
        "x",
        Array3::from_shape_fn((48, 48, 3), |(y, x, k)| ((y + 2 * x + k) % 9) as f64 / 8.0),
    )
    .unwrap();
    let mut group = c.benchmark_group("multiscale_superfeatures");
    group.sample_size(10);
    group.bench_function("48px_7scales", |b| {
        b.iter(|| {
            model
                .multiscale_superfeatures(black_box(&img), &DEFAULT_SCALES)
                .unwrap()
        })
    });
    group.finish();
}

fn kmeans(c: &mut Criterion) {
    let x = unit_rows(4000, 128, 6);
    let mut group = c.benchmark_group("kmeans");
    group.sample_size(10);
    for k in [64usize, 256] {
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| {
            b.iter(|| train_codebook(black_box(&x), k, 7, 5).unwrap())
        });
    }
    group.finish();
}

fn search(c: &mut Criterion) {
    let book = codebook(256, 128, 8);
    let (index, sigs) = random_index(500, 100, &book);
    let params = KernelParams::default();
    let mut group = c.benchmark_group("asmk_search_500");
    group.bench_function("inverted_file", |b| {
        b.iter(|| index.search(black_box(&sigs[0]), params, Some(10)))
    });
    group.sample_size(10);
    group.bench_function("brute_force", |b| {
        b.iter(|| index.search_brute_force(black_box(&sigs[0]), params, Some(10)))
    });
    group.finish();
}

criterion_group!(benches, lit, matching, encoder, extraction, kmeans, search);
criterion_main!(benches);
