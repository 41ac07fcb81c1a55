//! Synthetic inputs shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use superfeat_core::asmk::{aggregate_binarize, train_codebook, AsmkIndex, ImageSignatures};
use superfeat_core::graph::Mat;
use superfeat_core::{Codebook, LitConfig, LocalFeatureSet, TemplateBank};

/// Rows drawn uniformly from `[-1, 1]` and l2-normalized.
pub fn unit_rows(rows: usize, dim: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m: Mat = Array2::from_shape_simple_fn((rows, dim), || rng.gen_range(-1.0..1.0));
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

pub fn local_set(locations: usize, dim: usize, seed: u64) -> LocalFeatureSet {
    LocalFeatureSet {
        features: unit_rows(locations, dim, seed) * 4.0,
        width: locations,
        height: 1,
        scale: 1.0,
    }
}

pub fn template_bank(templates: usize, dim: usize, seed: u64) -> TemplateBank {
    TemplateBank::new(LitConfig {
        templates,
        dim,
        input_dim: dim,
        seed,
        ..Default::default()
    })
    .expect("valid bank")
}

pub fn codebook(k: usize, dim: usize, seed: u64) -> Codebook {
    train_codebook(&unit_rows(20 * k, dim, seed), k, seed, 5)
        .expect("codebook")
        .0
}

/// Index of `images` random images with `per_image` features each, plus
/// the signatures of every indexed image.
pub fn random_index(images: usize, per_image: usize, codebook: &Codebook) -> (AsmkIndex, Vec<ImageSignatures>) {
    let sigs: Vec<ImageSignatures> = (0..images)
        .map(|i| {
            let f = unit_rows(per_image, codebook.dim(), 1000 + i as u64);
            aggregate_binarize(&format!("img{i}"), &f, codebook).expect("features")
        })
        .collect();
    let index = AsmkIndex::build(
        codebook.clone(),
        sigs.iter().enumerate().map(|(i, s)| (format!("img{i}"), Ok(s.clone()))),
    )
    .expect("index");
    (index, sigs)
}
