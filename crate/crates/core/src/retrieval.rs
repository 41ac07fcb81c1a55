//! Image-level retrieval pipeline: multi-scale super-features, selection,
//! codebook fitting, indexing and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asmk::{
    aggregate_binarize, memory_footprint, select_top_features, stack_features, train_codebook, AsmkIndex, Codebook,
    Footprint, ImageSignatures, KernelParams, KmeansReport, SelectedFeature,
};
use crate::encoder::{ImageTensor, DEFAULT_SCALES};
use crate::error::{Error, Result};
use crate::eval::{mean_average_precision, RetrievalGroundTruth};
use crate::lit::SuperFeatureSet;
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsmkConfig {
    pub codebook_size: usize,
    /// Features kept per image.
    pub budget: usize,
    pub kmeans_iterations: usize,
    /// Cap on the k-means sample, drawn at random when exceeded.
    pub codebook_samples: usize,
    pub scales: Vec<f64>,
    pub alpha: f64,
    pub tau: f64,
}

impl Default for AsmkConfig {
    fn default() -> Self {
        Self {
            codebook_size: 1024,
            budget: 100,
            kmeans_iterations: 25,
            codebook_samples: 20_000,
            scales: DEFAULT_SCALES.to_vec(),
            alpha: 3.0,
            tau: 0.0,
        }
    }
}

impl AsmkConfig {
    pub fn kernel(&self) -> KernelParams {
        KernelParams {
            alpha: self.alpha,
            tau: self.tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::config("asmk.codebook_size", "must be >= 2"));
        }
        if self.budget == 0 {
            return Err(Error::config("asmk.budget", "must be >= 1"));
        }
        if self.kmeans_iterations == 0 {
            return Err(Error::config("asmk.kmeans_iterations", "must be >= 1"));
        }
        if self.codebook_samples < self.codebook_size {
            return Err(Error::config("asmk.codebook_samples", "must be >= asmk.codebook_size"));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0 && *s <= 4.0)) {
            return Err(Error::config("asmk.scales", "must be non-empty, each in (0, 4]"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("asmk.alpha", "must be finite and > 0"));
        }
        if !(-1.0..1.0).contains(&self.tau) {
            return Err(Error::config("asmk.tau", "must lie in [-1, 1)"));
        }
        Ok(())
    }
}

/// Per-image extraction output kept for diagnostics.
#[derive(Clone, Debug)]
pub struct ImageFeatures {
    pub sets: Vec<SuperFeatureSet>,
    pub selected: Vec<SelectedFeature>,
}

pub fn extract_image_features(
    model: &Model,
    image: &ImageTensor,
    scales: &[f64],
    budget: usize,
) -> Result<ImageFeatures> {
    let sets = model.multiscale_superfeatures(image, scales)?;
    let selected = select_top_features(&sets, budget);
    if selected.is_empty() {
        return Err(Error::NoFeatures(image.id.clone()));
    }
    Ok(ImageFeatures { sets, selected })
}

/// k-means over the selected features of `images`.
pub fn fit_codebook(
    model: &Model,
    images: &[ImageTensor],
    cfg: &AsmkConfig,
    seed: u64,
) -> Result<(Codebook, KmeansReport)> {
    let mut selected = Vec::new();
    for im in images {
        selected.extend(extract_image_features(model, im, &cfg.scales, cfg.budget)?.selected);
    }
    if selected.len() > cfg.codebook_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        selected.shuffle(&mut rng);
        selected.truncate(cfg.codebook_samples);
    }
    train_codebook(
        &stack_features(&selected),
        cfg.codebook_size,
        seed,
        cfg.kmeans_iterations,
    )
}

pub fn image_signatures(
    model: &Model,
    image: &ImageTensor,
    codebook: &Codebook,
    cfg: &AsmkConfig,
) -> Result<ImageSignatures> {
    let f = extract_image_features(model, image, &cfg.scales, cfg.budget)?;
    aggregate_binarize(&image.id, &stack_features(&f.selected), codebook)
}

pub fn build_index(model: &Model, images: &[ImageTensor], codebook: Codebook, cfg: &AsmkConfig) -> Result<AsmkIndex> {
    let entries: Vec<_> = images
        .iter()
        .map(|im| (im.id.clone(), image_signatures(model, im, &codebook, cfg)))
        .collect();
    AsmkIndex::build(codebook, entries)
}

#[derive(Clone, Debug)]
pub struct RetrievalRun {
    pub map: f64,
    pub index: AsmkIndex,
    pub footprint: Footprint,
    pub rankings: Vec<Vec<String>>,
}

/// Indexes `images` and queries each of them against the rest, with class
/// labels as relevance.
pub fn evaluate_retrieval(
    model: &Model,
    images: &[ImageTensor],
    labels: &[usize],
    codebook: Codebook,
    cfg: &AsmkConfig,
) -> Result<RetrievalRun> {
    let sigs: Vec<ImageSignatures> = images
        .iter()
        .map(|im| image_signatures(model, im, &codebook, cfg))
        .collect::<Result<_>>()?;
    let index = AsmkIndex::build(
        codebook,
        images.iter().zip(&sigs).map(|(im, s)| (im.id.clone(), Ok(s.clone()))),
    )?;
    let kernel = cfg.kernel();
    let rankings: Vec<Vec<String>> = sigs
        .iter()
        .map(|q| index.search(q, kernel, None).into_iter().map(|h| h.id).collect())
        .collect();
    let ids: Vec<String> = images.iter().map(|i| i.id.clone()).collect();
    let gt = RetrievalGroundTruth::from_labels(&ids, labels);
    let map = mean_average_precision(&rankings, &gt)?;
    Ok(RetrievalRun {
        map,
        footprint: memory_footprint(&index),
        index,
        rankings,
    })
}
