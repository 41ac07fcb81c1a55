//! Stages of a full run driven by one [`RunConfig`], plus the diagnostic
//! and ablation measurements built on top of them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asmk::{select_top_features, Codebook, KmeansReport};
use crate::config::RunConfig;
use crate::dataset::{generate_synthetic_dataset, Corpus};
use crate::encoder::ImageTensor;
use crate::error::{Error, Result};
use crate::eval::{attention_correlation, mean_off_diagonal, per_scale_stats, redundancy_curve, PerScaleStats};
use crate::graph::Mat;
use crate::loss::{LossConfig, LossToggles};
use crate::matching::MatchConstraints;
use crate::model::Model;
use crate::retrieval::{evaluate_retrieval, fit_codebook, AsmkConfig, RetrievalRun};
use crate::trainer::{
    self, initialize_model, mine_hard_negatives, pool_descriptors, sample_tuples, EpochMetrics, MatchTally,
    TrainReport, TrainingTuple,
};

/// Train and eval corpora of the configured synthetic benchmark.
pub fn generate_corpora(cfg: &RunConfig) -> Result<(Corpus, Corpus)> {
    let train = generate_synthetic_dataset(&cfg.data.train)?.corpus();
    let eval = generate_synthetic_dataset(&cfg.data.eval)?.corpus();
    Ok((train, eval))
}

/// Fresh model with whiteners fit on `train`.
pub fn initialize(cfg: &RunConfig, train: &Corpus) -> Result<Model> {
    initialize_model(
        cfg.encoder.clone(),
        cfg.lit.clone(),
        cfg.whitening.dim,
        train,
        &cfg.train,
    )
}

pub fn train_model(
    cfg: &RunConfig,
    model: &mut Model,
    train: &Corpus,
    on_epoch: &mut dyn FnMut(&EpochMetrics, &Model) -> Result<()>,
) -> Result<TrainReport> {
    trainer::train(model, train, &cfg.setup(), None, on_epoch)
}

/// Codebook fit on the selected features of `train`.
pub fn fit_run_codebook(cfg: &RunConfig, model: &Model, train: &Corpus) -> Result<(Codebook, KmeansReport)> {
    fit_codebook(model, &train.images, &cfg.asmk, cfg.codebook_seed())
}

pub fn evaluate(cfg: &RunConfig, model: &Model, eval: &Corpus, codebook: Codebook) -> Result<RetrievalRun> {
    evaluate_retrieval(model, &eval.images, &eval.labels, codebook, &cfg.asmk)
}

/// Mean off-diagonal attention correlation over `images` at one scale.
pub fn mean_attention_correlation(model: &Model, images: &[ImageTensor], scale: f64) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("no images"));
    }
    let mut sum = 0.0;
    for im in images {
        let set = model.superfeatures(im, scale)?;
        sum += mean_off_diagonal(&attention_correlation(&set.attention)?);
    }
    Ok(sum / images.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedundancyCurves {
    pub ks: Vec<usize>,
    pub superfeatures: Vec<f64>,
    /// Encoder output, l2-normalized, without whitening.
    pub local: Vec<f64>,
}

fn l2_rows(mut m: Mat) -> Mat {
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt().max(1e-12);
        r /= n;
    }
    m
}

/// Redundancy curves of super-features and raw local features, averaged
/// over `images`.
pub fn redundancy(model: &Model, images: &[ImageTensor], scale: f64, ks: &[usize]) -> Result<RedundancyCurves> {
    if images.is_empty() {
        return Err(Error::invalid("no images"));
    }
    let mut sf = vec![0.0; ks.len()];
    let mut local = vec![0.0; ks.len()];
    for im in images {
        let u = model.local_features(im, scale)?;
        let set = model.superfeatures(im, scale)?;
        let a = redundancy_curve(&set.features, ks)?;
        let b = redundancy_curve(&l2_rows(u.features), ks)?;
        for i in 0..ks.len() {
            sf[i] += a[i];
            local[i] += b[i];
        }
    }
    let n = images.len() as f64;
    Ok(RedundancyCurves {
        ks: ks.to_vec(),
        superfeatures: sf.into_iter().map(|v| v / n).collect(),
        local: local.into_iter().map(|v| v / n).collect(),
    })
}

/// Selection statistics per scale, pooled over `images`.
pub fn per_scale(model: &Model, images: &[ImageTensor], asmk: &AsmkConfig) -> Result<PerScaleStats> {
    let mut candidates = vec![0usize; asmk.scales.len()];
    let mut selected = Vec::new();
    for im in images {
        let sets = model.multiscale_superfeatures(im, &asmk.scales)?;
        for s in &sets {
            if let Some(i) = asmk.scales.iter().position(|&x| x == s.scale) {
                candidates[i] += (0..s.len()).filter(|&k| s.is_usable(k)).count();
            }
        }
        selected.extend(select_top_features(&sets, asmk.budget));
    }
    per_scale_stats(&selected, &asmk.scales, &candidates)
}

/// Tuples with negatives mined by the current model, for measurement.
pub fn measurement_tuples(
    model: &Model,
    corpus: &Corpus,
    count: usize,
    negatives: usize,
    scale: f64,
    seed: u64,
) -> Result<Vec<TrainingTuple>> {
    let pool = pool_descriptors(model, &corpus.images, scale)?;
    let all: Vec<usize> = (0..corpus.len()).collect();
    let mined = mine_hard_negatives(&pool, &corpus.labels, &all, negatives)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_tuples(&corpus.labels, &mined, count, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRow {
    pub constraints: MatchConstraints,
    pub tally: MatchTally,
}

/// Match tallies for all eight constraint combinations on fixed tuples.
pub fn constraint_sweep(
    model: &Model,
    corpus: &Corpus,
    tuples: &[TrainingTuple],
    scale: f64,
    loss: &LossConfig,
) -> Result<Vec<ConstraintRow>> {
    MatchConstraints::grid()
        .into_iter()
        .map(|c| {
            let tally = trainer::measure_matches(model, &corpus.images, tuples, scale, loss, c)?;
            Ok(ConstraintRow { constraints: c, tally })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub budget: usize,
    pub map: f64,
    pub mean_clusters: f64,
    pub max_clusters: u32,
}

/// mAP and memory per selection budget with one fixed codebook.
pub fn budget_sweep(
    cfg: &RunConfig,
    model: &Model,
    eval: &Corpus,
    codebook: &Codebook,
    budgets: &[usize],
) -> Result<Vec<BudgetRow>> {
    budgets
        .iter()
        .map(|&budget| {
            let asmk = AsmkConfig {
                budget,
                ..cfg.asmk.clone()
            };
            let run = evaluate_retrieval(model, &eval.images, &eval.labels, codebook.clone(), &asmk)?;
            Ok(BudgetRow {
                budget,
                map: run.map,
                mean_clusters: run.footprint.mean,
                max_clusters: run.footprint.per_image.iter().copied().max().unwrap_or(0),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCell {
    pub label: String,
    pub map: f64,
    pub attention_correlation: f64,
}

/// Config of one loss-ablation cell: `base` with only the toggles changed.
pub fn with_toggles(base: &RunConfig, toggles: LossToggles) -> RunConfig {
    RunConfig {
        toggles,
        ..base.clone()
    }
}

/// Trains from scratch, fits a codebook and evaluates.
pub fn train_and_evaluate(cfg: &RunConfig, train: &Corpus, eval: &Corpus) -> Result<(Model, RetrievalRun)> {
    let mut model = initialize(cfg, train)?;
    train_model(cfg, &mut model, train, &mut |_, _| Ok(()))?;
    let (book, _) = fit_run_codebook(cfg, &model, train)?;
    let run = evaluate(cfg, &model, eval, book)?;
    Ok((model, run))
}
