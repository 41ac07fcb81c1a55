//! Tuple construction, hard-negative mining and the epoch loop.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Corpus;
use crate::encoder::{EncoderConfig, ImageTensor};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat};
use crate::lit::LitConfig;
use crate::loss::{combine, LossBreakdown, LossConfig, LossToggles};
use crate::matching::{select_matches, MatchConstraints};
use crate::model::Model;
use crate::objective::tuple_objective;
use crate::params::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub tuples_per_batch: usize,
    /// Hard negatives per tuple.
    pub negatives: usize,
    pub learning_rate: f64,
    /// Per-epoch learning-rate multiplier.
    pub lr_decay: f64,
    pub weight_decay: f64,
    /// Random horizontal flip of whole tuples.
    pub flip: bool,
    /// Training resolution.
    pub scale: f64,
    /// Scales visited by the whitening initialization pass.
    pub whitening_scales: Vec<f64>,
    /// Validate every this many epochs (0 disables), and after the last.
    pub validate_every: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batches_per_epoch: 50,
            tuples_per_batch: 5,
            negatives: 5,
            learning_rate: 1e-3,
            lr_decay: 0.99,
            weight_decay: 1e-4,
            flip: true,
            scale: 1.0,
            whitening_scales: vec![1.0, 1.414, 0.707],
            validate_every: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tuples_per_batch == 0 {
            return Err(Error::config("train.tuples_per_batch", "must be >= 1"));
        }
        if self.batches_per_epoch == 0 {
            return Err(Error::config("train.batches_per_epoch", "must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and >= 0"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("train.lr_decay", "must lie in (0, 1]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        if !(self.scale > 0.0 && self.scale <= 4.0) {
            return Err(Error::config("train.scale", "must lie in (0, 4]"));
        }
        if self.whitening_scales.is_empty() || self.whitening_scales.iter().any(|s| !(*s > 0.0 && *s <= 4.0)) {
            return Err(Error::config(
                "train.whitening_scales",
                "must be non-empty, each in (0, 4]",
            ));
        }
        Ok(())
    }
}

/// Loss and matching settings that shape one training run.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub toggles: LossToggles,
    pub constraints: MatchConstraints,
}

/// Indices into the training set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingTuple {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

impl TrainingTuple {
    pub fn indices(&self) -> Vec<usize> {
        let mut v = vec![self.anchor, self.positive];
        v.extend(&self.negatives);
        v
    }
}

fn sq_dist(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// For each anchor, the `n` pool entries nearest in descriptor space whose
/// label differs; lower index wins distance ties.
pub fn mine_hard_negatives(
    descriptors: &[Array1<f64>],
    labels: &[usize],
    anchors: &[usize],
    n: usize,
) -> Result<Vec<Vec<usize>>> {
    if descriptors.len() != labels.len() {
        return Err(Error::invalid("one label per pool descriptor"));
    }
    anchors
        .iter()
        .map(|&a| {
            let mut candidates: Vec<(f64, usize)> = (0..descriptors.len())
                .filter(|&j| labels[j] != labels[a])
                .map(|j| (sq_dist(&descriptors[a], &descriptors[j]), j))
                .collect();
            if candidates.len() < n {
                return Err(Error::PoolTooSmall {
                    available: candidates.len(),
                    required: n,
                });
            }
            candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            Ok(candidates[..n].iter().map(|c| c.1).collect())
        })
        .collect()
}

pub fn pool_descriptors(model: &Model, images: &[ImageTensor], scale: f64) -> Result<Vec<Array1<f64>>> {
    images.iter().map(|im| model.global_descriptor(im, scale)).collect()
}

/// Draws `count` tuples: uniform anchors, a random class-mate as positive
/// and the anchor's mined negatives.
pub fn sample_tuples(
    labels: &[usize],
    negatives: &[Vec<usize>],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainingTuple>> {
    let mut by_label: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    if by_label.values().any(|m| m.len() < 2) {
        return Err(Error::invalid("every class needs at least two images"));
    }
    (0..count)
        .map(|_| {
            let anchor = rng.gen_range(0..labels.len());
            let mates: Vec<usize> = by_label[&labels[anchor]]
                .iter()
                .copied()
                .filter(|&i| i != anchor)
                .collect();
            let positive = *mates.choose(rng).expect("class has two members");
            Ok(TrainingTuple {
                anchor,
                positive,
                negatives: negatives[anchor].clone(),
            })
        })
        .collect()
}

/// Fraction of matches coming from the positive; absent without matches.
pub fn match_ratio(positive: usize, negative: usize) -> Option<f64> {
    let all = positive + negative;
    (all > 0).then(|| positive as f64 / all as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdCoverage {
    /// Per ID, percentage of tuples in which it was matched.
    pub percent: Vec<f64>,
    pub min: f64,
    pub mean: f64,
    pub std: f64,
    pub unmatched: Vec<usize>,
}

pub fn per_id_match_histogram(counts: &[usize], tuples: usize) -> IdCoverage {
    let percent: Vec<f64> = counts
        .iter()
        .map(|&c| {
            if tuples == 0 {
                0.0
            } else {
                100.0 * c as f64 / tuples as f64
            }
        })
        .collect();
    let n = percent.len().max(1) as f64;
    let mean = percent.iter().sum::<f64>() / n;
    let var = percent.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
    IdCoverage {
        min: if percent.is_empty() {
            0.0
        } else {
            percent.iter().copied().fold(f64::INFINITY, f64::min)
        },
        mean,
        std: var.sqrt(),
        unmatched: (0..counts.len()).filter(|&i| counts[i] == 0).collect(),
        percent,
    }
}

/// Match counts over a set of tuples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchTally {
    pub tuples: usize,
    pub positive: usize,
    pub negative: usize,
    /// Per ID, tuples in which the anchor-positive matches contain it.
    pub per_id: Vec<usize>,
}

impl MatchTally {
    fn new(ids: usize) -> Self {
        Self {
            per_id: vec![0; ids],
            ..Default::default()
        }
    }

    fn record(&mut self, positive: &crate::matching::MatchSet, negatives: &[crate::matching::MatchSet]) {
        self.tuples += 1;
        self.positive += positive.len();
        self.negative += negatives.iter().map(|m| m.len()).sum::<usize>();
        for p in &positive.pairs {
            self.per_id[p.id] += 1;
        }
    }

    pub fn ratio(&self) -> Option<f64> {
        match_ratio(self.positive, self.negative)
    }
}

/// Matches of each tuple's anchor against its positive and negatives on a
/// fixed model; measurement only.
pub fn measure_matches(
    model: &Model,
    images: &[ImageTensor],
    tuples: &[TrainingTuple],
    scale: f64,
    loss: &LossConfig,
    constraints: MatchConstraints,
) -> Result<MatchTally> {
    let mut cache = std::collections::HashMap::new();
    let mut tally = MatchTally::new(model.bank.config.templates);
    for t in tuples {
        for i in t.indices() {
            if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(i) {
                e.insert(model.superfeatures(&images[i], scale)?);
            }
        }
        let src = |i: usize| (images[t.anchor].id.clone(), images[i].id.clone());
        let ratio = loss.ratio_test();
        let pos = select_matches(
            &cache[&t.anchor],
            &cache[&t.positive],
            ratio,
            constraints,
            src(t.positive),
        );
        let negs: Vec<_> = t
            .negatives
            .iter()
            .map(|&n| select_matches(&cache[&t.anchor], &cache[&n], ratio, constraints, src(n)))
            .collect();
        tally.record(&pos, &negs);
    }
    Ok(tally)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    pub tuples: usize,
    /// Mean per tuple; `total` recombines the components.
    pub loss: LossBreakdown,
    pub positive_matches: usize,
    pub negative_matches: usize,
    pub match_ratio: Option<f64>,
    pub id_match_counts: Vec<usize>,
    pub id_coverage: Option<IdCoverage>,
    pub validation_map: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    /// Model at the best validation score, or the final one without
    /// validation.
    pub best_model: Model,
}

/// Builds a fresh model and fits its whiteners on the training images.
pub fn initialize_model(
    encoder: EncoderConfig,
    lit: LitConfig,
    whiten_dim: usize,
    data: &Corpus,
    train: &TrainConfig,
) -> Result<Model> {
    let mut model = Model::new(encoder, lit, whiten_dim)?;
    model.initialize_whitening(&data.images, &train.whitening_scales, whiten_dim, 10 * whiten_dim)?;
    Ok(model)
}

pub type Validator<'a> = &'a dyn Fn(&Model) -> Result<f64>;

/// Runs the epoch loop, updating `model` in place. `on_epoch` sees every
/// epoch's metrics with the model after that epoch; a diverging run stops
/// with `DivergenceDetected` and leaves `model` at its last good state.
pub fn train(
    model: &mut Model,
    data: &Corpus,
    setup: &TrainSetup,
    validator: Option<Validator>,
    on_epoch: &mut dyn FnMut(&EpochMetrics, &Model) -> Result<()>,
) -> Result<TrainReport> {
    let cfg = &setup.train;
    cfg.validate()?;
    setup.loss.validate()?;
    let toggles = setup.toggles;
    let with_lit = toggles.use_super || toggles.use_attn;
    let images = &data.images;
    let flipped: Vec<ImageTensor> = images.iter().map(|i| i.flipped_horizontally()).collect();
    let labels = &data.labels;
    let all: Vec<usize> = (0..images.len()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut enc_opt = Adam::new(adam_cfg, &model.encoder.store);
    let mut bank_opt = Adam::new(adam_cfg, &model.bank.store);

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32);
        enc_opt.config.learning_rate = lr;
        bank_opt.config.learning_rate = lr;

        let pool = pool_descriptors(model, images, cfg.scale)?;
        let mined = mine_hard_negatives(&pool, labels, &all, cfg.negatives)?;
        let tuples = sample_tuples(labels, &mined, cfg.batches_per_epoch * cfg.tuples_per_batch, &mut rng)?;

        let mut sums = LossBreakdown::default();
        let mut tally = MatchTally::new(model.bank.config.templates);
        for (batch, chunk) in tuples.chunks(cfg.tuples_per_batch).enumerate() {
            let mut enc_grads = model.encoder.store.zero_grads();
            let mut bank_grads = model.bank.store.zero_grads();
            for t in chunk {
                let source = if cfg.flip && rng.gen_bool(0.5) {
                    &flipped
                } else {
                    images
                };
                let idx = t.indices();
                let mut g = Graph::new();
                let binding = model.bind(&mut g, true);
                let nodes = idx
                    .iter()
                    .map(|&i| model.image_nodes(&mut g, &binding, &source[i], cfg.scale, with_lit, toggles.use_global))
                    .collect::<Result<Vec<_>>>()?;
                let ids: Vec<String> = idx.iter().map(|&i| images[i].id.clone()).collect();
                let obj = tuple_objective(&mut g, &nodes, &ids, &setup.loss, toggles, setup.constraints, None)?;
                if !obj.parts.total.is_finite() {
                    return Err(Error::DivergenceDetected { epoch, batch });
                }
                let grads = g.backward(obj.total);
                model.encoder.store.accumulate(&binding.encoder, &grads, &mut enc_grads);
                model.bank.store.accumulate(&binding.bank, &grads, &mut bank_grads);
                sums.add(&obj.parts);
                if with_lit {
                    tally.record(&obj.matches, &obj.negative_matches);
                }
            }
            if enc_grads
                .iter()
                .chain(&bank_grads)
                .any(|m: &Mat| m.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::DivergenceDetected { epoch, batch });
            }
            enc_opt.step(&mut model.encoder.store, &enc_grads);
            if with_lit {
                bank_opt.step(&mut model.bank.store, &bank_grads);
            }
        }

        let n = tuples.len() as f64;
        let mut loss = sums.scaled(1.0 / n);
        loss.total = combine(&loss, &setup.loss, toggles);
        let last = epoch + 1 == cfg.epochs;
        let validation_map = match validator {
            Some(v) if last || (cfg.validate_every > 0 && (epoch + 1) % cfg.validate_every == 0) => Some(v(model)?),
            _ => None,
        };
        let m = EpochMetrics {
            epoch,
            learning_rate: lr,
            tuples: tuples.len(),
            loss,
            positive_matches: tally.positive,
            negative_matches: tally.negative,
            match_ratio: tally.ratio(),
            id_coverage: with_lit.then(|| per_id_match_histogram(&tally.per_id, tally.tuples)),
            id_match_counts: tally.per_id,
            validation_map,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} (global {:.4} super {:.4} attn {:.4}) ratio {:?}",
            m.loss.total,
            m.loss.global,
            m.loss.super_,
            m.loss.attn,
            m.match_ratio
        );
        if let Some(score) = validation_map {
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, epoch, model.clone()));
            }
        }
        on_epoch(&m, model)?;
        metrics.push(m);
    }
    let (best_epoch, best_model) = match best {
        Some((_, e, m)) => (Some(e), m),
        None => (None, model.clone()),
    };
    Ok(TrainReport {
        metrics,
        best_epoch,
        best_model,
    })
}

/// Newline-delimited JSON, one record per epoch.
pub fn metrics_ndjson(metrics: &[EpochMetrics]) -> Result<String> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    Ok(out)
}
