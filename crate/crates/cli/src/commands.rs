//! One function per subcommand. Stages communicate only through files in
//! the run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use superfeat_core::asmk::AsmkIndex;
use superfeat_core::checkpoint::{load_codebook, load_model, save_codebook, save_model};
use superfeat_core::config::parse_toggles;
use superfeat_core::dataset::{load_image_png, Corpus};
use superfeat_core::eval::{
    attention_correlation, average_precision, export_attention_heatmaps, mean_off_diagonal, save_image_png,
    RetrievalGroundTruth,
};
use superfeat_core::pipeline::{self, LossCell};
use superfeat_core::retrieval::image_signatures;
use superfeat_core::trainer::{metrics_ndjson, per_id_match_histogram};
use superfeat_core::{Codebook, Error, Model, Result, RunConfig};

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn new(cfg: &RunConfig) -> Result<Self> {
        let root = cfg.run_dir();
        fs::create_dir_all(&root)?;
        let config = root.join("config.toml");
        if !config.exists() {
            fs::write(&config, cfg.to_toml())?;
        }
        Ok(Self { root })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn existing(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p))
        }
    }

    fn train_corpus(&self) -> Result<Corpus> {
        Corpus::load(&self.existing("data/train")?)
    }

    fn eval_corpus(&self) -> Result<Corpus> {
        Corpus::load(&self.existing("data/eval")?)
    }

    fn model(&self) -> Result<Model> {
        Ok(load_model(&self.existing("model.ckpt")?)?.0)
    }

    fn codebook(&self) -> Result<Codebook> {
        load_codebook(&self.existing("codebook.bin")?)
    }

    fn index(&self) -> Result<AsmkIndex> {
        let bytes = fs::read(self.existing("index.asmk")?)?;
        AsmkIndex::read_from(&mut bytes.as_slice())
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let run = Layout::new(cfg)?;
    let (train, eval) = pipeline::generate_corpora(cfg)?;
    train.save(&run.path("data/train"))?;
    eval.save(&run.path("data/eval"))?;
    println!(
        "{} train / {} eval images in {}",
        train.len(),
        eval.len(),
        run.root.display()
    );
    Ok(())
}

pub fn fit_whitening(cfg: &RunConfig) -> Result<()> {
    let run = Layout::new(cfg)?;
    let model = pipeline::initialize(cfg, &run.train_corpus()?)?;
    save_model(&model, &run.path("init.ckpt"), None)?;
    println!("whitening fit; initial model at {}", run.path("init.ckpt").display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let run = Layout::new(cfg)?;
    let corpus = run.train_corpus()?;
    let init = run.path("init.ckpt");
    let mut model = if init.exists() {
        load_model(&init)?.0
    } else {
        let m = pipeline::initialize(cfg, &corpus)?;
        save_model(&m, &init, None)?;
        m
    };
    let metrics_path = run.path("metrics.ndjson");
    let mut log = String::new();
    let report = pipeline::train_model(cfg, &mut model, &corpus, &mut |m, _| {
        log.push_str(&metrics_ndjson(std::slice::from_ref(m))?);
        fs::write(&metrics_path, &log)?;
        Ok(())
    })?;
    save_model(&model, &run.path("model.ckpt"), Some(cfg.train.epochs))?;
    if let Some(last) = report.metrics.last() {
        println!(
            "trained {} epochs; final loss {:.6}, match ratio {}",
            report.metrics.len(),
            last.loss.total,
            last.match_ratio.map_or("n/a".into(), |r| format!("{r:.4}"))
        );
    }
    Ok(())
}

pub fn fit_codebook(cfg: &RunConfig) -> Result<()> {
    let run = Layout::new(cfg)?;
    let model = run.model()?;
    let (book, report) = pipeline::fit_run_codebook(cfg, &model, &run.train_corpus()?)?;
    save_codebook(&book, &run.path("codebook.bin"))?;
    fs::write(run.path("kmeans.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "codebook k={} after {} iterations (cost {:.4}, {} empty clusters reseeded)",
        book.k(),
        report.iterations,
        report.cost,
        report.empty_resolved
    );
    Ok(())
}

#[derive(Serialize)]
struct IndexSummary {
    images: usize,
    codebook_size: usize,
    bits: usize,
    mean_clusters: f64,
    sha256: String,
}

pub fn index(cfg: &RunConfig) -> Result<()> {
    let run = Layout::new(cfg)?;
    let model = run.model()?;
    let index = superfeat_core::retrieval::build_index(&model, &run.eval_corpus()?.images, run.codebook()?, &cfg.asmk)?;
    let bytes = index.to_bytes()?;
    fs::write(run.path("index.asmk"), &bytes)?;
    let summary = IndexSummary {
        images: index.len(),
        codebook_size: index.codebook.k(),
        bits: index.bits,
        mean_clusters: superfeat_core::asmk::memory_footprint(&index).mean,
        sha256: index.content_hash()?,
    };
    fs::write(run.path("index.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("indexed {} images; sha256 {}", summary.images, summary.sha256);
    Ok(())
}

#[derive(Serialize)]
struct HitRow {
    rank: usize,
    id: String,
    score: f64,
}

pub fn search(cfg: &RunConfig, query: Option<&str>, image: Option<&Path>, top: usize) -> Result<()> {
    let run = Layout::new(cfg)?;
    let model = run.model()?;
    let index = run.index()?;
    let q = match (query, image) {
        (Some(id), _) => {
            let eval = run.eval_corpus()?;
            let i = eval
                .position(id)
                .ok_or_else(|| Error::InvalidInput(format!("no eval image with id {id}")))?;
            eval.images[i].clone()
        }
        (None, Some(path)) => {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("query");
            load_image_png(path, stem)?
        }
        (None, None) => return Err(Error::InvalidInput("give --query or --image".into())),
    };
    let sigs = image_signatures(&model, &q, &index.codebook, &cfg.asmk)?;
    let rows: Vec<HitRow> = index
        .search(&sigs, cfg.asmk.kernel(), Some(top))
        .into_iter()
        .enumerate()
        .map(|(r, h)| HitRow {
            rank: r + 1,
            id: h.id,
            score: h.score,
        })
        .collect();
    for r in &rows {
        println!("{:>3}  {}  {:.6}", r.rank, r.id, r.score);
    }
    write_csv(&run.path(&format!("search_{}.csv", q.id)), &rows)
}

#[derive(Serialize)]
struct QueryRow {
    query: String,
    label: usize,
    average_precision: f64,
}

#[derive(Serialize)]
struct MetricRow {
    metric: &'static str,
    value: String,
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let run = Layout::new(cfg)?;
    let model = run.model()?;
    let index = run.index()?;
    let eval = run.eval_corpus()?;
    let gt = RetrievalGroundTruth::from_labels(&eval.ids(), &eval.labels);
    let kernel = cfg.asmk.kernel();
    let mut rows = Vec::with_capacity(eval.len());
    for ((im, &label), truth) in eval.images.iter().zip(&eval.labels).zip(&gt.queries) {
        let sigs = image_signatures(&model, im, &index.codebook, &cfg.asmk)?;
        let ranking: Vec<String> = index.search(&sigs, kernel, None).into_iter().map(|h| h.id).collect();
        rows.push(QueryRow {
            query: im.id.clone(),
            label,
            average_precision: average_precision(&ranking, truth)?,
        });
    }
    let map = rows.iter().map(|r| r.average_precision).sum::<f64>() / rows.len() as f64;
    let summary = vec![
        MetricRow {
            metric: "map",
            value: format!("{map:.6}"),
        },
        MetricRow {
            metric: "queries",
            value: rows.len().to_string(),
        },
        MetricRow {
            metric: "mean_clusters",
            value: format!("{:.4}", superfeat_core::asmk::memory_footprint(&index).mean),
        },
        MetricRow {
            metric: "index_sha256",
            value: index.content_hash()?,
        },
    ];
    write_csv(&run.path("eval_queries.csv"), &rows)?;
    write_csv(&run.path("eval.csv"), &summary)?;
    println!("mAP {map:.4} over {} queries", rows.len());
    Ok(())
}

#[derive(Serialize)]
struct CorrelationRow {
    image: String,
    mean_off_diagonal: f64,
}

#[derive(Serialize)]
struct RedundancyRow {
    k: usize,
    superfeatures: f64,
    local: f64,
}

#[derive(Serialize)]
struct ScaleRow {
    scale: f64,
    candidates: usize,
    selected: usize,
    share_percent: f64,
    retention_percent: f64,
}

#[derive(Serialize)]
struct IdRow {
    id: usize,
    matches: usize,
    percent: f64,
}

pub fn diagnose(cfg: &RunConfig) -> Result<()> {
    let run = Layout::new(cfg)?;
    let model = run.model()?;
    let eval = run.eval_corpus()?;
    let scale = cfg.diagnose.scale;
    let out = run.path("diagnose");

    let mut corr = Vec::with_capacity(eval.len());
    for im in &eval.images {
        let set = model.superfeatures(im, scale)?;
        corr.push(CorrelationRow {
            image: im.id.clone(),
            mean_off_diagonal: mean_off_diagonal(&attention_correlation(&set.attention)?),
        });
    }
    let mean_corr = corr.iter().map(|r| r.mean_off_diagonal).sum::<f64>() / corr.len() as f64;
    write_csv(&out.join("attention_correlation.csv"), &corr)?;

    let red = pipeline::redundancy(&model, &eval.images, scale, &cfg.diagnose.redundancy_ks)?;
    let rows: Vec<RedundancyRow> = red
        .ks
        .iter()
        .enumerate()
        .map(|(i, &k)| RedundancyRow {
            k,
            superfeatures: red.superfeatures[i],
            local: red.local[i],
        })
        .collect();
    write_csv(&out.join("redundancy.csv"), &rows)?;

    let stats = pipeline::per_scale(&model, &eval.images, &cfg.asmk)?;
    let rows: Vec<ScaleRow> = (0..stats.scales.len())
        .map(|i| ScaleRow {
            scale: stats.scales[i],
            candidates: stats.candidates[i],
            selected: stats.selected[i],
            share_percent: stats.share[i],
            retention_percent: stats.retention[i],
        })
        .collect();
    write_csv(&out.join("per_scale.csv"), &rows)?;

    let train = run.train_corpus()?;
    let tuples = pipeline::measurement_tuples(
        &model,
        &train,
        cfg.ablate.match_tuples,
        cfg.train.negatives,
        cfg.train.scale,
        cfg.mining_seed(),
    )?;
    let tally = superfeat_core::trainer::measure_matches(
        &model,
        &train.images,
        &tuples,
        cfg.train.scale,
        &cfg.loss,
        cfg.constraints,
    )?;
    let coverage = per_id_match_histogram(&tally.per_id, tally.tuples);
    let rows: Vec<IdRow> = tally
        .per_id
        .iter()
        .zip(&coverage.percent)
        .enumerate()
        .map(|(id, (&matches, &percent))| IdRow { id, matches, percent })
        .collect();
    write_csv(&out.join("match_counts.csv"), &rows)?;

    let heat = out.join("heatmaps");
    let ids: Vec<usize> = (0..model.bank.config.templates).collect();
    for im in eval.images.iter().take(cfg.diagnose.heatmap_images) {
        fs::create_dir_all(&heat)?;
        save_image_png(&im.pixels, &heat.join(format!("{}.png", im.id)))?;
        let set = model.superfeatures(im, scale)?;
        export_attention_heatmaps(&im.id, (im.height(), im.width()), &[set], &ids, &heat)?;
    }

    println!("mean attention correlation {mean_corr:.4}");
    for (k, (s, l)) in red.ks.iter().zip(red.superfeatures.iter().zip(&red.local)) {
        println!("redundancy K={k}: super-features {s:.4}, local {l:.4}");
    }
    println!("min per-ID match percentage {:.2}", coverage.min);
    Ok(())
}

/// Trains the cell unless its run directory already holds a model.
fn cell_model(cell: &RunConfig, train: &Corpus) -> Result<Model> {
    let dir = cell.run_dir();
    let path = dir.join("model.ckpt");
    if path.exists() {
        log::info!("reusing {}", path.display());
        return Ok(load_model(&path)?.0);
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cell.to_toml())?;
    let mut model = pipeline::initialize(cell, train)?;
    pipeline::train_model(cell, &mut model, train, &mut |_, _| Ok(()))?;
    save_model(&model, &path, Some(cell.train.epochs))?;
    Ok(model)
}

pub fn ablate_losses(cfg: &RunConfig) -> Result<()> {
    let run = Layout::new(cfg)?;
    let train = run.train_corpus()?;
    let eval = run.eval_corpus()?;
    let mut rows = Vec::new();
    for label in &cfg.ablate.losses {
        let toggles = parse_toggles(label).ok_or_else(|| Error::Config {
            key: "ablate.losses".into(),
            message: format!("unknown loss label '{label}'"),
        })?;
        let cell = pipeline::with_toggles(cfg, toggles);
        let model = cell_model(&cell, &train)?;
        let (book, _) = pipeline::fit_run_codebook(&cell, &model, &train)?;
        let result = pipeline::evaluate(&cell, &model, &eval, book)?;
        let row = LossCell {
            label: toggles.label(),
            map: result.map,
            attention_correlation: pipeline::mean_attention_correlation(&model, &eval.images, cfg.diagnose.scale)?,
        };
        println!(
            "{:<20} mAP {:.4}  attention correlation {:.4}",
            row.label, row.map, row.attention_correlation
        );
        rows.push(row);
    }
    write_csv(&run.path("ablate/losses.csv"), &rows)
}

#[derive(Serialize)]
struct ConstraintCsv {
    constraints: String,
    reciprocal: bool,
    ratio: bool,
    same_id: bool,
    tuples: usize,
    positive_matches: usize,
    negative_matches: usize,
    match_ratio: Option<f64>,
}

pub fn ablate_constraints(cfg: &RunConfig) -> Result<()> {
    let run = Layout::new(cfg)?;
    let model = run.model()?;
    let train = run.train_corpus()?;
    let tuples = pipeline::measurement_tuples(
        &model,
        &train,
        cfg.ablate.match_tuples,
        cfg.train.negatives,
        cfg.train.scale,
        cfg.mining_seed(),
    )?;
    let rows: Vec<ConstraintCsv> = pipeline::constraint_sweep(&model, &train, &tuples, cfg.train.scale, &cfg.loss)?
        .into_iter()
        .map(|r| ConstraintCsv {
            constraints: r.constraints.label(),
            reciprocal: r.constraints.reciprocal,
            ratio: r.constraints.ratio,
            same_id: r.constraints.same_id,
            tuples: r.tally.tuples,
            positive_matches: r.tally.positive,
            negative_matches: r.tally.negative,
            match_ratio: r.tally.ratio(),
        })
        .collect();
    for r in &rows {
        println!(
            "{:<28} positive {:>5}  negative {:>5}  ratio {}",
            r.constraints,
            r.positive_matches,
            r.negative_matches,
            r.match_ratio.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
    }
    write_csv(&run.path("ablate/constraints.csv"), &rows)
}

pub fn ablate_budget(cfg: &RunConfig) -> Result<()> {
    let run = Layout::new(cfg)?;
    let model = run.model()?;
    let eval = run.eval_corpus()?;
    let book = match run.codebook() {
        Ok(b) => b,
        Err(Error::MissingArtifact(_)) => pipeline::fit_run_codebook(cfg, &model, &run.train_corpus()?)?.0,
        Err(e) => return Err(e),
    };
    let rows = pipeline::budget_sweep(cfg, &model, &eval, &book, &cfg.ablate.budgets)?;
    for r in &rows {
        println!(
            "budget {:>4}  mAP {:.4}  mean clusters {:.2}",
            r.budget, r.map, r.mean_clusters
        );
    }
    write_csv(&run.path("ablate/budget.csv"), &rows)
}
