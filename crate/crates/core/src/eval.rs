//! Retrieval scoring and the analysis instruments: attention correlation,
//! redundancy curves, per-scale selection statistics and heatmaps.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::asmk::SelectedFeature;
use crate::encoder::resize_bilinear;
use crate::error::{Error, Result};
use crate::graph::Mat;
use crate::lit::{AttentionMatrix, SuperFeatureSet};

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryTruth {
    pub query: String,
    pub relevant: BTreeSet<String>,
    pub ignored: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalGroundTruth {
    pub queries: Vec<QueryTruth>,
}

impl RetrievalGroundTruth {
    /// Every image queries the rest; same label is relevant and the query
    /// itself is ignored.
    pub fn from_labels(ids: &[String], labels: &[usize]) -> Self {
        let queries = ids
            .iter()
            .zip(labels)
            .map(|(q, &l)| QueryTruth {
                query: q.clone(),
                relevant: ids
                    .iter()
                    .zip(labels)
                    .filter(|(id, &m)| m == l && *id != q)
                    .map(|(id, _)| id.clone())
                    .collect(),
                ignored: BTreeSet::from([q.clone()]),
            })
            .collect();
        Self { queries }
    }
}

/// Average precision of one ranking, with the query's ignored ids dropped.
pub fn average_precision(ranking: &[String], q: &QueryTruth) -> Result<f64> {
    if q.relevant.is_empty() {
        return Err(Error::NoRelevant(q.query.clone()));
    }
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, id) in ranking.iter().filter(|id| !q.ignored.contains(*id)).enumerate() {
        if q.relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / q.relevant.len() as f64)
}

/// Mean over queries of [`average_precision`].
pub fn mean_average_precision(rankings: &[Vec<String>], gt: &RetrievalGroundTruth) -> Result<f64> {
    if rankings.len() != gt.queries.len() {
        return Err(Error::invalid("one ranking per query"));
    }
    if gt.queries.is_empty() {
        return Err(Error::invalid("no queries"));
    }
    let mut total = 0.0;
    for (ranking, q) in rankings.iter().zip(&gt.queries) {
        total += average_precision(ranking, q)?;
    }
    Ok(total / gt.queries.len() as f64)
}

/// Cosine similarity between every pair of attention maps.
pub fn attention_correlation(alpha: &AttentionMatrix) -> Result<Mat> {
    let a = &alpha.alpha;
    let norms: Vec<f64> = a.axis_iter(Axis(1)).map(|c| c.dot(&c).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n < NORM_EPS) {
        return Err(Error::ZeroAttentionColumn(i));
    }
    let n = a.ncols();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        out[[i, i]] = 1.0;
        for j in i + 1..n {
            let c = a.column(i).dot(&a.column(j)) / (norms[i] * norms[j]);
            out[[i, j]] = c;
            out[[j, i]] = c;
        }
    }
    Ok(out)
}

/// Mean of the off-diagonal entries of a square matrix.
pub fn mean_off_diagonal(m: &Mat) -> f64 {
    let n = m.nrows();
    if n < 2 {
        return 0.0;
    }
    let diag: f64 = m.diag().sum();
    (m.sum() - diag) / (n * (n - 1)) as f64
}

/// For each K, the mean over rows of the average cosine to the K most
/// similar other rows. Rows are expected unit-norm.
pub fn redundancy_curve(features: &Mat, ks: &[usize]) -> Result<Vec<f64>> {
    let n = features.nrows();
    if let Some(&k) = ks.iter().max() {
        if k >= n {
            return Err(Error::KTooLarge { k, set_size: n });
        }
    }
    let sims = features.dot(&features.t());
    let mut curve = vec![0.0; ks.len()];
    for i in 0..n {
        let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sims[[i, j]]).collect();
        row.sort_by(|a, b| b.total_cmp(a));
        let mut prefix = Vec::with_capacity(row.len() + 1);
        prefix.push(0.0);
        for v in &row {
            prefix.push(prefix.last().unwrap() + v);
        }
        for (c, &k) in curve.iter_mut().zip(ks) {
            if k > 0 {
                *c += prefix[k] / k as f64;
            }
        }
    }
    Ok(curve.into_iter().map(|c| c / n as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerScaleStats {
    pub scales: Vec<f64>,
    /// Percentage of the selection coming from each scale.
    pub share: Vec<f64>,
    /// Percentage of each scale's candidates that were kept.
    pub retention: Vec<f64>,
    pub candidates: Vec<usize>,
    pub selected: Vec<usize>,
}

/// Selection statistics per scale; `candidates[i]` counts the features
/// offered at `scales[i]`.
pub fn per_scale_stats(selected: &[SelectedFeature], scales: &[f64], candidates: &[usize]) -> Result<PerScaleStats> {
    if scales.len() != candidates.len() {
        return Err(Error::invalid("one candidate count per scale"));
    }
    let mut kept = vec![0usize; scales.len()];
    for s in selected {
        let i = scales
            .iter()
            .position(|&x| x == s.scale)
            .ok_or_else(|| Error::invalid(format!("selected scale {} not listed", s.scale)))?;
        kept[i] += 1;
    }
    let total = selected.len().max(1) as f64;
    Ok(PerScaleStats {
        scales: scales.to_vec(),
        share: kept.iter().map(|&k| 100.0 * k as f64 / total).collect(),
        retention: kept
            .iter()
            .zip(candidates)
            .map(|(&k, &c)| if c == 0 { 0.0 } else { 100.0 * k as f64 / c as f64 })
            .collect(),
        candidates: candidates.to_vec(),
        selected: kept,
    })
}

/// Attention column `id` reshaped to its `(height, width)` grid.
pub fn attention_heatmap(set: &SuperFeatureSet, id: usize) -> Result<Mat> {
    let count = set.attention.maps();
    if id >= count {
        return Err(Error::IdOutOfRange { id, count });
    }
    let (w, h) = set.grid;
    if w * h != set.attention.locations() {
        return Err(Error::invalid("grid does not match the attention rows"));
    }
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        set.attention.alpha[[y * w + x, id]]
    }))
}

fn resize_map(map: &Mat, h: usize, w: usize) -> Mat {
    let src = map.clone().insert_axis(Axis(2));
    resize_bilinear(&src, h, w).index_axis_move(Axis(2), 0)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman correlation of two maps after resizing the larger one to the
/// smaller grid.
pub fn heatmap_rank_correlation(a: &Mat, b: &Mat) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let resized = resize_map(large, small.nrows(), small.ncols());
    let ra = ranks(&small.iter().copied().collect::<Vec<_>>());
    let rb = ranks(&resized.iter().copied().collect::<Vec<_>>());
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 0.3],
        [0.2, 0.1, 0.8],
        [0.9, 0.2, 0.4],
        [1.0, 0.7, 0.1],
        [1.0, 1.0, 0.8],
    ];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let mut out = [0u8; 3];
    for (k, o) in out.iter_mut().enumerate() {
        *o = ((STOPS[i][k] * (1.0 - f) + STOPS[i + 1][k] * f) * 255.0).round() as u8;
    }
    out
}

/// Heatmap upsampled to `(height, width)` and mapped to colors; a constant
/// map renders as the lowest color.
pub fn render_heatmap(map: &Mat, height: usize, width: usize) -> image::RgbImage {
    let up = resize_map(map, height, width);
    let (lo, hi) = up
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    image::RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let v = up[[y as usize, x as usize]];
        let t = if span > 1e-15 { (v - lo) / span } else { 0.0 };
        image::Rgb(colormap(t))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRecord {
    pub id: usize,
    pub scale: f64,
    pub path: PathBuf,
}

/// Writes one PNG per requested ID and scale, named `{stem}_id{id}_s{scale}.png`.
pub fn export_attention_heatmaps(
    stem: &str,
    image_size: (usize, usize),
    sets: &[SuperFeatureSet],
    ids: &[usize],
    out_dir: &Path,
) -> Result<Vec<HeatmapRecord>> {
    std::fs::create_dir_all(out_dir)?;
    let mut out = Vec::new();
    for set in sets {
        for &id in ids {
            let map = attention_heatmap(set, id)?;
            let path = out_dir.join(format!("{stem}_id{id}_s{:.3}.png", set.scale));
            render_heatmap(&map, image_size.0, image_size.1).save(&path)?;
            out.push(HeatmapRecord {
                id,
                scale: set.scale,
                path,
            });
        }
    }
    Ok(out)
}

/// Writes the pixel tensor of an image as PNG.
pub fn save_image_png(pixels: &Array3<f64>, path: &Path) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = |c| (pixels[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([p(0), p(1), p(2)])
    });
    img.save(path)?;
    Ok(())
}
