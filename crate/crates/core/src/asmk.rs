//! Binary aggregated selective match kernel over an inverted file.
//!
//! Each image keeps at most one binary signature per visual word: the sign
//! pattern of the summed residuals of its features assigned to that word.
//! Two images are compared over the words they share through a selective
//! function of the normalized Hamming similarity.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::Mat;
use crate::lit::SuperFeatureSet;

const INDEX_MAGIC: &[u8; 4] = b"SFIX";
const INDEX_VERSION: u32 = 1;

/// One candidate kept for indexing.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedFeature {
    pub feature: Array1<f64>,
    pub strength: f64,
    pub scale: f64,
    pub id: usize,
}

/// Keeps the `budget` strongest usable features over all scales, ordered by
/// strength desc, then scale desc, then ID asc.
pub fn select_top_features(sets: &[SuperFeatureSet], budget: usize) -> Vec<SelectedFeature> {
    let mut all: Vec<SelectedFeature> = sets
        .iter()
        .flat_map(|s| {
            (0..s.len()).filter(|&i| s.is_usable(i)).map(move |i| SelectedFeature {
                feature: s.features.row(i).to_owned(),
                strength: s.strengths[i],
                scale: s.scale,
                id: i,
            })
        })
        .collect();
    all.sort_by(|a, b| {
        b.strength
            .total_cmp(&a.strength)
            .then(b.scale.total_cmp(&a.scale))
            .then(a.id.cmp(&b.id))
    });
    all.truncate(budget);
    all
}

pub fn stack_features(selected: &[SelectedFeature]) -> Mat {
    let dim = selected.first().map_or(0, |s| s.feature.len());
    Array2::from_shape_fn((selected.len(), dim), |(i, j)| selected[i].feature[j])
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `k x dim`.
    pub centroids: Mat,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Nearest centroid; lowest index wins ties.
    pub fn assign(&self, x: ArrayView1<f64>) -> usize {
        let mut best = (0, f64::INFINITY);
        for (c, row) in self.centroids.rows().into_iter().enumerate() {
            let d = sq_dist(x, row);
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmeansReport {
    pub iterations: usize,
    /// Empty clusters reseeded to the farthest point.
    pub empty_resolved: usize,
    /// Final sum of squared distances to the assigned centroids.
    pub cost: f64,
}

fn plus_plus_seeds(x: &Mat, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let m = x.nrows();
    let mut chosen = vec![rng.gen_range(0..m)];
    let mut d2: Vec<f64> = (0..m).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = m - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).expect("positive total");
            }
            pick
        } else {
            (0..m).find(|i| !chosen.contains(i)).expect("k <= M")
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    chosen
}

/// k-means with plus-plus seeding and at most `iterations` Lloyd steps.
pub fn train_codebook(features: &Mat, k: usize, seed: u64, iterations: usize) -> Result<(Codebook, KmeansReport)> {
    let m = features.nrows();
    if k < 2 {
        return Err(Error::invalid("codebook needs k >= 2"));
    }
    if m < k {
        return Err(Error::invalid(format!("k-means needs at least k={k} samples, got {m}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = plus_plus_seeds(features, k, &mut rng);
    let mut centroids = Array2::from_shape_fn((k, features.ncols()), |(c, j)| features[[seeds[c], j]]);
    let mut assignment = vec![usize::MAX; m];
    let mut report = KmeansReport {
        iterations: 0,
        empty_resolved: 0,
        cost: 0.0,
    };
    for it in 0..iterations {
        let book = Codebook { centroids };
        let next: Vec<usize> = (0..m).map(|i| book.assign(features.row(i))).collect();
        centroids = book.centroids;
        let changed = next != assignment;
        assignment = next;
        report.iterations = it + 1;
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            let mut row = sums.row_mut(c);
            row += &features.row(i);
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centroids.row_mut(c).assign(&mean);
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..m)
                    .max_by(|&a, &b| {
                        let da = sq_dist(features.row(a), centroids.row(assignment[a]));
                        let db = sq_dist(features.row(b), centroids.row(assignment[b]));
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("non-empty sample");
                log::info!("EmptyClusterResolved: cluster {c} reseeded to sample {far}");
                centroids.row_mut(c).assign(&features.row(far));
                assignment[far] = c;
                report.empty_resolved += 1;
            }
        }
    }
    let book = Codebook { centroids };
    report.cost = (0..m)
        .map(|i| sq_dist(features.row(i), book.centroids.row(book.assign(features.row(i)))))
        .sum();
    Ok((book, report))
}

/// Signs of an aggregated residual, packed with bit `j` of word `j / 64`
/// holding dimension `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinarySignature {
    pub word: u32,
    pub bits: Vec<u64>,
}

fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

fn hamming(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Signatures of one image, sorted by visual word.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSignatures {
    pub signatures: Vec<BinarySignature>,
    pub bits: usize,
}

impl ImageSignatures {
    /// |C(x)|.
    pub fn cluster_count(&self) -> usize {
        self.signatures.len()
    }

    /// Self-kernel normalizer `|C(x)|^{-1/2}`.
    pub fn gamma(&self) -> f64 {
        1.0 / (self.cluster_count() as f64).sqrt()
    }
}

/// Residual aggregation per visual word followed by sign binarization
/// (zero maps to bit 1).
pub fn aggregate_binarize(image_id: &str, features: &Mat, codebook: &Codebook) -> Result<ImageSignatures> {
    if features.nrows() == 0 {
        return Err(Error::NoFeatures(image_id.to_string()));
    }
    if features.ncols() != codebook.dim() {
        return Err(Error::invalid(format!(
            "features have dim {}, codebook {}",
            features.ncols(),
            codebook.dim()
        )));
    }
    let dim = codebook.dim();
    let mut residuals: std::collections::BTreeMap<usize, Array1<f64>> = Default::default();
    for row in features.rows() {
        let c = codebook.assign(row);
        let r = residuals.entry(c).or_insert_with(|| Array1::zeros(dim));
        *r += &(&row - &codebook.centroids.row(c));
    }
    let signatures = residuals
        .into_iter()
        .map(|(word, r)| {
            let mut bits = vec![0u64; words_for(dim)];
            for (j, &v) in r.iter().enumerate() {
                if v >= 0.0 {
                    bits[j / 64] |= 1 << (j % 64);
                }
            }
            BinarySignature {
                word: word as u32,
                bits,
            }
        })
        .collect();
    Ok(ImageSignatures { signatures, bits: dim })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelParams {
    /// Selectivity exponent.
    pub alpha: f64,
    /// Similarity threshold.
    pub tau: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self { alpha: 3.0, tau: 0.0 }
    }
}

impl KernelParams {
    pub fn selectivity(&self, hamming: u32, bits: usize) -> f64 {
        let u = (bits as f64 - 2.0 * f64::from(hamming)) / bits as f64;
        if u > self.tau {
            u.powf(self.alpha)
        } else {
            0.0
        }
    }
}

fn normalize(sum: f64, clusters_q: usize, clusters_x: usize) -> f64 {
    // equal to γ_q·γ_x·sum, written so that self-similarity is exactly 1
    sum / ((clusters_q * clusters_x) as f64).sqrt()
}

/// Kernel between two images, accumulated over shared words in word order.
pub fn kernel_score(q: &ImageSignatures, x: &ImageSignatures, params: KernelParams) -> f64 {
    if q.signatures.is_empty() || x.signatures.is_empty() {
        return 0.0;
    }
    let (mut i, mut j, mut sum) = (0, 0, 0.0);
    while i < q.signatures.len() && j < x.signatures.len() {
        let (a, b) = (&q.signatures[i], &x.signatures[j]);
        match a.word.cmp(&b.word) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                sum += params.selectivity(hamming(&a.bits, &b.bits), q.bits);
                i += 1;
                j += 1;
            }
        }
    }
    normalize(sum, q.cluster_count(), x.cluster_count())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Posting {
    pub image: u32,
    pub bits: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsmkIndex {
    pub codebook: Codebook,
    pub bits: usize,
    pub image_ids: Vec<String>,
    /// Per visual word, postings in insertion order.
    pub postings: Vec<Vec<Posting>>,
    pub gamma: Vec<f64>,
    pub cluster_counts: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchHit {
    pub image: usize,
    pub id: String,
    pub score: f64,
}

impl AsmkIndex {
    pub fn new(codebook: Codebook) -> Self {
        let k = codebook.k();
        Self {
            bits: codebook.dim(),
            codebook,
            image_ids: Vec::new(),
            postings: vec![Vec::new(); k],
            gamma: Vec::new(),
            cluster_counts: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn add(&mut self, id: impl Into<String>, sigs: &ImageSignatures) -> Result<usize> {
        if sigs.bits != self.bits {
            return Err(Error::invalid("signature width differs from the index"));
        }
        if sigs.signatures.is_empty() {
            return Err(Error::NoFeatures(id.into()));
        }
        let image = self.image_ids.len();
        for s in &sigs.signatures {
            self.postings[s.word as usize].push(Posting {
                image: image as u32,
                bits: s.bits.clone(),
            });
        }
        self.image_ids.push(id.into());
        self.gamma.push(sigs.gamma());
        self.cluster_counts.push(sigs.cluster_count() as u32);
        Ok(image)
    }

    /// Builds an index, logging and skipping images that failed upstream.
    pub fn build<I>(codebook: Codebook, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Result<ImageSignatures>)>,
    {
        let mut index = Self::new(codebook);
        for (id, sigs) in entries {
            match sigs.and_then(|s| index.add(id.clone(), &s)) {
                Ok(_) => {}
                Err(e) => log::warn!("skipping {id}: {e}"),
            }
        }
        if index.is_empty() {
            return Err(Error::IndexEmpty);
        }
        Ok(index)
    }

    /// Signatures of an indexed image, recovered from the postings.
    pub fn image_signatures(&self, image: usize) -> ImageSignatures {
        let signatures = self
            .postings
            .iter()
            .enumerate()
            .filter_map(|(w, list)| {
                list.iter()
                    .find(|p| p.image as usize == image)
                    .map(|p| BinarySignature {
                        word: w as u32,
                        bits: p.bits.clone(),
                    })
            })
            .collect();
        ImageSignatures {
            signatures,
            bits: self.bits,
        }
    }

    fn rank(&self, scores: Vec<f64>, top_m: Option<usize>) -> Vec<SearchHit> {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.truncate(top_m.unwrap_or(usize::MAX));
        order
            .into_iter()
            .map(|i| SearchHit {
                image: i,
                id: self.image_ids[i].clone(),
                score: scores[i],
            })
            .collect()
    }

    /// Inverted-file traversal; every indexed image is ranked, those sharing
    /// no word with score 0 after all positive scores.
    pub fn search(&self, q: &ImageSignatures, params: KernelParams, top_m: Option<usize>) -> Vec<SearchHit> {
        let mut sums = vec![0.0; self.len()];
        for s in &q.signatures {
            if let Some(list) = self.postings.get(s.word as usize) {
                for p in list {
                    sums[p.image as usize] += params.selectivity(hamming(&s.bits, &p.bits), self.bits);
                }
            }
        }
        let scores = sums
            .iter()
            .zip(&self.cluster_counts)
            .map(|(&s, &c)| {
                if q.signatures.is_empty() {
                    0.0
                } else {
                    normalize(s, q.cluster_count(), c as usize)
                }
            })
            .collect();
        self.rank(scores, top_m)
    }

    /// Reference ranking from pairwise kernel evaluation.
    pub fn search_brute_force(
        &self,
        q: &ImageSignatures,
        params: KernelParams,
        top_m: Option<usize>,
    ) -> Vec<SearchHit> {
        let scores = (0..self.len())
            .map(|i| kernel_score(q, &self.image_signatures(i), params))
            .collect();
        self.rank(scores, top_m)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let u32_of = |v: usize| u32::try_from(v).map_err(|_| Error::Format(format!("{v} exceeds u32")));
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&u32_of(self.codebook.k())?.to_le_bytes())?;
        w.write_all(&u32_of(self.bits)?.to_le_bytes())?;
        w.write_all(&u32_of(self.len())?.to_le_bytes())?;
        for id in &self.image_ids {
            w.write_all(&u32_of(id.len())?.to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        for v in self.codebook.centroids.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        let sig_bytes = self.bits.div_ceil(8);
        for list in &self.postings {
            write_varint(w, list.len() as u64)?;
            for p in list {
                w.write_all(&p.image.to_le_bytes())?;
                let packed: Vec<u8> = p.bits.iter().flat_map(|b| b.to_le_bytes()).take(sig_bytes).collect();
                w.write_all(&packed)?;
            }
        }
        for g in &self.gamma {
            w.write_all(&g.to_le_bytes())?;
        }
        for c in &self.cluster_counts {
            w.write_all(&c.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Format("not an index file".into()));
        }
        let version = read_u32(r)?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let k = read_u32(r)? as usize;
        let bits = read_u32(r)? as usize;
        let n = read_u32(r)? as usize;
        let mut image_ids = Vec::with_capacity(n);
        for _ in 0..n {
            let len = read_u32(r)? as usize;
            let mut b = vec![0u8; len];
            r.read_exact(&mut b)?;
            image_ids.push(String::from_utf8(b).map_err(|e| Error::Format(e.to_string()))?);
        }
        let mut values = Vec::with_capacity(k * bits);
        for _ in 0..k * bits {
            values.push(read_f64(r)?);
        }
        let centroids = Array2::from_shape_vec((k, bits), values).map_err(|e| Error::Format(e.to_string()))?;
        let sig_bytes = bits.div_ceil(8);
        let mut postings = Vec::with_capacity(k);
        for _ in 0..k {
            let count = read_varint(r)? as usize;
            let mut list = Vec::with_capacity(count);
            for _ in 0..count {
                let image = read_u32(r)?;
                if image as usize >= n {
                    return Err(Error::Format(format!("posting for unknown image {image}")));
                }
                let mut packed = vec![0u8; words_for(bits) * 8];
                r.read_exact(&mut packed[..sig_bytes])?;
                let words = packed
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                list.push(Posting { image, bits: words });
            }
            postings.push(list);
        }
        let gamma = (0..n).map(|_| read_f64(r)).collect::<Result<_>>()?;
        let cluster_counts = (0..n).map(|_| read_u32(r)).collect::<Result<_>>()?;
        Ok(Self {
            codebook: Codebook { centroids },
            bits,
            image_ids,
            postings,
            gamma,
            cluster_counts,
        })
    }

    /// Hex SHA-256 of the serialized index.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn write_varint(w: &mut impl Write, mut v: u64) -> Result<()> {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            w.write_all(&[byte])?;
            return Ok(());
        }
        w.write_all(&[byte | 0x80])?;
    }
}

fn read_varint(r: &mut impl Read) -> Result<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        v |= u64::from(b[0] & 0x7f) << shift;
        if b[0] & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(Error::Format("varint overflow".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub per_image: Vec<u32>,
    pub mean: f64,
}

/// Non-empty clusters per image, counted from the postings.
pub fn memory_footprint(index: &AsmkIndex) -> Footprint {
    let mut per_image = vec![0u32; index.len()];
    for list in &index.postings {
        for p in list {
            per_image[p.image as usize] += 1;
        }
    }
    let mean = if per_image.is_empty() {
        0.0
    } else {
        per_image.iter().map(|&c| f64::from(c)).sum::<f64>() / per_image.len() as f64
    };
    Footprint { per_image, mean }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lit::AttentionMatrix;
    use rand_distr::{Distribution, Normal};

    fn unit_rows(m: usize, dim: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Mat = Array2::from_shape_simple_fn((m, dim), || rng.gen_range(-1.0..1.0));
        for mut r in x.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        x
    }

    fn set_with(strengths: Vec<f64>, scale: f64) -> SuperFeatureSet {
        let n = strengths.len();
        SuperFeatureSet {
            features: Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { i as f64 } else { scale }),
            strengths,
            attention: AttentionMatrix {
                alpha: Array2::from_elem((1, n), 1.0),
            },
            scale,
            grid: (1, 1),
        }
    }

    #[test]
    fn selection_budget_and_strongest() {
        let sets = vec![set_with(vec![1.0, 10.0, 1.0], 1.0), set_with(vec![1.0, 1.0], 0.5)];
        assert_eq!(select_top_features(&sets, 100).len(), 5);
        let top = select_top_features(&sets, 1);
        assert_eq!((top[0].strength, top[0].id, top[0].scale), (10.0, 1, 1.0));
        // ties: higher scale first, then lower id
        let order: Vec<(f64, usize)> = select_top_features(&sets, 5).iter().map(|s| (s.scale, s.id)).collect();
        assert_eq!(order, vec![(1.0, 1), (1.0, 0), (1.0, 2), (0.5, 0), (0.5, 1)]);
    }

    #[test]
    fn selection_equals_full_sort_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sets: Vec<_> = [2.0, 1.0, 0.5]
            .iter()
            .map(|&s| set_with((0..8).map(|_| rng.gen_range(0.1..5.0)).collect(), s))
            .collect();
        let mut all: Vec<(f64, f64, usize)> = sets
            .iter()
            .flat_map(|s| s.strengths.iter().enumerate().map(move |(i, &st)| (st, s.scale, i)))
            .collect();
        all.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let picked: Vec<(f64, f64, usize)> = select_top_features(&sets, 10)
            .iter()
            .map(|s| (s.strength, s.scale, s.id))
            .collect();
        assert_eq!(picked, all[..10].to_vec());
    }

    #[test]
    fn kmeans_recovers_blob_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let centers = [[2.0, 0.0, 1.0], [-2.0, 1.0, 0.0]];
        let mut rows = Vec::new();
        for c in &centers {
            for _ in 0..200 {
                rows.extend(c.iter().map(|v| v + noise.sample(&mut rng)));
            }
        }
        let x = Array2::from_shape_vec((400, 3), rows).unwrap();
        let (book, _) = train_codebook(&x, 2, 0, 25).unwrap();
        for (b, c) in [(0..200), (200..400)].iter().zip(&centers) {
            let mean = x.slice(ndarray::s![b.clone(), ..]).mean_axis(ndarray::Axis(0)).unwrap();
            let nearest = book.assign(mean.view());
            let err = sq_dist(book.centroids.row(nearest), mean.view()).sqrt();
            assert!(err < 0.05, "{err}");
            assert!(sq_dist(mean.view(), ArrayView1::from(&c[..])).sqrt() < 0.05);
        }
    }

    #[test]
    fn kmeans_k_equals_m_and_determinism() {
        let x = unit_rows(12, 4, 2);
        let (book, report) = train_codebook(&x, 12, 5, 25).unwrap();
        assert!(report.cost.abs() < 1e-24);
        assert_eq!(book.k(), 12);
        let (again, _) = train_codebook(&x, 12, 5, 25).unwrap();
        assert_eq!(book, again);
        assert!(train_codebook(&x, 13, 0, 25).is_err());
    }

    fn toy_codebook() -> Codebook {
        Codebook {
            centroids: Array2::from_shape_vec((2, 3), vec![0.0, 0.0, 0.0, 5.0, 5.0, 5.0]).unwrap(),
        }
    }

    #[test]
    fn binarize_single_feature_and_tie_rule() {
        let book = toy_codebook();
        let x = Array2::from_shape_vec((1, 3), vec![0.5, -0.2, 0.1]).unwrap();
        let s = aggregate_binarize("a", &x, &book).unwrap();
        assert_eq!(s.signatures.len(), 1);
        assert_eq!(s.signatures[0].word, 0);
        assert_eq!(s.signatures[0].bits[0], 0b101);
        let cancel = Array2::from_shape_vec((2, 3), vec![0.5, -0.2, 0.1, -0.5, 0.2, -0.1]).unwrap();
        let s = aggregate_binarize("b", &cancel, &book).unwrap();
        assert_eq!(s.signatures[0].bits[0], 0b111);
        assert!(matches!(
            aggregate_binarize("c", &Array2::zeros((0, 3)), &book),
            Err(Error::NoFeatures(_))
        ));
    }

    fn sigs(words: &[(u32, u64)], bits: usize) -> ImageSignatures {
        ImageSignatures {
            signatures: words
                .iter()
                .map(|&(w, b)| BinarySignature { word: w, bits: vec![b] })
                .collect(),
            bits,
        }
    }

    #[test]
    fn planted_kernel_score() {
        let p = KernelParams::default();
        let q = sigs(&[(0, 0b0000), (1, 0b1111), (2, 0b1010), (5, 0)], 4);
        let x = sigs(&[(0, 0b0001), (1, 0b1111), (2, 0b0101), (7, 0)], 4);
        // hamming 1, 0, 4 -> u = 0.5, 1, -1
        let expected = (0.125 + 1.0 + 0.0) / 4.0;
        assert_eq!(kernel_score(&q, &x, p), expected);
        assert_eq!(kernel_score(&x, &q, p), expected);
        assert_eq!(kernel_score(&q, &q, p), 1.0);
        assert_eq!(kernel_score(&q, &sigs(&[(9, 0)], 4), p), 0.0);
    }

    fn random_index(images: usize, seed: u64) -> (AsmkIndex, Vec<ImageSignatures>) {
        let train = unit_rows(200, 16, seed);
        let (book, _) = train_codebook(&train, 12, seed, 25).unwrap();
        let all: Vec<_> = (0..images)
            .map(|i| aggregate_binarize(&format!("im{i}"), &unit_rows(10, 16, seed * 1000 + i as u64), &book).unwrap())
            .collect();
        let index = AsmkIndex::build(
            book,
            all.iter().enumerate().map(|(i, s)| (format!("im{i}"), Ok(s.clone()))),
        )
        .unwrap();
        (index, all)
    }

    #[test]
    fn inverted_file_equals_brute_force_and_self_retrieval() {
        let (index, all) = random_index(10, 4);
        let p = KernelParams::default();
        for (i, q) in all.iter().enumerate() {
            let fast = index.search(q, p, None);
            assert_eq!(fast, index.search_brute_force(q, p, None));
            assert_eq!(fast[0].image, i);
            assert_eq!(fast[0].score, 1.0);
            assert_eq!(index.search(q, p, Some(1)).len(), 1);
            assert_eq!(index.image_signatures(i), *q);
        }
    }

    #[test]
    fn serialization_round_trip_and_footprint() {
        let (index, all) = random_index(6, 8);
        let bytes = index.to_bytes().unwrap();
        let back = AsmkIndex::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, index);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let fp = memory_footprint(&index);
        for (i, s) in all.iter().enumerate() {
            assert_eq!(fp.per_image[i] as usize, s.cluster_count());
            assert!((index.gamma[i] - 1.0 / (s.cluster_count() as f64).sqrt()).abs() < 1e-15);
        }
        let mean = all.iter().map(|s| s.cluster_count() as f64).sum::<f64>() / 6.0;
        assert!((fp.mean - mean).abs() < 1e-12);
    }

    #[test]
    fn empty_index_is_an_error() {
        let book = toy_codebook();
        let r = AsmkIndex::build(book, std::iter::empty());
        assert!(matches!(r, Err(Error::IndexEmpty)));
    }

    #[test]
    fn varint_round_trip() {
        for v in [0u64, 1, 127, 128, 300, 1 << 40] {
            let mut b = Vec::new();
            write_varint(&mut b, v).unwrap();
            assert_eq!(read_varint(&mut b.as_slice()).unwrap(), v);
        }
    }
}
