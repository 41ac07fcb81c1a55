//! Global pooling and the three training losses, each as a plain function
//! of values and as a graph builder for training.

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::LocalFeatureSet;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::lit::{AttentionMatrix, SuperFeatureSet};
use crate::matching::{MatchSet, RatioDirection, RatioTest};
use crate::whitening::WhiteningTransform;

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Margin μ′ of the super-feature loss.
    pub margin_super: f64,
    /// Margin μ of the global loss.
    pub margin_global: f64,
    pub weight_super: f64,
    pub weight_attn: f64,
    pub ratio_tau: f64,
    pub ratio_direction: RatioDirection,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin_super: 1.1,
            margin_global: 0.75,
            weight_super: 0.02,
            weight_attn: 0.1,
            ratio_tau: 0.9,
            ratio_direction: RatioDirection::StandardLowe,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin_super > 0.0) {
            return Err(Error::config("loss.margin_super", "must be > 0"));
        }
        if !(self.margin_global > 0.0) {
            return Err(Error::config("loss.margin_global", "must be > 0"));
        }
        if !(self.weight_super >= 0.0) {
            return Err(Error::config("loss.weight_super", "must be >= 0"));
        }
        if !(self.weight_attn >= 0.0) {
            return Err(Error::config("loss.weight_attn", "must be >= 0"));
        }
        if !(self.ratio_tau > 0.0 && self.ratio_tau <= 1.0) {
            return Err(Error::config("loss.ratio_tau", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn ratio_test(&self) -> RatioTest {
        RatioTest {
            tau: self.ratio_tau,
            direction: self.ratio_direction,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossToggles {
    pub use_global: bool,
    pub use_super: bool,
    pub use_attn: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            use_global: false,
            use_super: true,
            use_attn: true,
        }
    }
}

impl LossToggles {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.use_global {
            parts.push("global");
        }
        if self.use_super {
            parts.push("super");
        }
        if self.use_attn {
            parts.push("attn");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// Norm-weighted pooled descriptor `Σ_l ‖u_l‖·o(u_l)`, l2-normalized.
pub fn global_descriptor(u: &LocalFeatureSet, whitener: &WhiteningTransform) -> Result<Array1<f64>> {
    if u.is_empty() {
        return Err(Error::invalid("local feature set is empty"));
    }
    let projected = whitener.apply(&u.features);
    let weights: Array1<f64> = u.features.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let pooled = weights.dot(&projected);
    let norm = pooled.dot(&pooled).sqrt();
    if norm < NORM_EPS {
        return Err(Error::ZeroDescriptor);
    }
    Ok(pooled / norm)
}

/// `1 x 128` descriptor node.
pub fn global_descriptor_graph(g: &mut Graph, u: Var, whitener: &WhiteningTransform) -> Var {
    let projected = whitener.apply_graph(g, u);
    let weights = g.row_norms(u);
    let wt = g.transpose(weights);
    let pooled = g.matmul(wt, projected);
    g.row_l2_normalize(pooled)
}

fn sq_dist(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `‖g − g⁺‖² + Σ_j [μ − ‖g − g_j⁻‖²]⁺`.
pub fn loss_global(
    anchor: &Array1<f64>,
    positive: &Array1<f64>,
    negatives: &[Array1<f64>],
    cfg: &LossConfig,
) -> Result<f64> {
    let dim = anchor.len();
    if positive.len() != dim || negatives.iter().any(|n| n.len() != dim) {
        return Err(Error::invalid("descriptor dimensions differ"));
    }
    let pull = sq_dist(anchor, positive);
    let push: f64 = negatives
        .iter()
        .map(|n| (cfg.margin_global - sq_dist(anchor, n)).max(0.0))
        .sum();
    Ok(pull + push)
}

pub fn loss_global_graph(g: &mut Graph, anchor: Var, positive: Var, negatives: &[Var], margin: f64) -> Var {
    let mut terms = vec![g.row_sq_dist(anchor, 0, positive, 0)];
    for &n in negatives {
        let d = g.row_sq_dist(anchor, 0, n, 0);
        terms.push(g.hinge(d, margin));
    }
    g.sum_scalars(&terms)
}

fn row_sq_dist(a: &Mat, i: usize, b: &Mat, j: usize) -> f64 {
    a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Contrastive loss over the selected pairs; the negatives of a pair are
/// the same-ID features of every negative image that has that ID usable.
pub fn loss_super(
    matches: &MatchSet,
    anchor: &SuperFeatureSet,
    positive: &SuperFeatureSet,
    negatives: &[SuperFeatureSet],
    cfg: &LossConfig,
) -> f64 {
    matches
        .pairs
        .iter()
        .map(|p| {
            let pull = row_sq_dist(&anchor.features, p.id, &positive.features, p.partner);
            let push: f64 = negatives
                .iter()
                .filter(|n| p.id < n.len() && n.is_usable(p.id))
                .map(|n| (cfg.margin_super - row_sq_dist(&anchor.features, p.id, &n.features, p.id)).max(0.0))
                .sum();
            pull + push
        })
        .sum()
}

/// Graph form of [`loss_super`]; `negatives` carries each negative's
/// feature node and usability mask.
pub fn loss_super_graph(
    g: &mut Graph,
    matches: &MatchSet,
    anchor: Var,
    positive: Var,
    negatives: &[(Var, Vec<bool>)],
    margin: f64,
) -> Var {
    let mut terms = Vec::new();
    for p in &matches.pairs {
        terms.push(g.row_sq_dist(anchor, p.id, positive, p.partner));
        for (n, usable) in negatives {
            if usable.get(p.id).copied().unwrap_or(false) {
                let d = g.row_sq_dist(anchor, p.id, *n, p.id);
                terms.push(g.hinge(d, margin));
            }
        }
    }
    g.sum_scalars(&terms)
}

/// Mean cosine similarity over ordered off-diagonal pairs of attention maps.
pub fn loss_attn(alpha: &AttentionMatrix) -> Result<f64> {
    let n = alpha.maps();
    if n < 2 {
        return Err(Error::invalid("decorrelation needs at least two attention maps"));
    }
    let norms: Vec<f64> = alpha.alpha.axis_iter(Axis(1)).map(|c| c.dot(&c).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&v| v < NORM_EPS) {
        return Err(Error::ZeroAttentionColumn(i));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += alpha.alpha.column(i).dot(&alpha.alpha.column(j)) / (norms[i] * norms[j]);
            }
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

pub fn loss_attn_graph(g: &mut Graph, alpha: Var) -> Result<Var> {
    let n = g.shape(alpha).1;
    if n < 2 {
        return Err(Error::invalid("decorrelation needs at least two attention maps"));
    }
    if let Some(i) = g
        .value(alpha)
        .axis_iter(Axis(1))
        .position(|c| c.dot(&c).sqrt() < NORM_EPS)
    {
        return Err(Error::ZeroAttentionColumn(i));
    }
    let normed = g.col_l2_normalize(alpha);
    let nt = g.transpose(normed);
    let gram = g.matmul(nt, normed);
    let total = g.sum(gram);
    // the diagonal of a unit-column gram matrix is exactly N
    let off = g.add_scalar(total, -(n as f64));
    Ok(g.scale(off, 1.0 / (n * (n - 1)) as f64))
}

/// Per-component values of one weighted training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub global: f64,
    pub super_: f64,
    pub attn: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, other: &LossBreakdown) {
        self.global += other.global;
        self.super_ += other.super_;
        self.attn += other.attn;
        self.total += other.total;
    }

    pub fn scaled(&self, k: f64) -> LossBreakdown {
        LossBreakdown {
            global: self.global * k,
            super_: self.super_ * k,
            attn: self.attn * k,
            total: self.total * k,
        }
    }
}

/// Everything one tuple contributes to the objective, as plain values.
#[derive(Clone, Debug)]
pub struct TupleOutputs {
    pub anchor: SuperFeatureSet,
    pub positive: SuperFeatureSet,
    pub negatives: Vec<SuperFeatureSet>,
    pub anchor_global: Array1<f64>,
    pub positive_global: Array1<f64>,
    pub negative_globals: Vec<Array1<f64>>,
    pub matches: MatchSet,
}

impl TupleOutputs {
    fn images(&self) -> impl Iterator<Item = &SuperFeatureSet> {
        std::iter::once(&self.anchor)
            .chain(std::iter::once(&self.positive))
            .chain(self.negatives.iter())
    }
}

/// `weight_super·L_super + weight_attn·L_attn (+ L_global)` summed over the
/// batch. The decorrelation term covers every image of a tuple. The
/// reported components are unweighted.
pub fn total_loss(batch: &[TupleOutputs], cfg: &LossConfig, toggles: LossToggles) -> Result<LossBreakdown> {
    let mut out = LossBreakdown::default();
    for t in batch {
        if toggles.use_global {
            out.global += loss_global(&t.anchor_global, &t.positive_global, &t.negative_globals, cfg)?;
        }
        if toggles.use_super {
            out.super_ += loss_super(&t.matches, &t.anchor, &t.positive, &t.negatives, cfg);
        }
        if toggles.use_attn {
            for img in t.images() {
                out.attn += loss_attn(&img.attention)?;
            }
        }
    }
    out.total = combine(&out, cfg, toggles);
    Ok(out)
}

/// Weighted total from unweighted components.
pub fn combine(parts: &LossBreakdown, cfg: &LossConfig, toggles: LossToggles) -> f64 {
    let mut total = 0.0;
    if toggles.use_global {
        total += parts.global;
    }
    if toggles.use_super {
        total += cfg.weight_super * parts.super_;
    }
    if toggles.use_attn {
        total += cfg.weight_attn * parts.attn;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::MatchPair;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> Array1<f64> {
        let a = Array1::from(v.to_vec());
        let n = a.dot(&a).sqrt();
        a / n
    }

    /// Unit vectors at a prescribed squared distance from e0.
    fn at_sq_dist(d2: f64) -> Array1<f64> {
        let c = 1.0 - d2 / 2.0;
        array![c, (1.0 - c * c).sqrt(), 0.0]
    }

    fn set_of(rows: &[Array1<f64>]) -> SuperFeatureSet {
        let d = rows[0].len();
        let mut m = Array2::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).assign(r);
        }
        SuperFeatureSet {
            features: m,
            strengths: vec![1.0; rows.len()],
            attention: AttentionMatrix {
                alpha: Array2::from_elem((1, rows.len()), 1.0),
            },
            scale: 1.0,
            grid: (1, 1),
        }
    }

    #[test]
    fn global_descriptor_single_feature_ignores_magnitude() {
        let w = WhiteningTransform::linear(array![[1.0, 2.0], [0.0, 1.0], [1.0, -1.0]]);
        let u = LocalFeatureSet {
            features: array![[3.0, 4.0]],
            width: 1,
            height: 1,
            scale: 1.0,
        };
        let g = global_descriptor(&u, &w).unwrap();
        let o = w.apply(&array![[3.0, 4.0]]).row(0).to_owned();
        let expected = &o / o.dot(&o).sqrt();
        assert!((&g - &expected).iter().all(|d| d.abs() < 1e-12));
        let doubled = LocalFeatureSet {
            features: array![[3.0, 4.0], [3.0, 4.0]],
            ..u
        };
        let g2 = global_descriptor(&doubled, &w).unwrap();
        assert!((&g2 - &g).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn global_descriptor_matches_two_loop_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let feats = Array2::from_shape_simple_fn((5, 7), || rng.gen_range(-1.0..1.0));
        let proj = Array2::from_shape_simple_fn((4, 7), || rng.gen_range(-1.0..1.0));
        let w = WhiteningTransform {
            mean: Array1::from_shape_simple_fn(7, || rng.gen_range(-0.5..0.5)),
            projection: proj,
        };
        let u = LocalFeatureSet {
            features: feats.clone(),
            width: 5,
            height: 1,
            scale: 1.0,
        };
        let mut acc = [0.0; 4];
        for l in 0..5 {
            let norm: f64 = (0..7).map(|j| feats[[l, j]].powi(2)).sum::<f64>().sqrt();
            for (k, a) in acc.iter_mut().enumerate() {
                let o: f64 = (0..7).map(|j| (feats[[l, j]] - w.mean[j]) * w.projection[[k, j]]).sum();
                *a += norm * o;
            }
        }
        let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        let g = global_descriptor(&u, &w).unwrap();
        for k in 0..4 {
            assert!((g[k] - acc[k] / n).abs() < 1e-12);
        }
        let mut gr = Graph::new();
        let uv = gr.constant(feats);
        let gv = global_descriptor_graph(&mut gr, uv, &w);
        assert!((gr.value(gv).row(0).to_owned() - &g).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn zero_descriptor_is_an_error() {
        let u = LocalFeatureSet {
            features: Array2::zeros((3, 2)),
            width: 3,
            height: 1,
            scale: 1.0,
        };
        assert!(matches!(
            global_descriptor(&u, &WhiteningTransform::identity(2)),
            Err(Error::ZeroDescriptor)
        ));
    }

    #[test]
    fn global_loss_examples() {
        let cfg = LossConfig::default();
        let e0 = unit(&[1.0, 0.0, 0.0]);
        let far = unit(&[-1.0, 0.0, 0.0]);
        assert_eq!(loss_global(&e0, &e0, &[far.clone(), far], &cfg).unwrap(), 0.0);
        assert!((loss_global(&e0, &e0, &[e0.clone()], &cfg).unwrap() - 0.75).abs() < 1e-15);
        let l = loss_global(&e0, &at_sq_dist(0.1), &[at_sq_dist(0.5)], &cfg).unwrap();
        assert!((l - 0.35).abs() < 1e-12, "{l}");
    }

    #[test]
    fn super_loss_examples() {
        let cfg = LossConfig::default();
        let e0 = unit(&[1.0, 0.0, 0.0]);
        let anchor = set_of(&[e0.clone()]);
        let empty = MatchSet::default();
        assert_eq!(loss_super(&empty, &anchor, &anchor, &[], &cfg), 0.0);

        let one = MatchSet {
            pairs: vec![MatchPair {
                id: 0,
                partner: 0,
                distance: 0.0,
            }],
            source: Default::default(),
        };
        let far = set_of(&[unit(&[-1.0, 0.0, 0.0])]);
        assert_eq!(loss_super(&one, &anchor, &anchor, &[far], &cfg), 0.0);

        let pos = set_of(&[at_sq_dist(0.2)]);
        let negs = [set_of(&[at_sq_dist(0.6)]), set_of(&[at_sq_dist(1.2)])];
        let l = loss_super(&one, &anchor, &pos, &negs, &cfg);
        assert!((l - 0.7).abs() < 1e-12, "{l}");

        let mut unusable = set_of(&[at_sq_dist(0.6)]);
        unusable.strengths[0] = 0.0;
        let l = loss_super(&one, &anchor, &pos, &[unusable], &cfg);
        assert!((l - 0.2).abs() < 1e-12);
    }

    #[test]
    fn attn_loss_examples() {
        let disjoint = AttentionMatrix {
            alpha: array![[1.0, 0.0], [0.0, 0.5], [0.0, 0.5]],
        };
        assert_eq!(loss_attn(&disjoint).unwrap(), 0.0);
        let same = AttentionMatrix {
            alpha: Array2::from_elem((4, 3), 0.25),
        };
        assert!((loss_attn(&same).unwrap() - 1.0).abs() < 1e-12);
        let pair = AttentionMatrix {
            alpha: array![[1.0, 1.0], [0.0, 1.0]],
        };
        assert!((loss_attn(&pair).unwrap() - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        let zero = AttentionMatrix {
            alpha: array![[1.0, 0.0], [0.0, 0.0]],
        };
        assert!(matches!(loss_attn(&zero), Err(Error::ZeroAttentionColumn(1))));
    }

    #[test]
    fn attn_loss_is_symmetric_under_id_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Array2::from_shape_simple_fn((6, 5), || rng.gen_range(0.0..1.0));
        let perm = [3, 0, 4, 1, 2];
        let p = Array2::from_shape_fn((6, 5), |(l, n)| a[[l, perm[n]]]);
        let x = loss_attn(&AttentionMatrix { alpha: a }).unwrap();
        let y = loss_attn(&AttentionMatrix { alpha: p }).unwrap();
        assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn graph_losses_agree_with_plain_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rand_set = |n: usize| {
            let rows: Vec<Array1<f64>> = (0..n)
                .map(|_| unit(&(0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
                .collect();
            let mut s = set_of(&rows);
            s.attention = AttentionMatrix {
                alpha: Array2::from_shape_simple_fn((7, n), || rng.gen_range(0.01..1.0)),
            };
            s
        };
        let anchor = rand_set(4);
        let positive = rand_set(4);
        let negatives = vec![rand_set(4), rand_set(4)];
        let cfg = LossConfig::default();
        let matches = MatchSet {
            pairs: vec![
                MatchPair {
                    id: 0,
                    partner: 2,
                    distance: 0.0,
                },
                MatchPair {
                    id: 3,
                    partner: 3,
                    distance: 0.0,
                },
            ],
            source: Default::default(),
        };
        let plain = loss_super(&matches, &anchor, &positive, &negatives, &cfg);
        let mut g = Graph::new();
        let a = g.constant(anchor.features.clone());
        let p = g.constant(positive.features.clone());
        let negs: Vec<(Var, Vec<bool>)> = negatives
            .iter()
            .map(|n| (g.constant(n.features.clone()), vec![true; 4]))
            .collect();
        let v = loss_super_graph(&mut g, &matches, a, p, &negs, cfg.margin_super);
        assert!((g.scalar(v) - plain).abs() < 1e-12);

        let al = g.constant(anchor.attention.alpha.clone());
        let la = loss_attn_graph(&mut g, al).unwrap();
        assert!((g.scalar(la) - loss_attn(&anchor.attention).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_toggles() {
        let cfg = LossConfig::default();
        let mut s = set_of(&[unit(&[1.0, 0.0]), unit(&[0.0, 1.0])]);
        s.attention = AttentionMatrix {
            alpha: Array2::from_elem((3, 2), 1.0 / 3.0),
        };
        let g = unit(&[1.0, 0.0]);
        let tuple = TupleOutputs {
            anchor: s.clone(),
            positive: s.clone(),
            negatives: vec![],
            anchor_global: g.clone(),
            positive_global: g.clone(),
            negative_globals: vec![],
            matches: MatchSet::default(),
        };
        let off = LossToggles {
            use_global: false,
            use_super: false,
            use_attn: false,
        };
        assert_eq!(total_loss(&[tuple.clone()], &cfg, off).unwrap().total, 0.0);
        let attn_only = LossToggles { use_attn: true, ..off };
        let mut single = tuple.clone();
        single.positive.attention.alpha = array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        let b = total_loss(&[single], &cfg, attn_only).unwrap();
        // anchor maps identical (1) and positive maps disjoint (0)
        assert!((b.total - cfg.weight_attn * 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            ratio_tau: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
