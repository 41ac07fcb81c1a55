//! Super-feature pair selection across a positive image pair.
//!
//! Every anchor feature proposes its nearest neighbor in the other set; the
//! enabled constraints (reciprocity, ratio test, same ID) then filter those
//! proposals. Selection is not differentiated.

use serde::{Deserialize, Serialize};

use crate::graph::Mat;
use crate::lit::SuperFeatureSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioDirection {
    /// Admit when `‖s − s′‖ ≤ τ · ‖s′ − second‖`.
    StandardLowe,
    /// Admit when `‖s − s′‖ ≥ τ · ‖s′ − second‖`.
    AsPrinted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConstraints {
    pub reciprocal: bool,
    pub ratio: bool,
    pub same_id: bool,
}

impl MatchConstraints {
    pub const ALL: Self = Self {
        reciprocal: true,
        ratio: true,
        same_id: true,
    };
    pub const NONE: Self = Self {
        reciprocal: false,
        ratio: false,
        same_id: false,
    };

    /// The eight on/off combinations.
    pub fn grid() -> Vec<Self> {
        (0..8u8)
            .map(|m| Self {
                reciprocal: m & 1 != 0,
                ratio: m & 2 != 0,
                same_id: m & 4 != 0,
            })
            .collect()
    }

    /// True when every constraint enabled in `self` is enabled in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        (!self.reciprocal || other.reciprocal) && (!self.ratio || other.ratio) && (!self.same_id || other.same_id)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.reciprocal {
            parts.push("reciprocal");
        }
        if self.ratio {
            parts.push("ratio");
        }
        if self.same_id {
            parts.push("same-id");
        }
        if parts.is_empty() {
            "nearest-neighbor".to_string()
        } else {
            parts.join("+")
        }
    }
}

impl Default for MatchConstraints {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchPair {
    /// Super-feature ID on the anchor side.
    pub id: usize,
    /// Index of the matched feature in the other set.
    pub partner: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MatchSet {
    pub pairs: Vec<MatchPair>,
    pub source: (String, String),
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.id).collect()
    }

    /// `(id, partner)` tuples, ordered by ID.
    pub fn links(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().map(|p| (p.id, p.partner)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatioTest {
    pub tau: f64,
    pub direction: RatioDirection,
}

fn euclidean(a: &Mat, i: usize, b: &Mat, j: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(b.row(j))
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Index of the smallest entry; lowest index wins exact ties.
fn argmin(values: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    values.fold(None, |best, (i, d)| match best {
        Some((_, bd)) if bd <= d => best,
        _ => Some((i, d)),
    })
}

/// Pair selection over raw feature matrices with usability masks.
pub fn select_pairs(
    anchor: &Mat,
    anchor_usable: &[bool],
    other: &Mat,
    other_usable: &[bool],
    ratio: RatioTest,
    constraints: MatchConstraints,
) -> Vec<MatchPair> {
    let (n, m) = (anchor.nrows(), other.nrows());
    let mut dist = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            dist[i * m + j] = euclidean(anchor, i, other, j);
        }
    }
    let d = |i: usize, j: usize| dist[i * m + j];
    let mut pairs = Vec::new();
    for i in (0..n).filter(|&i| anchor_usable[i]) {
        let Some((j, dij)) = argmin((0..m).filter(|&j| other_usable[j]).map(|j| (j, d(i, j)))) else {
            continue;
        };
        if constraints.same_id && i != j {
            continue;
        }
        if constraints.reciprocal {
            let back = argmin((0..n).filter(|&k| anchor_usable[k]).map(|k| (k, d(k, j))));
            if back.map(|(k, _)| k) != Some(i) {
                continue;
            }
        }
        if constraints.ratio {
            let second = (0..n)
                .filter(|&k| k != i && anchor_usable[k])
                .map(|k| d(k, j))
                .fold(f64::INFINITY, f64::min);
            let pass = match ratio.direction {
                RatioDirection::StandardLowe => dij <= ratio.tau * second,
                RatioDirection::AsPrinted => dij >= ratio.tau * second,
            };
            if !pass {
                continue;
            }
        }
        pairs.push(MatchPair {
            id: i,
            partner: j,
            distance: dij,
        });
    }
    pairs
}

fn usable_mask(s: &SuperFeatureSet) -> Vec<bool> {
    (0..s.len()).map(|i| s.is_usable(i)).collect()
}

pub fn select_matches(
    s: &SuperFeatureSet,
    s_other: &SuperFeatureSet,
    ratio: RatioTest,
    constraints: MatchConstraints,
    source: (String, String),
) -> MatchSet {
    MatchSet {
        pairs: select_pairs(
            &s.features,
            &usable_mask(s),
            &s_other.features,
            &usable_mask(s_other),
            ratio,
            constraints,
        ),
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LOWE: RatioTest = RatioTest {
        tau: 0.9,
        direction: RatioDirection::StandardLowe,
    };

    fn unit_rows(rows: &[Vec<f64>]) -> Mat {
        let n = rows.len();
        let d = rows[0].len();
        let mut m = Array2::zeros((n, d));
        for (i, r) in rows.iter().enumerate() {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (j, v) in r.iter().enumerate() {
                m[[i, j]] = v / norm;
            }
        }
        m
    }

    fn random_unit(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Mat {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        unit_rows(&rows)
    }

    /// Literal check of the selection rule for every (i, j) pair using
    /// squared distances.
    fn oracle(a: &Mat, b: &Mat, ratio: RatioTest, c: MatchConstraints) -> Vec<(usize, usize)> {
        let sq = |x: &Mat, i: usize, y: &Mat, j: usize| -> f64 {
            (0..x.ncols()).map(|k| (x[[i, k]] - y[[j, k]]).powi(2)).sum()
        };
        let nn = |q: &Mat, qi: usize, set: &Mat, skip: Option<usize>| -> Option<usize> {
            let mut best: Option<(usize, f64)> = None;
            for k in 0..set.nrows() {
                if Some(k) == skip {
                    continue;
                }
                let dk = sq(q, qi, set, k);
                if best.map_or(true, |(_, bd)| dk < bd) {
                    best = Some((k, dk));
                }
            }
            best.map(|(k, _)| k)
        };
        let mut out = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..b.nrows() {
                if nn(a, i, b, None) != Some(j) {
                    continue;
                }
                if c.reciprocal && nn(b, j, a, None) != Some(i) {
                    continue;
                }
                if c.same_id && i != j {
                    continue;
                }
                if c.ratio {
                    let first = sq(a, i, b, j).sqrt();
                    let second = nn(b, j, a, Some(i)).map_or(f64::INFINITY, |k| sq(a, k, b, j).sqrt());
                    let ok = match ratio.direction {
                        RatioDirection::StandardLowe => first <= ratio.tau * second,
                        RatioDirection::AsPrinted => first >= ratio.tau * second,
                    };
                    if !ok {
                        continue;
                    }
                }
                out.push((i, j));
            }
        }
        out
    }

    fn links(p: &[MatchPair]) -> Vec<(usize, usize)> {
        p.iter().map(|m| (m.id, m.partner)).collect()
    }

    #[test]
    fn identical_sets_match_every_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_unit(6, 8, &mut rng);
        let mask = vec![true; 6];
        let pairs = select_pairs(&a, &mask, &a, &mask, LOWE, MatchConstraints::ALL);
        assert_eq!(pairs.len(), 6);
        assert!(pairs
            .iter()
            .enumerate()
            .all(|(i, p)| p.id == i && p.partner == i && p.distance == 0.0));
    }

    #[test]
    fn crossed_ids_are_filtered() {
        // b is a cyclic shift of a: every nearest neighbor has another ID
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_unit(5, 8, &mut rng);
        let b = Array2::from_shape_fn((5, 8), |(i, k)| a[[(i + 1) % 5, k]]);
        let mask = vec![true; 5];
        assert!(select_pairs(&a, &mask, &b, &mask, LOWE, MatchConstraints::ALL).is_empty());
        let no_id = MatchConstraints {
            same_id: false,
            ..MatchConstraints::ALL
        };
        assert_eq!(select_pairs(&a, &mask, &b, &mask, LOWE, no_id).len(), 5);
    }

    #[test]
    fn planted_three_feature_instance() {
        let a = unit_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let b = unit_rows(&[vec![1.0, 0.05, 0.0], vec![0.02, 1.0, 0.03], vec![1.0, 0.0, 0.1]]);
        let mask = vec![true; 3];
        let all = select_pairs(&a, &mask, &b, &mask, LOWE, MatchConstraints::ALL);
        assert_eq!(links(&all), vec![(0, 0), (1, 1)]);
        for c in MatchConstraints::grid() {
            let got = links(&select_pairs(&a, &mask, &b, &mask, LOWE, c));
            assert_eq!(got, oracle(&a, &b, LOWE, c), "{}", c.label());
        }
    }

    #[test]
    fn unusable_features_are_excluded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_unit(4, 6, &mut rng);
        let mut mask = vec![true; 4];
        mask[2] = false;
        let pairs = select_pairs(&a, &mask, &a, &mask, LOWE, MatchConstraints::ALL);
        assert_eq!(pairs.iter().map(|p| p.id).collect::<Vec<_>>(), vec![0, 1, 3]);
    }

    #[test]
    fn as_printed_direction_keeps_ambiguous_matches() {
        // two anchor features equally close to the single other feature
        let a = unit_rows(&[vec![1.0, 0.1], vec![1.0, -0.1]]);
        let b = unit_rows(&[vec![1.0, 0.0]]);
        let mut mask_b = vec![true];
        let c = MatchConstraints {
            reciprocal: false,
            ratio: true,
            same_id: false,
        };
        let printed = RatioTest {
            tau: 0.9,
            direction: RatioDirection::AsPrinted,
        };
        assert_eq!(select_pairs(&a, &[true, true], &b, &mask_b, LOWE, c).len(), 0);
        assert_eq!(select_pairs(&a, &[true, true], &b, &mask_b, printed, c).len(), 2);
        mask_b[0] = false;
        assert!(select_pairs(&a, &[true, true], &b, &mask_b, printed, c).is_empty());
    }

    proptest! {
        #[test]
        fn matches_oracle_and_is_monotone(seed in 0u64..10_000, n in 1usize..12, noise in 0.0f64..1.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_unit(n, 6, &mut rng);
            let jitter = random_unit(n, 6, &mut rng);
            let b = unit_rows(&(0..n).map(|i| (0..6).map(|k| a[[i, k]] + noise * jitter[[i, k]]).collect()).collect::<Vec<_>>());
            let mask = vec![true; n];
            let grid = MatchConstraints::grid();
            let sets: Vec<Vec<(usize, usize)>> = grid.iter().map(|&c| links(&select_pairs(&a, &mask, &b, &mask, LOWE, c))).collect();
            for (c, got) in grid.iter().zip(&sets) {
                prop_assert_eq!(got, &oracle(&a, &b, LOWE, *c));
                let mut ids: Vec<usize> = got.iter().map(|p| p.0).collect();
                ids.dedup();
                prop_assert_eq!(ids.len(), got.len());
                prop_assert!(got.len() <= n);
            }
            for (ci, si) in grid.iter().zip(&sets) {
                for (cj, sj) in grid.iter().zip(&sets) {
                    if ci.is_subset_of(cj) {
                        prop_assert!(sj.iter().all(|p| si.contains(p)));
                    }
                }
            }
        }

        #[test]
        fn ratio_test_is_scale_invariant(seed in 0u64..10_000, k in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_unit(8, 5, &mut rng);
            let b = random_unit(8, 5, &mut rng);
            let mask = vec![true; 8];
            let c = MatchConstraints { reciprocal: true, ratio: true, same_id: false };
            let base = links(&select_pairs(&a, &mask, &b, &mask, LOWE, c));
            let scaled = links(&select_pairs(&(&a * k), &mask, &(&b * k), &mask, LOWE, c));
            prop_assert_eq!(base, scaled);
        }
    }
}
