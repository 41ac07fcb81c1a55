//! The per-tuple training objective as a graph: match selection on current
//! values, then the enabled loss terms over the selected pairs.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{loss_attn_graph, loss_global_graph, loss_super_graph, LossBreakdown, LossConfig, LossToggles};
use crate::matching::{select_matches, MatchConstraints, MatchSet};
use crate::model::ImageNodes;

/// Graph and bookkeeping for one tuple.
#[derive(Clone, Debug)]
pub struct TupleObjective {
    pub total: Var,
    /// Unweighted component values.
    pub parts: LossBreakdown,
    /// Anchor-positive pairs driving the super-feature loss.
    pub matches: MatchSet,
    /// Measurement-only anchor-negative matches, one entry per negative.
    pub negative_matches: Vec<MatchSet>,
}

/// Builds the objective for `images = [anchor, positive, negatives..]`.
///
/// Pairs are selected from the current values unless `frozen` supplies
/// them. The decorrelation term is summed over every image of the tuple.
pub fn tuple_objective(
    g: &mut Graph,
    images: &[ImageNodes],
    ids: &[String],
    cfg: &LossConfig,
    toggles: LossToggles,
    constraints: MatchConstraints,
    frozen: Option<&MatchSet>,
) -> Result<TupleObjective> {
    if images.len() < 2 || ids.len() != images.len() {
        return Err(Error::invalid(
            "a tuple needs an anchor, a positive and one id per image",
        ));
    }
    let mut weighted = Vec::new();
    let mut parts = LossBreakdown::default();

    if toggles.use_global {
        let globals: Vec<Var> = images
            .iter()
            .map(|n| {
                n.global
                    .ok_or_else(|| Error::invalid("global loss needs descriptor nodes"))
            })
            .collect::<Result<_>>()?;
        let l = loss_global_graph(g, globals[0], globals[1], &globals[2..], cfg.margin_global);
        parts.global = g.scalar(l);
        weighted.push(l);
    }

    let lit: Option<Vec<_>> = images.iter().map(|n| n.lit).collect();
    let (mut matches, mut negative_matches) = (MatchSet::default(), Vec::new());
    if let Some(lit) = lit {
        let sets: Vec<_> = lit.iter().map(|n| n.snapshot(g, 1.0)).collect();
        let ratio = cfg.ratio_test();
        matches = match frozen {
            Some(m) => m.clone(),
            None => select_matches(&sets[0], &sets[1], ratio, constraints, (ids[0].clone(), ids[1].clone())),
        };
        negative_matches = sets[2..]
            .iter()
            .zip(&ids[2..])
            .map(|(neg, nid)| select_matches(&sets[0], neg, ratio, constraints, (ids[0].clone(), nid.clone())))
            .collect();
        if toggles.use_super {
            let negs: Vec<_> = lit[2..]
                .iter()
                .zip(&sets[2..])
                .map(|(n, s)| (n.features, (0..s.len()).map(|i| s.is_usable(i)).collect()))
                .collect();
            let l = loss_super_graph(g, &matches, lit[0].features, lit[1].features, &negs, cfg.margin_super);
            parts.super_ = g.scalar(l);
            weighted.push(g.scale(l, cfg.weight_super));
        }
        if toggles.use_attn {
            let mut terms = Vec::with_capacity(lit.len());
            for n in &lit {
                terms.push(loss_attn_graph(g, n.alpha)?);
            }
            let l = g.sum_scalars(&terms);
            parts.attn = g.scalar(l);
            weighted.push(g.scale(l, cfg.weight_attn));
        }
    } else if toggles.use_super || toggles.use_attn {
        return Err(Error::invalid("super-feature losses need LIT nodes for every image"));
    }

    let total = g.sum_scalars(&weighted);
    parts.total = g.scalar(total);
    Ok(TupleObjective {
        total,
        parts,
        matches,
        negative_matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::lit::LitConfig;
    use crate::loss::{combine, total_loss, TupleOutputs};
    use crate::model::Model;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Model, Vec<crate::encoder::ImageTensor>) {
        let enc = EncoderConfig {
            hidden_channels: [4, 8, 8],
            output_dim: 16,
            seed: 0,
        };
        let lit = LitConfig {
            templates: 4,
            dim: 16,
            input_dim: 16,
            iterations: 2,
            seed: 1,
            ..Default::default()
        };
        let model = Model::new(enc, lit, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let images = (0..4)
            .map(|i| {
                crate::encoder::ImageTensor::new(
                    format!("i{i}"),
                    Array3::from_shape_simple_fn((32, 32, 3), || rng.gen_range(0.0..1.0)),
                )
                .unwrap()
            })
            .collect();
        (model, images)
    }

    #[test]
    fn graph_objective_matches_value_losses() {
        let (model, images) = setup();
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let nodes: Vec<_> = images
            .iter()
            .map(|im| model.image_nodes(&mut g, &b, im, 1.0, true, true).unwrap())
            .collect();
        let ids: Vec<String> = images.iter().map(|i| i.id.clone()).collect();
        let toggles = LossToggles {
            use_global: true,
            use_super: true,
            use_attn: true,
        };
        let cfg = LossConfig::default();
        let obj = tuple_objective(&mut g, &nodes, &ids, &cfg, toggles, MatchConstraints::NONE, None).unwrap();

        let sets: Vec<_> = images.iter().map(|im| model.superfeatures(im, 1.0).unwrap()).collect();
        let globals: Vec<_> = images
            .iter()
            .map(|im| model.global_descriptor(im, 1.0).unwrap())
            .collect();
        let outputs = TupleOutputs {
            anchor: sets[0].clone(),
            positive: sets[1].clone(),
            negatives: sets[2..].to_vec(),
            anchor_global: globals[0].clone(),
            positive_global: globals[1].clone(),
            negative_globals: globals[2..].to_vec(),
            matches: obj.matches.clone(),
        };
        let expected = total_loss(&[outputs], &cfg, toggles).unwrap();
        assert!((expected.total - obj.parts.total).abs() < 1e-9);
        assert!((expected.super_ - obj.parts.super_).abs() < 1e-9);
        assert!((expected.attn - obj.parts.attn).abs() < 1e-9);
        assert!((combine(&obj.parts, &cfg, toggles) - obj.parts.total).abs() < 1e-9);
        assert_eq!(obj.negative_matches.len(), 2);
    }

    #[test]
    fn no_terms_gives_zero() {
        let (model, images) = setup();
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let nodes: Vec<_> = images[..3]
            .iter()
            .map(|im| model.image_nodes(&mut g, &b, im, 1.0, false, false).unwrap())
            .collect();
        let ids = vec!["a".to_string(), "b".into(), "c".into()];
        let toggles = LossToggles {
            use_global: false,
            use_super: false,
            use_attn: false,
        };
        let obj = tuple_objective(
            &mut g,
            &nodes,
            &ids,
            &LossConfig::default(),
            toggles,
            MatchConstraints::ALL,
            None,
        )
        .unwrap();
        assert_eq!(obj.parts.total, 0.0);
        assert!(obj.matches.is_empty());
    }
}
