//! Randomized invariants over scene graphs, overlap and perturbation.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scenealign::grounding::residual_pool;
use scenealign::perturb::{generate_negatives, recompose, NegativeConfig, OverthinkMode};
use scenealign::scene_graph::{jaccard_overlap, parse_scene_graph, serialize_scene_graph};
use scenealign::SceneGraph;

fn graph_pair(seed: u64) -> (SceneGraph, SceneGraph) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos = common::random_graph(&mut rng, 8);
    let sub = common::random_subgraph(&mut rng, &pos);
    (pos, sub)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn json_round_trip(seed in any::<u64>()) {
        let (g, _) = graph_pair(seed);
        prop_assert_eq!(parse_scene_graph(&g.to_json()).unwrap(), g.clone());
        prop_assert_eq!(parse_scene_graph(&g.to_canonical_json()).unwrap(), g);
    }

    #[test]
    fn canonical_form_is_idempotent(seed in any::<u64>()) {
        let (g, _) = graph_pair(seed);
        let once = serialize_scene_graph(&g, true);
        let twice = serialize_scene_graph(&parse_scene_graph(&once).unwrap(), true);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn jaccard_is_symmetric_and_bounded(a in any::<u64>(), b in any::<u64>()) {
        let (g, _) = graph_pair(a);
        let (h, _) = graph_pair(b);
        let (x, y) = (jaccard_overlap(&g, &h), jaccard_overlap(&h, &g));
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x.value()));
        prop_assert!(x.shared <= x.union);
    }

    #[test]
    fn recomposing_the_unedited_subgraph_restores_the_graph(seed in any::<u64>()) {
        let (pos, sub) = graph_pair(seed);
        let pool = residual_pool(&pos, &sub).unwrap();
        prop_assert_eq!(recompose(&sub, &pool), pos);
    }

    #[test]
    fn sampled_negatives_are_valid_and_differ(seed in any::<u64>(), absorb in any::<bool>()) {
        let (pos, sub) = graph_pair(seed);
        let pool = residual_pool(&pos, &sub).unwrap();
        let cfg = NegativeConfig {
            overthink: if absorb { OverthinkMode::PromptContext } else { OverthinkMode::Reject },
            ..NegativeConfig::default()
        };
        let Ok(set) = generate_negatives(&pos, &sub, &pool, &cfg, seed) else { return Ok(()) };
        prop_assert!(set.candidates.len() <= cfg.candidates);
        for c in &set.candidates {
            prop_assert!(c.graph.validate().is_ok());
            prop_assert!(!c.trace.ops.is_empty() && c.trace.ops.len() <= cfg.edits.hi);
            match &c.prompt_graph {
                Some(p) => {
                    prop_assert!(p.validate().is_ok());
                    prop_assert_ne!(p, &sub);
                }
                None => prop_assert_ne!(&c.graph, &pos),
            }
        }
    }
}
