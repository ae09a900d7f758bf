//! Random scene graphs shared by the integration tests.

#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::Rng;
use scenealign::{Attribute, Relation, SceneGraph};

pub const ENTITIES: &[&str] = &[
    "man", "woman", "dog", "ball", "tree", "car", "bench", "cup", "table", "window", "sky", "road",
];
pub const VALUES: &[&str] = &["red", "blue", "wooden", "tall", "small", "wet", "open", "parked"];
pub const PREDICATES: &[&str] = &["on", "near", "hold", "look at", "behind", "under", "ride"];

/// A valid graph with up to `max_entities` entities drawn from a small
/// vocabulary, so independent draws overlap.
pub fn random_graph<R: Rng>(rng: &mut R, max_entities: usize) -> SceneGraph {
    let n = rng.random_range(0..=max_entities.min(ENTITIES.len()));
    let entities: Vec<&str> = ENTITIES.choose_multiple(rng, n).copied().collect();
    let mut attributes = Vec::new();
    let mut relations = Vec::new();
    if !entities.is_empty() {
        for _ in 0..rng.random_range(0..=2 * n) {
            attributes.push(Attribute::new(*entities.choose(rng).unwrap(), *VALUES.choose(rng).unwrap()));
        }
        for _ in 0..rng.random_range(0..=2 * n) {
            relations.push(Relation::new(
                *entities.choose(rng).unwrap(),
                *PREDICATES.choose(rng).unwrap(),
                *entities.choose(rng).unwrap(),
            ));
        }
    }
    SceneGraph::from_parts(entities, attributes, relations).expect("generated graphs are closed")
}

/// A random closed subgraph of `g`.
pub fn random_subgraph<R: Rng>(rng: &mut R, g: &SceneGraph) -> SceneGraph {
    let entities: Vec<String> = g.entities().iter().filter(|_| rng.random_bool(0.6)).cloned().collect();
    let keep = |e: &str| entities.iter().any(|x| x == e);
    let attributes: Vec<Attribute> = g
        .attributes()
        .iter()
        .filter(|a| keep(&a.entity))
        .filter(|_| rng.random_bool(0.7))
        .cloned()
        .collect();
    let relations: Vec<Relation> = g
        .relations()
        .iter()
        .filter(|r| keep(&r.subject) && keep(&r.object))
        .filter(|_| rng.random_bool(0.7))
        .cloned()
        .collect();
    SceneGraph::from_parts(entities, attributes, relations).expect("subgraph is closed")
}
