//! Scene-graph grounded preference data construction.
//!
//! The crate turns (image, question, scene graph) instances into
//! `(context, chosen, rejected)` preference records:
//!
//! 1. a positive rationale is generated from the scene graph,
//! 2. the rationale-referenced subgraph is extracted ([`grounding`]),
//! 3. that subgraph is structurally perturbed and reattached to the rest of
//!    the scene ([`perturb`]),
//! 4. negatives are filtered by scene-graph overlap and diversified in
//!    rationale-embedding space ([`select`], [`embed`]),
//! 5. records are assembled and the DPO objective can be evaluated over them
//!    ([`dpo`]).
//!
//! [`pipeline`] drives all stages over a corpus.

pub mod diag;
pub mod dpo;
pub mod embed;
pub mod generate;
pub mod grounding;
#[cfg(feature = "http")]
pub mod http;
pub mod perturb;
pub mod pipeline;
pub mod sample;
pub mod scene_graph;
pub mod select;

pub use diag::Diagnostic;
pub use scene_graph::{Attribute, Element, ElementKind, ElementRef, Jaccard, Relation, SceneGraph};
