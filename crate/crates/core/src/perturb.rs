//! Structural perturbations of the grounded subgraph.
//!
//! Four operators model distinct grounding failures:
//!
//! * **swap** exchanges the subject and object of a relation (role mis-binding),
//! * **replace** substitutes an entity, attribute value or predicate with one
//!   drawn from the residual pool (hallucination-like substitution),
//! * **shorten** deletes an element, cascading entity deletions to incident
//!   attributes and relations (skipped evidence),
//! * **overthink** adds a pool element, with its endpoint entities
//!   (over-specification).
//!
//! A negative graph is the perturbed subgraph reattached to the unperturbed
//! remainder via [`recompose`]. [`generate_negatives`] samples compound edits
//! in "mix" mode, uniformly over the operators applicable at each step.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diag::Diagnostic;
use crate::embed::Embedding;
use crate::grounding::{Rationale, ResidualPool};
use crate::scene_graph::{
    Attribute, Element, ElementKind, ElementRef, GraphError, Jaccard, Relation, SceneGraph,
};

/// Draws per replacement before giving up on collisions.
const REPLACE_DRAWS: usize = 8;
/// Operator re-draws per edit step before the step is abandoned.
const EDIT_RETRIES: usize = 8;
/// Generation attempts per requested candidate.
const ATTEMPTS_PER_CANDIDATE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PerturbError {
    #[error("{kind:?} index {index} out of range")]
    IndexOutOfRange { kind: ElementKind, index: usize },
    #[error("swap of a reflexive relation is a no-op")]
    NoOpSwap,
    #[error("residual pool has no {0:?} candidates")]
    EmptyPoolForKind(ElementKind),
    #[error("residual pool is empty")]
    EmptyPool,
    #[error("substitution collides with existing element {0}")]
    DuplicateCollision(String),
    #[error("removal would leave an empty graph")]
    WouldEmpty,
    #[error("replacement kind {payload:?} does not match target kind {target:?}")]
    KindMismatch { target: ElementKind, payload: ElementKind },
    #[error("no operator applies to the grounded subgraph")]
    NoApplicableOperator,
    #[error("{0} is not applicable here")]
    NotApplicable(OpTag),
    #[error("perturbation is absorbed by recomposition (negative equals the positive graph)")]
    Absorbed,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpTag {
    Swap,
    Replace,
    Shorten,
    Overthink,
}

impl OpTag {
    pub const ALL: [OpTag; 4] = [OpTag::Swap, OpTag::Replace, OpTag::Shorten, OpTag::Overthink];

    pub fn as_str(self) -> &'static str {
        match self {
            OpTag::Swap => "swap",
            OpTag::Replace => "replace",
            OpTag::Shorten => "shorten",
            OpTag::Overthink => "overthink",
        }
    }
}

impl fmt::Display for OpTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OpTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpTag::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown operator {s:?} (expected swap, replace, shorten or overthink)"))
    }
}

/// One applied edit. `target` addresses the subgraph as it was before this
/// edit; for a relation target under `replace` only the predicate changes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationOp {
    pub tag: OpTag,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target: Option<ElementRef>,
    /// Residual-pool element used by replace/overthink.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub payload: Option<Element>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub before: Option<Element>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub after: Option<Element>,
}

/// A perturbed graph and the edit that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edited {
    pub graph: SceneGraph,
    pub op: PerturbationOp,
}

fn out_of_range(at: ElementRef) -> PerturbError {
    PerturbError::IndexOutOfRange {
        kind: at.kind,
        index: at.index,
    }
}

/// (e_i, r, e_j) → (e_j, r, e_i).
pub fn swap(sg_c: &SceneGraph, rel: usize) -> Result<Edited, PerturbError> {
    let target = ElementRef::relation(rel);
    let old = sg_c.relations().get_index(rel).ok_or_else(|| out_of_range(target))?;
    if old.subject == old.object {
        return Err(PerturbError::NoOpSwap);
    }
    let new = old.swapped();
    if sg_c.relations().contains(&new) {
        return Err(PerturbError::DuplicateCollision(new.to_string()));
    }
    let mut graph = sg_c.clone();
    graph.set_relation(rel, new.clone())?;
    Ok(Edited {
        graph,
        op: PerturbationOp {
            tag: OpTag::Swap,
            target: Some(target),
            payload: None,
            before: Some(Element::Relation(old.clone())),
            after: Some(Element::Relation(new)),
        },
    })
}

/// Replaces the target with material from `replacement`, a residual-pool
/// element of the same kind: an entity is renamed everywhere it occurs, an
/// attribute takes the pool attribute's value, a relation takes the pool
/// relation's predicate.
pub fn replace_with(
    sg_c: &SceneGraph,
    target: ElementRef,
    replacement: &Element,
) -> Result<Edited, PerturbError> {
    if replacement.kind() != target.kind {
        return Err(PerturbError::KindMismatch {
            target: target.kind,
            payload: replacement.kind(),
        });
    }
    let before = sg_c.element(target).map_err(|_| out_of_range(target))?;
    let mut graph = sg_c.clone();
    let after = match (&before, replacement) {
        (Element::Entity { name: old }, Element::Entity { name: new }) => {
            if graph.has_entity(new) {
                return Err(PerturbError::DuplicateCollision(format!("{new:?}")));
            }
            graph.rename_entity(old, new)?;
            Element::entity(new.clone())
        }
        (Element::Attribute(old), Element::Attribute(pool_attr)) => {
            let new = Attribute::new(old.entity.clone(), pool_attr.value.clone());
            if graph.attributes().contains(&new) {
                return Err(PerturbError::DuplicateCollision(Element::Attribute(new).to_string()));
            }
            graph.set_attribute(target.index, new.clone())?;
            Element::Attribute(new)
        }
        (Element::Relation(old), Element::Relation(pool_rel)) => {
            let new = Relation::new(old.subject.clone(), pool_rel.predicate.clone(), old.object.clone());
            if graph.relations().contains(&new) {
                return Err(PerturbError::DuplicateCollision(new.to_string()));
            }
            graph.set_relation(target.index, new.clone())?;
            Element::Relation(new)
        }
        _ => unreachable!("kinds checked above"),
    };
    Ok(Edited {
        graph,
        op: PerturbationOp {
            tag: OpTag::Replace,
            target: Some(target),
            payload: Some(replacement.clone()),
            before: Some(before),
            after: Some(after),
        },
    })
}

fn pool_of_kind(pool: &ResidualPool, kind: ElementKind) -> Vec<Element> {
    match kind {
        ElementKind::Entity => pool.entities.iter().map(|e| Element::entity(e.clone())).collect(),
        ElementKind::Attribute => pool.attributes.iter().cloned().map(Element::Attribute).collect(),
        ElementKind::Relation => pool.relations.iter().cloned().map(Element::Relation).collect(),
    }
}

/// Replaces the target with a randomly drawn pool element of the same kind,
/// re-drawing on collisions up to 8 times.
pub fn replace<R: Rng + ?Sized>(
    sg_c: &SceneGraph,
    target: ElementRef,
    pool: &ResidualPool,
    rng: &mut R,
) -> Result<Edited, PerturbError> {
    sg_c.element(target).map_err(|_| out_of_range(target))?;
    let candidates = pool_of_kind(pool, target.kind);
    if candidates.is_empty() {
        return Err(PerturbError::EmptyPoolForKind(target.kind));
    }
    let mut last = PerturbError::EmptyPoolForKind(target.kind);
    for _ in 0..REPLACE_DRAWS {
        let pick = &candidates[rng.random_range(0..candidates.len())];
        match replace_with(sg_c, target, pick) {
            Ok(e) => return Ok(e),
            Err(e @ PerturbError::DuplicateCollision(_)) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

/// Removes the target; entity removal cascades to incident attributes and
/// relations.
pub fn shorten(sg_c: &SceneGraph, target: ElementRef) -> Result<Edited, PerturbError> {
    let before = sg_c.element(target).map_err(|_| out_of_range(target))?;
    let mut graph = sg_c.clone();
    match &before {
        Element::Entity { name } => {
            graph.remove_entity(name);
        }
        Element::Attribute(a) => {
            graph.remove_attribute(a);
        }
        Element::Relation(r) => {
            graph.remove_relation(r);
        }
    }
    if graph.is_empty() {
        return Err(PerturbError::WouldEmpty);
    }
    Ok(Edited {
        graph,
        op: PerturbationOp {
            tag: OpTag::Shorten,
            target: Some(target),
            payload: None,
            before: Some(before),
            after: None,
        },
    })
}

/// Adds `element` (taken from the pool) plus any endpoint entity it needs.
pub fn overthink_with(sg_c: &SceneGraph, element: &Element) -> Result<Edited, PerturbError> {
    if sg_c.contains(element) {
        return Err(PerturbError::DuplicateCollision(element.to_string()));
    }
    let mut graph = sg_c.clone();
    graph.insert_with_closure(element.clone())?;
    Ok(Edited {
        graph,
        op: PerturbationOp {
            tag: OpTag::Overthink,
            target: None,
            payload: Some(element.clone()),
            before: None,
            after: Some(element.clone()),
        },
    })
}

/// Adds a uniformly drawn pool element not already in the subgraph.
pub fn overthink<R: Rng + ?Sized>(
    sg_c: &SceneGraph,
    pool: &ResidualPool,
    rng: &mut R,
) -> Result<Edited, PerturbError> {
    if pool.is_empty() {
        return Err(PerturbError::EmptyPool);
    }
    let fresh: Vec<Element> = pool.elements().filter(|e| !sg_c.contains(e)).collect();
    if fresh.is_empty() {
        return Err(PerturbError::NotApplicable(OpTag::Overthink));
    }
    overthink_with(sg_c, &fresh[rng.random_range(0..fresh.len())])
}

/// SG⁻ = perturbed ⊕ remainder: element-wise union. Entities a remainder
/// element needs but the perturbed subgraph dropped or renamed are re-added.
pub fn recompose(perturbed_c: &SceneGraph, remainder: &ResidualPool) -> SceneGraph {
    let mut graph = perturbed_c.clone();
    for element in remainder.elements() {
        graph
            .insert_with_closure(element)
            .expect("pool elements carry non-empty names");
    }
    graph
}

/// An explicit edit for [`build_negative`]. Missing target/payload are drawn
/// at random.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedEdit {
    pub tag: OpTag,
    pub target: Option<ElementRef>,
    pub payload: Option<Element>,
}

impl PlannedEdit {
    pub fn random(tag: OpTag) -> Self {
        Self {
            tag,
            target: None,
            payload: None,
        }
    }
}

fn swappable(g: &SceneGraph) -> Vec<usize> {
    g.relations()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.subject != r.object && !g.relations().contains(&r.swapped()))
        .map(|(i, _)| i)
        .collect()
}

fn replaceable_kinds(g: &SceneGraph, pool: &ResidualPool) -> Vec<ElementKind> {
    let mut kinds = Vec::new();
    if !g.entities().is_empty() && pool.entities.iter().any(|e| !g.has_entity(e)) {
        kinds.push(ElementKind::Entity);
    }
    if !g.attributes().is_empty() && !pool.attributes.is_empty() {
        kinds.push(ElementKind::Attribute);
    }
    if !g.relations().is_empty() && !pool.relations.is_empty() {
        kinds.push(ElementKind::Relation);
    }
    kinds
}

/// Whether `tag` can (possibly) produce an edit on `g`.
pub fn is_applicable(tag: OpTag, g: &SceneGraph, pool: &ResidualPool) -> bool {
    match tag {
        OpTag::Swap => !swappable(g).is_empty(),
        OpTag::Replace => !replaceable_kinds(g, pool).is_empty(),
        OpTag::Shorten => g.element_count() >= 2,
        OpTag::Overthink => pool.elements().any(|e| !g.contains(&e)),
    }
}

fn kind_len(g: &SceneGraph, kind: ElementKind) -> usize {
    match kind {
        ElementKind::Entity => g.entities().len(),
        ElementKind::Attribute => g.attributes().len(),
        ElementKind::Relation => g.relations().len(),
    }
}

/// Applies one planned edit; unset targets and payloads are drawn from `rng`.
pub fn apply_edit<R: Rng + ?Sized>(
    g: &SceneGraph,
    edit: &PlannedEdit,
    pool: &ResidualPool,
    rng: &mut R,
) -> Result<Edited, PerturbError> {
    match edit.tag {
        OpTag::Swap => {
            let rel = match edit.target {
                Some(t) if t.kind == ElementKind::Relation => t.index,
                Some(t) => return Err(PerturbError::KindMismatch { target: ElementKind::Relation, payload: t.kind }),
                None => {
                    let eligible = swappable(g);
                    if eligible.is_empty() {
                        return Err(PerturbError::NotApplicable(OpTag::Swap));
                    }
                    eligible[rng.random_range(0..eligible.len())]
                }
            };
            swap(g, rel)
        }
        OpTag::Replace => {
            let target = match edit.target {
                Some(t) => t,
                None => {
                    let kinds = replaceable_kinds(g, pool);
                    if kinds.is_empty() {
                        return Err(PerturbError::NotApplicable(OpTag::Replace));
                    }
                    let kind = kinds[rng.random_range(0..kinds.len())];
                    ElementRef {
                        kind,
                        index: rng.random_range(0..kind_len(g, kind)),
                    }
                }
            };
            match &edit.payload {
                Some(p) => replace_with(g, target, p),
                None => replace(g, target, pool, rng),
            }
        }
        OpTag::Shorten => {
            let target = match edit.target {
                Some(t) => t,
                None => {
                    let n = g.element_count();
                    if n < 2 {
                        return Err(PerturbError::WouldEmpty);
                    }
                    let mut i = rng.random_range(0..n);
                    let mut kind = ElementKind::Entity;
                    for k in [ElementKind::Entity, ElementKind::Attribute, ElementKind::Relation] {
                        kind = k;
                        if i < kind_len(g, k) {
                            break;
                        }
                        i -= kind_len(g, k);
                    }
                    ElementRef { kind, index: i }
                }
            };
            shorten(g, target)
        }
        OpTag::Overthink => match &edit.payload {
            Some(p) => overthink_with(g, p),
            None => overthink(g, pool, rng),
        },
    }
}

/// Ordered edits applied to one negative, and the seed that drove sampling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditTrace {
    pub ops: Vec<PerturbationOp>,
    pub seed: u64,
}

impl EditTrace {
    /// `"swap"`, or `"replace+shorten"` for compound edits.
    pub fn operator_label(&self) -> String {
        self.ops.iter().map(|o| o.tag.as_str()).collect::<Vec<_>>().join("+")
    }

    /// Only predicates were replaced; such edits leave the overlap unchanged.
    pub fn predicate_only(&self) -> bool {
        !self.ops.is_empty()
            && self.ops.iter().all(|o| {
                o.tag == OpTag::Replace && o.target.is_some_and(|t| t.kind == ElementKind::Relation)
            })
    }
}

/// What to do with an overthink-only edit that recomposition absorbs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverthinkMode {
    /// Drop the candidate and re-sample.
    #[default]
    Reject,
    /// Keep it; the negative rationale is prompted with the perturbed
    /// subgraph instead of the recomposed graph.
    PromptContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeCandidate {
    /// Full recomposed graph SG⁻.
    pub graph: SceneGraph,
    pub trace: EditTrace,
    /// Set under [`OverthinkMode::PromptContext`] for absorbed edits.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub prompt_graph: Option<SceneGraph>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub jaccard: Option<Jaccard>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rationale: Option<Rationale>,
    #[serde(skip)]
    pub embedding: Option<Embedding>,
}

impl NegativeCandidate {
    /// Graph the negative rationale is generated from.
    pub fn graph_for_prompt(&self) -> &SceneGraph {
        self.prompt_graph.as_ref().unwrap_or(&self.graph)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRange {
    pub lo: usize,
    pub hi: usize,
}

impl Default for EditRange {
    fn default() -> Self {
        Self { lo: 1, hi: 3 }
    }
}

impl std::str::FromStr for EditRange {
    type Err = String;

    /// `"2"` or `"1..3"` (inclusive).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("bad edit count {t:?}: {e}"));
        let (lo, hi) = match s.split_once("..") {
            Some((a, b)) => (parse(a)?, parse(b.trim_start_matches('='))?),
            None => {
                let n = parse(s)?;
                (n, n)
            }
        };
        Ok(Self { lo, hi })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeConfig {
    /// k, candidates per instance.
    pub candidates: usize,
    pub edits: EditRange,
    pub overthink: OverthinkMode,
}

impl Default for NegativeConfig {
    fn default() -> Self {
        Self {
            candidates: 8,
            edits: EditRange::default(),
            overthink: OverthinkMode::Reject,
        }
    }
}

impl NegativeConfig {
    pub fn validate(&self) -> Result<(), PerturbError> {
        if self.candidates == 0 {
            return Err(PerturbError::InvalidConfig("candidate count must be at least 1".into()));
        }
        if self.edits.lo == 0 || self.edits.lo > self.edits.hi {
            return Err(PerturbError::InvalidConfig(format!(
                "edit range {}..{} must satisfy 1 <= lo <= hi",
                self.edits.lo, self.edits.hi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NegativeSet {
    pub candidates: Vec<NegativeCandidate>,
    pub diagnostics: Vec<Diagnostic>,
}

fn finish(
    sg_pos: &SceneGraph,
    sg_c: &SceneGraph,
    working: SceneGraph,
    pool: &ResidualPool,
    ops: Vec<PerturbationOp>,
    seed: u64,
    mode: OverthinkMode,
) -> Result<NegativeCandidate, PerturbError> {
    let graph = recompose(&working, pool);
    let prompt_graph = if graph == *sg_pos {
        match mode {
            OverthinkMode::PromptContext if working != *sg_c => Some(working),
            _ => return Err(PerturbError::Absorbed),
        }
    } else {
        None
    };
    Ok(NegativeCandidate {
        graph,
        trace: EditTrace { ops, seed },
        prompt_graph,
        jaccard: None,
        rationale: None,
        embedding: None,
    })
}

/// Applies `plan` in order to the grounded subgraph and recomposes.
pub fn build_negative(
    sg_pos: &SceneGraph,
    sg_c: &SceneGraph,
    pool: &ResidualPool,
    plan: &[PlannedEdit],
    mode: OverthinkMode,
    seed: u64,
) -> Result<NegativeCandidate, PerturbError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut working = sg_c.clone();
    let mut ops = Vec::with_capacity(plan.len());
    for edit in plan {
        let edited = apply_edit(&working, edit, pool, &mut rng)?;
        working = edited.graph;
        ops.push(edited.op);
    }
    finish(sg_pos, sg_c, working, pool, ops, seed, mode)
}

/// Samples up to `cfg.candidates` distinct negatives. Each candidate applies
/// a uniformly drawn number of edits in `cfg.edits`, each edit choosing
/// uniformly among the operators applicable to the current subgraph.
/// Deterministic for a fixed seed; returns fewer candidates (with a
/// diagnostic) if the attempt budget runs out.
pub fn generate_negatives(
    sg_pos: &SceneGraph,
    sg_c: &SceneGraph,
    pool: &ResidualPool,
    cfg: &NegativeConfig,
    seed: u64,
) -> Result<NegativeSet, PerturbError> {
    cfg.validate()?;
    if sg_c.relations().is_empty() && pool.is_empty() && sg_c.element_count() <= 1 {
        return Err(PerturbError::NoApplicableOperator);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = NegativeSet::default();
    let (mut absorbed, mut duplicates) = (0usize, 0usize);
    let budget = cfg.candidates * ATTEMPTS_PER_CANDIDATE;

    for _ in 0..budget {
        if out.candidates.len() == cfg.candidates {
            break;
        }
        let edits = rng.random_range(cfg.edits.lo..=cfg.edits.hi);
        let mut working = sg_c.clone();
        let mut ops = Vec::with_capacity(edits);
        for _ in 0..edits {
            let mut applied = false;
            for _ in 0..EDIT_RETRIES {
                let tags: Vec<OpTag> = OpTag::ALL
                    .into_iter()
                    .filter(|&t| is_applicable(t, &working, pool))
                    .collect();
                if tags.is_empty() {
                    break;
                }
                let tag = tags[rng.random_range(0..tags.len())];
                if let Ok(edited) = apply_edit(&working, &PlannedEdit::random(tag), pool, &mut rng) {
                    working = edited.graph;
                    ops.push(edited.op);
                    applied = true;
                    break;
                }
            }
            if !applied {
                break;
            }
        }
        if ops.is_empty() {
            continue;
        }
        match finish(sg_pos, sg_c, working, pool, ops, seed, cfg.overthink) {
            Ok(c) => {
                let seen = out
                    .candidates
                    .iter()
                    .any(|o| o.graph == c.graph && o.prompt_graph == c.prompt_graph);
                if seen {
                    duplicates += 1;
                } else {
                    out.candidates.push(c);
                }
            }
            Err(_) => absorbed += 1,
        }
    }

    if out.candidates.len() < cfg.candidates {
        out.diagnostics.push(Diagnostic::new(
            "candidate-shortfall",
            format!(
                "produced {} of {} candidates in {budget} attempts ({absorbed} absorbed, {duplicates} duplicates)",
                out.candidates.len(),
                cfg.candidates
            ),
        ));
    }
    Ok(out)
}
