//! Scene graph model: entities, (entity, attribute) pairs and directed
//! (subject, predicate, object) triples, with the strict three-key JSON codec
//! and the overlap universe used for negative filtering.
//!
//! All three collections have set semantics but keep insertion order, so
//! serialization is byte-stable. Equality between graphs is set equality.

use std::collections::BTreeSet;
use std::fmt;

use indexmap::IndexSet;
use serde::de::Error as _;
use serde::ser::SerializeStruct;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::diag::Diagnostic;

pub const KEY_ENTITY: &str = "entity";
pub const KEY_ATTRIBUTES: &str = "attribute pairs";
pub const KEY_RELATIONS: &str = "relationships";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("schema violation at {key:?}: {reason}")]
    SchemaViolation { key: String, reason: String },
    #[error("dangling reference to entity {0:?}")]
    DanglingReference(String),
    #[error("duplicate element {0}")]
    Duplicate(String),
    #[error("{kind:?} index {index} out of range")]
    IndexOutOfRange { kind: ElementKind, index: usize },
}

fn schema(key: &str, reason: impl Into<String>) -> GraphError {
    GraphError::SchemaViolation {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attribute {
    pub entity: String,
    pub value: String,
}

impl Attribute {
    pub fn new(entity: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            entity: entity.into(),
            value: value.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl Relation {
    pub fn new(
        subject: impl Into<String>,
        predicate: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        Self {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            subject: self.object.clone(),
            predicate: self.predicate.clone(),
            object: self.subject.clone(),
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:?}, {:?}, {:?}]", self.subject, self.predicate, self.object)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Entity,
    Attribute,
    Relation,
}

/// Position of an element within one of a graph's ordered sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ElementRef {
    pub kind: ElementKind,
    pub index: usize,
}

impl ElementRef {
    pub fn entity(index: usize) -> Self {
        Self { kind: ElementKind::Entity, index }
    }
    pub fn attribute(index: usize) -> Self {
        Self { kind: ElementKind::Attribute, index }
    }
    pub fn relation(index: usize) -> Self {
        Self { kind: ElementKind::Relation, index }
    }
}

/// An owned graph element.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Element {
    Entity { name: String },
    Attribute(Attribute),
    Relation(Relation),
}

impl Element {
    pub fn kind(&self) -> ElementKind {
        match self {
            Element::Entity { .. } => ElementKind::Entity,
            Element::Attribute(_) => ElementKind::Attribute,
            Element::Relation(_) => ElementKind::Relation,
        }
    }

    pub fn entity(name: impl Into<String>) -> Self {
        Element::Entity { name: name.into() }
    }

    /// Entities this element needs present in its graph.
    pub fn required_entities(&self) -> Vec<&str> {
        match self {
            Element::Entity { name } => vec![name.as_str()],
            Element::Attribute(a) => vec![a.entity.as_str()],
            Element::Relation(r) => vec![r.subject.as_str(), r.object.as_str()],
        }
    }

    /// JSON array form used in the scene-graph schema.
    pub fn to_json_value(&self) -> Value {
        match self {
            Element::Entity { name } => Value::String(name.clone()),
            Element::Attribute(a) => serde_json::json!([a.entity, a.value]),
            Element::Relation(r) => serde_json::json!([r.subject, r.predicate, r.object]),
        }
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Element::Entity { name } => write!(f, "{name:?}"),
            Element::Attribute(a) => write!(f, "[{:?}, {:?}]", a.entity, a.value),
            Element::Relation(r) => r.fmt(f),
        }
    }
}

/// SG = (E, A, R).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SceneGraph {
    entities: IndexSet<String>,
    attributes: IndexSet<Attribute>,
    relations: IndexSet<Relation>,
}

fn check_name(key: &str, s: &str) -> Result<(), GraphError> {
    if s.trim().is_empty() {
        Err(schema(key, "empty string"))
    } else {
        Ok(())
    }
}

impl SceneGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a graph, deduplicating silently and rejecting dangling references.
    pub fn from_parts<E, A, R>(entities: E, attributes: A, relations: R) -> Result<Self, GraphError>
    where
        E: IntoIterator,
        E::Item: Into<String>,
        A: IntoIterator<Item = Attribute>,
        R: IntoIterator<Item = Relation>,
    {
        let mut g = Self::new();
        for e in entities {
            g.insert_entity(e)?;
        }
        for a in attributes {
            g.insert_attribute(a)?;
        }
        for r in relations {
            g.insert_relation(r)?;
        }
        Ok(g)
    }

    pub fn entities(&self) -> &IndexSet<String> {
        &self.entities
    }

    pub fn attributes(&self) -> &IndexSet<Attribute> {
        &self.attributes
    }

    pub fn relations(&self) -> &IndexSet<Relation> {
        &self.relations
    }

    pub fn element_count(&self) -> usize {
        self.entities.len() + self.attributes.len() + self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.element_count() == 0
    }

    pub fn has_entity(&self, name: &str) -> bool {
        self.entities.contains(name)
    }

    pub fn contains(&self, element: &Element) -> bool {
        match element {
            Element::Entity { name } => self.entities.contains(name),
            Element::Attribute(a) => self.attributes.contains(a),
            Element::Relation(r) => self.relations.contains(r),
        }
    }

    pub fn element(&self, at: ElementRef) -> Result<Element, GraphError> {
        let oob = GraphError::IndexOutOfRange {
            kind: at.kind,
            index: at.index,
        };
        match at.kind {
            ElementKind::Entity => self.entities.get_index(at.index).map(|n| Element::entity(n.clone())),
            ElementKind::Attribute => self.attributes.get_index(at.index).cloned().map(Element::Attribute),
            ElementKind::Relation => self.relations.get_index(at.index).cloned().map(Element::Relation),
        }
        .ok_or(oob)
    }

    /// All elements in (entities, attributes, relations) order.
    pub fn elements(&self) -> impl Iterator<Item = Element> + '_ {
        self.entities
            .iter()
            .map(|e| Element::entity(e.clone()))
            .chain(self.attributes.iter().cloned().map(Element::Attribute))
            .chain(self.relations.iter().cloned().map(Element::Relation))
    }

    /// Returns whether the entity was newly inserted.
    pub fn insert_entity(&mut self, name: impl Into<String>) -> Result<bool, GraphError> {
        let name = name.into();
        check_name(KEY_ENTITY, &name)?;
        Ok(self.entities.insert(name))
    }

    pub fn insert_attribute(&mut self, attr: Attribute) -> Result<bool, GraphError> {
        check_name(KEY_ATTRIBUTES, &attr.entity)?;
        check_name(KEY_ATTRIBUTES, &attr.value)?;
        if !self.entities.contains(&attr.entity) {
            return Err(GraphError::DanglingReference(attr.entity));
        }
        Ok(self.attributes.insert(attr))
    }

    pub fn insert_relation(&mut self, rel: Relation) -> Result<bool, GraphError> {
        for s in [&rel.subject, &rel.predicate, &rel.object] {
            check_name(KEY_RELATIONS, s)?;
        }
        for e in [&rel.subject, &rel.object] {
            if !self.entities.contains(e) {
                return Err(GraphError::DanglingReference(e.clone()));
            }
        }
        Ok(self.relations.insert(rel))
    }

    /// Inserts an element, first adding any entity it needs.
    pub fn insert_with_closure(&mut self, element: Element) -> Result<bool, GraphError> {
        let mut changed = false;
        for e in element.required_entities() {
            changed |= self.insert_entity(e)?;
        }
        changed |= match element {
            Element::Entity { .. } => false,
            Element::Attribute(a) => self.insert_attribute(a)?,
            Element::Relation(r) => self.insert_relation(r)?,
        };
        Ok(changed)
    }

    /// Removes an entity together with every attribute and relation naming it.
    /// Returns the number of elements removed.
    pub fn remove_entity(&mut self, name: &str) -> usize {
        if !self.entities.shift_remove(name) {
            return 0;
        }
        let before = self.attributes.len() + self.relations.len();
        self.attributes.retain(|a| a.entity != name);
        self.relations.retain(|r| r.subject != name && r.object != name);
        1 + before - (self.attributes.len() + self.relations.len())
    }

    pub fn remove_attribute(&mut self, attr: &Attribute) -> bool {
        self.attributes.shift_remove(attr)
    }

    pub fn remove_relation(&mut self, rel: &Relation) -> bool {
        self.relations.shift_remove(rel)
    }

    /// Renames an entity everywhere it occurs. `to` must not already exist.
    pub fn rename_entity(&mut self, from: &str, to: &str) -> Result<(), GraphError> {
        check_name(KEY_ENTITY, to)?;
        if self.entities.contains(to) {
            return Err(GraphError::Duplicate(format!("{to:?}")));
        }
        let Some(idx) = self.entities.get_index_of(from) else {
            return Err(GraphError::DanglingReference(from.to_string()));
        };
        let rename = |s: &str| if s == from { to.to_string() } else { s.to_string() };
        let mut entities: Vec<String> = self.entities.iter().cloned().collect();
        entities[idx] = to.to_string();
        self.entities = entities.into_iter().collect();
        self.attributes = self
            .attributes
            .iter()
            .map(|a| Attribute::new(rename(&a.entity), a.value.clone()))
            .collect();
        self.relations = self
            .relations
            .iter()
            .map(|r| Relation::new(rename(&r.subject), r.predicate.clone(), rename(&r.object)))
            .collect();
        Ok(())
    }

    /// Replaces the attribute at `index` in place, keeping its position.
    pub fn set_attribute(&mut self, index: usize, attr: Attribute) -> Result<(), GraphError> {
        check_name(KEY_ATTRIBUTES, &attr.value)?;
        if index >= self.attributes.len() {
            return Err(GraphError::IndexOutOfRange {
                kind: ElementKind::Attribute,
                index,
            });
        }
        if !self.entities.contains(&attr.entity) {
            return Err(GraphError::DanglingReference(attr.entity));
        }
        if self.attributes.get_index_of(&attr).is_some_and(|i| i != index) {
            return Err(GraphError::Duplicate(Element::Attribute(attr).to_string()));
        }
        let mut v: Vec<Attribute> = self.attributes.iter().cloned().collect();
        v[index] = attr;
        self.attributes = v.into_iter().collect();
        Ok(())
    }

    /// Replaces the relation at `index` in place, keeping its position.
    pub fn set_relation(&mut self, index: usize, rel: Relation) -> Result<(), GraphError> {
        check_name(KEY_RELATIONS, &rel.predicate)?;
        if index >= self.relations.len() {
            return Err(GraphError::IndexOutOfRange {
                kind: ElementKind::Relation,
                index,
            });
        }
        for e in [&rel.subject, &rel.object] {
            if !self.entities.contains(e) {
                return Err(GraphError::DanglingReference(e.clone()));
            }
        }
        if self.relations.get_index_of(&rel).is_some_and(|i| i != index) {
            return Err(GraphError::Duplicate(rel.to_string()));
        }
        let mut v: Vec<Relation> = self.relations.iter().cloned().collect();
        v[index] = rel;
        self.relations = v.into_iter().collect();
        Ok(())
    }

    /// Checks every invariant; graphs built through the public API always pass.
    pub fn validate(&self) -> Result<(), GraphError> {
        for e in &self.entities {
            check_name(KEY_ENTITY, e)?;
        }
        for a in &self.attributes {
            check_name(KEY_ATTRIBUTES, &a.value)?;
            if !self.entities.contains(&a.entity) {
                return Err(GraphError::DanglingReference(a.entity.clone()));
            }
        }
        for r in &self.relations {
            check_name(KEY_RELATIONS, &r.predicate)?;
            for e in [&r.subject, &r.object] {
                if !self.entities.contains(e) {
                    return Err(GraphError::DanglingReference(e.clone()));
                }
            }
        }
        Ok(())
    }

    /// Element-wise containment.
    pub fn is_subgraph_of(&self, other: &SceneGraph) -> bool {
        self.entities.is_subset(&other.entities)
            && self.attributes.is_subset(&other.attributes)
            && self.relations.is_subset(&other.relations)
    }

    /// Element-wise union; `self`'s order first, then new elements of `other`.
    pub fn union(&self, other: &SceneGraph) -> SceneGraph {
        let mut g = self.clone();
        g.entities.extend(other.entities.iter().cloned());
        g.attributes.extend(other.attributes.iter().cloned());
        g.relations.extend(other.relations.iter().cloned());
        g
    }

    /// A copy with each set sorted, so set-equal graphs become byte-equal.
    pub fn sorted(&self) -> SceneGraph {
        let mut g = self.clone();
        g.entities.sort();
        g.attributes.sort();
        g.relations.sort();
        g
    }

    /// Serializes in stored order using the three-key schema.
    pub fn to_json(&self) -> String {
        serialize_scene_graph(self, false)
    }

    /// Serializes with every set sorted.
    pub fn to_canonical_json(&self) -> String {
        serialize_scene_graph(self, true)
    }
}

impl fmt::Display for SceneGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_json())
    }
}

/// What to do when an attribute or relation names an undeclared entity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DanglingPolicy {
    #[default]
    Error,
    AutoAdd,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOptions {
    pub dangling: DanglingPolicy,
    /// Treat duplicate elements as errors instead of warnings.
    pub strict_duplicates: bool,
}

pub fn parse_scene_graph(json_text: &str) -> Result<SceneGraph, GraphError> {
    parse_scene_graph_with(json_text, &ParseOptions::default()).map(|(g, _)| g)
}

pub fn parse_scene_graph_with(
    json_text: &str,
    opts: &ParseOptions,
) -> Result<(SceneGraph, Vec<Diagnostic>), GraphError> {
    let value: Value =
        serde_json::from_str(json_text).map_err(|e| GraphError::MalformedJson(e.to_string()))?;
    scene_graph_from_value(&value, opts)
}

fn string_tuple<'a>(key: &str, item: &'a Value, arity: usize) -> Result<Vec<&'a str>, GraphError> {
    let arr = item
        .as_array()
        .ok_or_else(|| schema(key, format!("expected an array of {arity} strings, got {item}")))?;
    if arr.len() != arity {
        return Err(schema(key, format!("expected {arity} items, got {}", arr.len())));
    }
    arr.iter()
        .map(|v| {
            v.as_str()
                .ok_or_else(|| schema(key, format!("non-string item {v}")))
        })
        .collect()
}

/// Validates an already-parsed JSON value against the scene-graph schema.
pub fn scene_graph_from_value(
    value: &Value,
    opts: &ParseOptions,
) -> Result<(SceneGraph, Vec<Diagnostic>), GraphError> {
    let obj = value
        .as_object()
        .ok_or_else(|| schema("<root>", "expected a JSON object"))?;
    for key in obj.keys() {
        if ![KEY_ENTITY, KEY_ATTRIBUTES, KEY_RELATIONS].contains(&key.as_str()) {
            return Err(schema(key, "unexpected key"));
        }
    }
    let field = |key: &str| -> Result<&Vec<Value>, GraphError> {
        obj.get(key)
            .ok_or_else(|| schema(key, "missing key"))?
            .as_array()
            .ok_or_else(|| schema(key, "expected an array"))
    };
    let (ents, attrs, rels) = (field(KEY_ENTITY)?, field(KEY_ATTRIBUTES)?, field(KEY_RELATIONS)?);

    let mut diags = Vec::new();
    let mut g = SceneGraph::new();
    let duplicate = |what: String, diags: &mut Vec<Diagnostic>| -> Result<(), GraphError> {
        if opts.strict_duplicates {
            Err(GraphError::Duplicate(what))
        } else {
            diags.push(Diagnostic::new("duplicate", format!("dropped duplicate {what}")));
            Ok(())
        }
    };

    for v in ents {
        let name = v
            .as_str()
            .ok_or_else(|| schema(KEY_ENTITY, format!("non-string item {v}")))?;
        if !g.insert_entity(name)? {
            duplicate(format!("entity {name:?}"), &mut diags)?;
        }
    }

    // Dangling references are resolved before any attribute/relation is
    // inserted so auto-added entities land after the declared ones.
    let mut parsed_attrs = Vec::with_capacity(attrs.len());
    for v in attrs {
        let t = string_tuple(KEY_ATTRIBUTES, v, 2)?;
        parsed_attrs.push(Attribute::new(t[0], t[1]));
    }
    let mut parsed_rels = Vec::with_capacity(rels.len());
    for v in rels {
        let t = string_tuple(KEY_RELATIONS, v, 3)?;
        parsed_rels.push(Relation::new(t[0], t[1], t[2]));
    }
    let referenced = parsed_attrs
        .iter()
        .map(|a| a.entity.as_str())
        .chain(parsed_rels.iter().flat_map(|r| [r.subject.as_str(), r.object.as_str()]));
    for name in referenced {
        if g.has_entity(name) {
            continue;
        }
        match opts.dangling {
            DanglingPolicy::Error => return Err(GraphError::DanglingReference(name.to_string())),
            DanglingPolicy::AutoAdd => {
                g.insert_entity(name)?;
                diags.push(Diagnostic::new(
                    "auto-entity",
                    format!("added undeclared entity {name:?}"),
                ));
            }
        }
    }

    for a in parsed_attrs {
        let desc = Element::Attribute(a.clone()).to_string();
        if !g.insert_attribute(a)? {
            duplicate(format!("attribute pair {desc}"), &mut diags)?;
        }
    }
    for r in parsed_rels {
        let desc = r.to_string();
        if !g.insert_relation(r)? {
            duplicate(format!("relationship {desc}"), &mut diags)?;
        }
    }
    Ok((g, diags))
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

fn json_list<I: IntoIterator<Item = String>>(items: I) -> String {
    let parts: Vec<String> = items.into_iter().collect();
    format!("[{}]", parts.join(", "))
}

/// Single-line, `", "`/`": "` separated, three-key JSON. With `canonical`,
/// each set is sorted first.
pub fn serialize_scene_graph(g: &SceneGraph, canonical: bool) -> String {
    let sorted;
    let g = if canonical {
        sorted = g.sorted();
        &sorted
    } else {
        g
    };
    let entities = json_list(g.entities.iter().map(|e| json_str(e)));
    let attributes = json_list(
        g.attributes
            .iter()
            .map(|a| json_list([json_str(&a.entity), json_str(&a.value)])),
    );
    let relations = json_list(g.relations.iter().map(|r| {
        json_list([json_str(&r.subject), json_str(&r.predicate), json_str(&r.object)])
    }));
    format!(
        "{{{}: {entities}, {}: {attributes}, {}: {relations}}}",
        json_str(KEY_ENTITY),
        json_str(KEY_ATTRIBUTES),
        json_str(KEY_RELATIONS)
    )
}

impl Serialize for SceneGraph {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let attrs: Vec<[&str; 2]> = self
            .attributes
            .iter()
            .map(|a| [a.entity.as_str(), a.value.as_str()])
            .collect();
        let rels: Vec<[&str; 3]> = self
            .relations
            .iter()
            .map(|r| [r.subject.as_str(), r.predicate.as_str(), r.object.as_str()])
            .collect();
        let mut s = serializer.serialize_struct("SceneGraph", 3)?;
        s.serialize_field(KEY_ENTITY, &self.entities)?;
        s.serialize_field(KEY_ATTRIBUTES, &attrs)?;
        s.serialize_field(KEY_RELATIONS, &rels)?;
        s.end()
    }
}

impl<'de> Deserialize<'de> for SceneGraph {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        scene_graph_from_value(&value, &ParseOptions::default())
            .map(|(g, _)| g)
            .map_err(D::Error::custom)
    }
}

/// A member of U(SG): an attribute pair or an ordered subject–object pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UniverseItem<'a> {
    Attribute { entity: &'a str, value: &'a str },
    Pair { subject: &'a str, object: &'a str },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UniverseSet<'a> {
    pub members: BTreeSet<UniverseItem<'a>>,
}

impl UniverseSet<'_> {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// U(SG) = A ∪ {(s, o) : (s, r, o) ∈ R}. Predicates are dropped, so parallel
/// relations between the same ordered pair collapse to one member.
pub fn element_universe(g: &SceneGraph) -> UniverseSet<'_> {
    let attrs = g.attributes.iter().map(|a| UniverseItem::Attribute {
        entity: &a.entity,
        value: &a.value,
    });
    let pairs = g.relations.iter().map(|r| UniverseItem::Pair {
        subject: &r.subject,
        object: &r.object,
    });
    UniverseSet {
        members: attrs.chain(pairs).collect(),
    }
}

/// Exact Jaccard overlap as an integer ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Jaccard {
    pub shared: usize,
    pub union: usize,
}

impl Jaccard {
    /// Both universes empty counts as identical (1.0).
    pub fn value(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.shared as f64 / self.union as f64
        }
    }

    pub fn both_empty(&self) -> bool {
        self.union == 0
    }
}

pub fn jaccard_overlap(g_neg: &SceneGraph, g_pos: &SceneGraph) -> Jaccard {
    let (a, b) = (element_universe(g_neg), element_universe(g_pos));
    let shared = a.members.intersection(&b.members).count();
    Jaccard {
        shared,
        union: a.len() + b.len() - shared,
    }
}
