//! Rationale parsing, extraction of the rationale-grounded subgraph, and the
//! residual pool of scene elements the rationale does not rely on.

use indexmap::IndexSet;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::diag::Diagnostic;
use crate::scene_graph::{Attribute, Element, ElementRef, Relation, SceneGraph};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GroundingError {
    #[error("rationale references no scene-graph element")]
    EmptyMatch,
    #[error("grounded graph is not a subgraph of the positive graph: {0} missing")]
    NotASubgraph(String),
    #[error("rationale has no numbered steps")]
    Unstructured,
    #[error("rationale is empty")]
    EmptyRationale,
}

/// A step-wise reasoning trace: numbered steps plus a conclusion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rationale {
    steps: Vec<String>,
    conclusion: String,
    raw_text: String,
}

/// Result of a lenient parse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRationale {
    pub rationale: Rationale,
    pub diagnostic: Option<Diagnostic>,
}

fn numbered_step(line: &str) -> Option<&str> {
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = &line[digits..];
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    Some(rest.trim_start())
}

fn conclusion_line(line: &str) -> Option<&str> {
    let line = line.trim_start_matches('*');
    let head = line.get(..11)?;
    if head.eq_ignore_ascii_case("conclusion:") {
        Some(line[11..].trim_start_matches('*').trim())
    } else {
        None
    }
}

impl Rationale {
    /// Renders `1. ...\n2. ...\nConclusion: ...`.
    pub fn from_parts(steps: Vec<String>, conclusion: impl Into<String>) -> Self {
        let conclusion = conclusion.into();
        let mut raw = steps
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{}. {s}", i + 1))
            .collect::<Vec<_>>()
            .join("\n");
        if !conclusion.is_empty() {
            if !raw.is_empty() {
                raw.push('\n');
            }
            raw.push_str("Conclusion: ");
            raw.push_str(&conclusion);
        }
        Self {
            steps,
            conclusion,
            raw_text: raw,
        }
    }

    /// Lenient parse: text without numbered steps becomes a single step and
    /// carries a diagnostic.
    pub fn parse(text: &str) -> ParsedRationale {
        let mut steps: Vec<String> = Vec::new();
        let mut preamble: Vec<&str> = Vec::new();
        let mut conclusion: Option<Vec<&str>> = None;
        for line in text.lines().map(str::trim) {
            if line.is_empty() {
                continue;
            }
            if let Some(c) = conclusion.as_mut() {
                c.push(line);
            } else if let Some(c) = conclusion_line(line) {
                conclusion = Some(if c.is_empty() { vec![] } else { vec![c] });
            } else if let Some(step) = numbered_step(line) {
                steps.push(step.to_string());
            } else if let Some(last) = steps.last_mut() {
                last.push(' ');
                last.push_str(line);
            } else {
                preamble.push(line);
            }
        }
        let mut diagnostic = None;
        if steps.is_empty() && !preamble.is_empty() {
            steps.push(preamble.join(" "));
            diagnostic = Some(Diagnostic::new(
                "free-form-rationale",
                "response has no numbered steps; kept as a single step",
            ));
        }
        ParsedRationale {
            rationale: Self {
                steps,
                conclusion: conclusion.map(|c| c.join(" ")).unwrap_or_default(),
                raw_text: text.to_string(),
            },
            diagnostic,
        }
    }

    /// Requires at least one numbered step.
    pub fn parse_strict(text: &str) -> Result<Self, GroundingError> {
        let parsed = Self::parse(text);
        if parsed.rationale.steps.is_empty() {
            return Err(GroundingError::EmptyRationale);
        }
        if parsed.diagnostic.is_some() {
            return Err(GroundingError::Unstructured);
        }
        Ok(parsed.rationale)
    }

    pub fn steps(&self) -> &[String] {
        &self.steps
    }

    pub fn conclusion(&self) -> &str {
        &self.conclusion
    }

    pub fn text(&self) -> &str {
        &self.raw_text
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty() && self.conclusion.is_empty()
    }

    /// Matching windows: each step, then the conclusion (index `steps.len()`).
    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.steps
            .iter()
            .map(String::as_str)
            .chain((!self.conclusion.is_empty()).then_some(self.conclusion.as_str()))
    }
}

impl Serialize for Rationale {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.raw_text)
    }
}

impl<'de> Deserialize<'de> for Rationale {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Ok(Rationale::parse(&text).rationale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub case_fold: bool,
    pub token_boundary: bool,
    /// Keep a relation only when its predicate is mentioned next to one of
    /// its endpoints; otherwise endpoint co-occurrence in one step suffices.
    pub relation_requires_predicate: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            case_fold: true,
            token_boundary: true,
            relation_requires_predicate: false,
        }
    }
}

/// Which rationale step matched which parent element, and where.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub element: ElementRef,
    pub step: usize,
    /// Byte range of the match within the (case-folded) step text.
    pub span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedSubgraph {
    pub graph: SceneGraph,
    pub provenance: Vec<Provenance>,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// First occurrence of `needle` in `hay`, optionally requiring non-word
/// characters (or string edges) on both sides.
fn find_phrase(hay: &str, needle: &str, token_boundary: bool) -> Option<(usize, usize)> {
    if needle.is_empty() {
        return None;
    }
    hay.match_indices(needle).map(|(i, m)| (i, i + m.len())).find(|&(s, e)| {
        !token_boundary
            || (!hay[..s].chars().next_back().is_some_and(is_word_char)
                && !hay[e..].chars().next().is_some_and(is_word_char))
    })
}

struct Matcher<'a> {
    cfg: &'a MatchConfig,
    segments: Vec<String>,
}

impl<'a> Matcher<'a> {
    fn new(rationale: &Rationale, cfg: &'a MatchConfig) -> Self {
        let segments = rationale
            .segments()
            .map(|s| if cfg.case_fold { s.to_lowercase() } else { s.to_string() })
            .collect();
        Self { cfg, segments }
    }

    fn fold(&self, s: &str) -> String {
        if self.cfg.case_fold {
            s.to_lowercase()
        } else {
            s.to_string()
        }
    }

    /// `(segment, span)` for every segment mentioning `phrase`.
    fn hits(&self, phrase: &str) -> Vec<(usize, (usize, usize))> {
        let needle = self.fold(phrase.trim());
        self.segments
            .iter()
            .enumerate()
            .filter_map(|(i, seg)| find_phrase(seg, &needle, self.cfg.token_boundary).map(|sp| (i, sp)))
            .collect()
    }
}

/// Keeps entities named in the rationale, attributes whose value is
/// mentioned in a step that names their entity, and relations between kept
/// entities whose predicate or both endpoints appear in one step.
pub fn extract_grounded_subgraph(
    sg_pos: &SceneGraph,
    rationale: &Rationale,
    cfg: &MatchConfig,
) -> Result<GroundedSubgraph, GroundingError> {
    let matcher = Matcher::new(rationale, cfg);
    let mut provenance = Vec::new();

    let entity_steps: Vec<Vec<usize>> = sg_pos
        .entities()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let hits = matcher.hits(e);
            if let Some(&(step, span)) = hits.first() {
                provenance.push(Provenance {
                    element: ElementRef::entity(i),
                    step,
                    span,
                });
            }
            hits.into_iter().map(|(s, _)| s).collect()
        })
        .collect();
    let steps_of = |name: &str| -> &[usize] {
        sg_pos
            .entities()
            .get_index_of(name)
            .map(|i| entity_steps[i].as_slice())
            .unwrap_or(&[])
    };

    let kept_entities: Vec<&String> = sg_pos
        .entities()
        .iter()
        .zip(&entity_steps)
        .filter(|(_, s)| !s.is_empty())
        .map(|(e, _)| e)
        .collect();
    if kept_entities.is_empty() {
        return Err(GroundingError::EmptyMatch);
    }

    let mut kept_attributes = Vec::new();
    for (i, a) in sg_pos.attributes().iter().enumerate() {
        let entity_in = steps_of(&a.entity);
        if let Some(&(step, span)) = matcher
            .hits(&a.value)
            .iter()
            .find(|(s, _)| entity_in.contains(s))
        {
            provenance.push(Provenance {
                element: ElementRef::attribute(i),
                step,
                span,
            });
            kept_attributes.push(a.clone());
        }
    }

    let mut kept_relations = Vec::new();
    for (i, r) in sg_pos.relations().iter().enumerate() {
        let (subj, obj) = (steps_of(&r.subject), steps_of(&r.object));
        if subj.is_empty() || obj.is_empty() {
            continue;
        }
        let by_predicate = matcher
            .hits(&r.predicate)
            .into_iter()
            .find(|(s, _)| subj.contains(s) || obj.contains(s));
        let by_cooccurrence = || {
            subj.iter()
                .find(|s| obj.contains(s))
                .map(|&s| (s, find_phrase(&matcher.segments[s], &matcher.fold(&r.subject), cfg.token_boundary).unwrap_or((0, 0))))
        };
        let hit = if cfg.relation_requires_predicate {
            by_predicate
        } else {
            by_predicate.or_else(by_cooccurrence)
        };
        if let Some((step, span)) = hit {
            provenance.push(Provenance {
                element: ElementRef::relation(i),
                step,
                span,
            });
            kept_relations.push(r.clone());
        }
    }

    let graph = SceneGraph::from_parts(kept_entities.into_iter().cloned(), kept_attributes, kept_relations)
        .expect("kept attributes and relations only name kept entities");
    Ok(GroundedSubgraph { graph, provenance })
}

/// Like [`extract_grounded_subgraph`], but an empty match falls back to the
/// whole positive graph with a diagnostic.
pub fn extract_or_whole_graph(
    sg_pos: &SceneGraph,
    rationale: &Rationale,
    cfg: &MatchConfig,
) -> (GroundedSubgraph, Option<Diagnostic>) {
    match extract_grounded_subgraph(sg_pos, rationale, cfg) {
        Ok(g) => (g, None),
        Err(_) => (
            GroundedSubgraph {
                graph: sg_pos.clone(),
                provenance: Vec::new(),
            },
            Some(Diagnostic::new(
                "empty-grounding",
                "rationale matched no scene-graph element; whole graph used as the grounded subgraph",
            )),
        ),
    }
}

/// Elements of the positive graph outside the grounded subgraph. Not a
/// closed graph: boundary relations may name entities that live in the
/// subgraph.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResidualPool {
    pub entities: IndexSet<String>,
    pub attributes: IndexSet<Attribute>,
    pub relations: IndexSet<Relation>,
}

impl ResidualPool {
    pub fn is_empty(&self) -> bool {
        self.element_count() == 0
    }

    pub fn element_count(&self) -> usize {
        self.entities.len() + self.attributes.len() + self.relations.len()
    }

    pub fn elements(&self) -> impl Iterator<Item = Element> + '_ {
        self.entities
            .iter()
            .map(|e| Element::entity(e.clone()))
            .chain(self.attributes.iter().cloned().map(Element::Attribute))
            .chain(self.relations.iter().cloned().map(Element::Relation))
    }

    pub fn contains(&self, element: &Element) -> bool {
        match element {
            Element::Entity { name } => self.entities.contains(name),
            Element::Attribute(a) => self.attributes.contains(a),
            Element::Relation(r) => self.relations.contains(r),
        }
    }

    /// Distinct attribute values, in pool order.
    pub fn attribute_values(&self) -> IndexSet<&str> {
        self.attributes.iter().map(|a| a.value.as_str()).collect()
    }

    /// Distinct predicates of pool relations, in pool order.
    pub fn predicates(&self) -> IndexSet<&str> {
        self.relations.iter().map(|r| r.predicate.as_str()).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct PoolWire {
    entity: Vec<String>,
    #[serde(rename = "attribute pairs")]
    attribute_pairs: Vec<[String; 2]>,
    relationships: Vec<[String; 3]>,
}

impl Serialize for ResidualPool {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        PoolWire {
            entity: self.entities.iter().cloned().collect(),
            attribute_pairs: self
                .attributes
                .iter()
                .map(|a| [a.entity.clone(), a.value.clone()])
                .collect(),
            relationships: self
                .relations
                .iter()
                .map(|r| [r.subject.clone(), r.predicate.clone(), r.object.clone()])
                .collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ResidualPool {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let w = PoolWire::deserialize(deserializer)?;
        Ok(Self {
            entities: w.entity.into_iter().collect(),
            attributes: w
                .attribute_pairs
                .into_iter()
                .map(|[e, v]| Attribute::new(e, v))
                .collect(),
            relations: w
                .relationships
                .into_iter()
                .map(|[s, p, o]| Relation::new(s, p, o))
                .collect(),
        })
    }
}

/// P_res = SG⁺ \ SG^c, element-wise.
pub fn residual_pool(sg_pos: &SceneGraph, sg_c: &SceneGraph) -> Result<ResidualPool, GroundingError> {
    if let Some(missing) = sg_c.elements().find(|e| !sg_pos.contains(e)) {
        return Err(GroundingError::NotASubgraph(missing.to_string()));
    }
    Ok(ResidualPool {
        entities: sg_pos
            .entities()
            .iter()
            .filter(|e| !sg_c.has_entity(e))
            .cloned()
            .collect(),
        attributes: sg_pos
            .attributes()
            .iter()
            .filter(|a| !sg_c.attributes().contains(*a))
            .cloned()
            .collect(),
        relations: sg_pos
            .relations()
            .iter()
            .filter(|r| !sg_c.relations().contains(*r))
            .cloned()
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample;

    fn names(g: &SceneGraph) -> Vec<&str> {
        g.entities().iter().map(String::as_str).collect()
    }

    #[test]
    fn parses_numbered_steps_and_conclusion() {
        let p = Rationale::parse(sample::POSITIVE_RATIONALE);
        assert!(p.diagnostic.is_none());
        let r = p.rationale;
        assert_eq!(r.steps().len(), 4);
        assert!(r.steps()[2].starts_with("One person holds"));
        assert_eq!(
            r.conclusion(),
            "He is most likely inspecting or performing maintenance on the motorcycle."
        );
        assert_eq!(r.text(), sample::POSITIVE_RATIONALE);
    }

    #[test]
    fn free_form_falls_back_to_one_step() {
        let p = Rationale::parse("The dog is chasing the cat.\nIt looks playful.");
        assert_eq!(p.rationale.steps(), ["The dog is chasing the cat. It looks playful."]);
        assert_eq!(p.diagnostic.unwrap().code, "free-form-rationale");
        assert_eq!(
            Rationale::parse_strict("no steps here"),
            Err(GroundingError::Unstructured)
        );
        assert_eq!(Rationale::parse_strict(""), Err(GroundingError::EmptyRationale));
    }

    #[test]
    fn from_parts_round_trips_through_parse() {
        let r = Rationale::from_parts(vec!["a b".into(), "c".into()], "done");
        assert_eq!(r.text(), "1. a b\n2. c\nConclusion: done");
        assert_eq!(Rationale::parse(r.text()).rationale, r);
    }

    #[test]
    fn printed_positive_rationale_grounds_lexically() {
        // The printed rationale says "floor" rather than "ground", never names
        // an attribute value, and has the paper held by "one person".
        let r = Rationale::parse(sample::POSITIVE_RATIONALE).rationale;
        let g = extract_grounded_subgraph(&sample::scene_graph(), &r, &MatchConfig::default()).unwrap();
        assert_eq!(names(&g.graph), ["man", "motorcycle", "paper"]);
        assert!(g.graph.attributes().is_empty());
        assert_eq!(
            g.graph.relations().iter().collect::<Vec<_>>(),
            [&Relation::new("man", "look at", "motorcycle")]
        );
    }

    #[test]
    fn rationale_covering_subgraph_reproduces_it() {
        let r = Rationale::from_parts(
            vec![
                "The man looks at the silver, parked motorcycle.".into(),
                "The man crouches on the paved ground.".into(),
                "The man holds a white paper.".into(),
                "The motorcycle stands on the ground.".into(),
            ],
            "He is inspecting the motorcycle.",
        );
        let g = extract_grounded_subgraph(&sample::scene_graph(), &r, &MatchConfig::default()).unwrap();
        assert_eq!(g.graph, sample::grounded_subgraph());
        assert_eq!(g.graph.attributes().len(), 4);
        assert_eq!(g.graph.relations().len(), 4);
        g.graph.validate().unwrap();
    }

    #[test]
    fn no_mentions_is_empty_match() {
        let r = Rationale::from_parts(vec!["Nothing relevant is visible.".into()], "Unknown.");
        let sg = sample::scene_graph();
        assert_eq!(
            extract_grounded_subgraph(&sg, &r, &MatchConfig::default()),
            Err(GroundingError::EmptyMatch)
        );
        let (g, diag) = extract_or_whole_graph(&sg, &r, &MatchConfig::default());
        assert_eq!(g.graph, sg);
        assert_eq!(diag.unwrap().code, "empty-grounding");
    }

    #[test]
    fn serialized_graph_as_rationale_matches_everything() {
        let sg = sample::scene_graph();
        let r = Rationale::parse(&sg.to_json()).rationale;
        let g = extract_grounded_subgraph(&sg, &r, &MatchConfig::default()).unwrap();
        assert_eq!(g.graph, sg);
    }

    #[test]
    fn token_boundaries_and_case() {
        assert_eq!(find_phrase("a woman walks", "man", true), None);
        assert_eq!(find_phrase("a woman walks", "man", false), Some((4, 7)));
        assert_eq!(find_phrase("the man\u{2019}s hat", "man", true), Some((4, 7)));
        assert_eq!(find_phrase("look at it", "look at", true), Some((0, 7)));
        let sg = SceneGraph::from_parts(["Dog"], [], []).unwrap();
        let r = Rationale::from_parts(vec!["A DOG barks.".into()], "");
        assert!(extract_grounded_subgraph(&sg, &r, &MatchConfig::default()).is_ok());
        let exact = MatchConfig {
            case_fold: false,
            ..Default::default()
        };
        assert!(extract_grounded_subgraph(&sg, &r, &exact).is_err());
    }

    #[test]
    fn predicate_requirement() {
        let sg = SceneGraph::from_parts(["man", "horse"], [], [Relation::new("man", "ride", "horse")]).unwrap();
        let r = Rationale::from_parts(vec!["A man stands by a horse.".into()], "");
        let strict = MatchConfig {
            relation_requires_predicate: true,
            ..Default::default()
        };
        assert_eq!(extract_grounded_subgraph(&sg, &r, &strict).unwrap().graph.relations().len(), 0);
        assert_eq!(
            extract_grounded_subgraph(&sg, &r, &MatchConfig::default()).unwrap().graph.relations().len(),
            1
        );
        let r = Rationale::from_parts(vec!["A man is there.".into(), "Someone may ride the horse.".into()], "");
        assert_eq!(extract_grounded_subgraph(&sg, &r, &strict).unwrap().graph.relations().len(), 1);
    }

    #[test]
    fn case_study_residual_pool() {
        let pool = residual_pool(&sample::scene_graph(), &sample::grounded_subgraph()).unwrap();
        assert_eq!(pool.entities.iter().collect::<Vec<_>>(), ["building", "window", "car"]);
        assert_eq!(
            pool.attributes.iter().cloned().collect::<Vec<_>>(),
            [
                Attribute::new("building", "white"),
                Attribute::new("window", "glass"),
                Attribute::new("car", "parked")
            ]
        );
        assert_eq!(
            pool.relations.iter().cloned().collect::<Vec<_>>(),
            [
                Relation::new("building", "behind", "motorcycle"),
                Relation::new("car", "behind", "motorcycle")
            ]
        );
    }

    #[test]
    fn pool_edge_cases() {
        let sg = sample::scene_graph();
        assert!(residual_pool(&sg, &sg).unwrap().is_empty());
        let pool = residual_pool(&sg, &SceneGraph::new()).unwrap();
        assert_eq!(pool.element_count(), sg.element_count());
        let foreign = SceneGraph::from_parts(["unicorn"], [], []).unwrap();
        assert!(matches!(
            residual_pool(&sg, &foreign),
            Err(GroundingError::NotASubgraph(_))
        ));
    }

    #[test]
    fn pool_serializes_with_schema_keys() {
        let pool = residual_pool(&sample::scene_graph(), &sample::grounded_subgraph()).unwrap();
        let text = serde_json::to_string(&pool).unwrap();
        assert!(text.contains("\"attribute pairs\""));
        let back: ResidualPool = serde_json::from_str(&text).unwrap();
        assert_eq!(back, pool);
    }
}
