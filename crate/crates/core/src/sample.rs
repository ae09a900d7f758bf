//! A small worked instance: a man crouching next to a parked motorcycle,
//! holding a paper. Used by tests, the CLI help and the browser demo.

use crate::generate::Instance;
use crate::scene_graph::{parse_scene_graph, SceneGraph};

/// The format example shown to the scene-graph generator.
pub const FORMAT_EXAMPLE: &str = r#"{
  "entity": ["man", "motorcycle", "paper", "ground"],
  "attribute pairs": [
    ["motorcycle", "silver"],
    ["paper", "white"],
    ["ground", "paved"]
  ],
  "relationships": [
    ["man", "look at", "motorcycle"],
    ["man", "crouch on", "ground"],
    ["man", "hold", "paper"],
    ["motorcycle", "stand on", "ground"]
  ]
}"#;

pub const SCENE_GRAPH: &str = r#"{"entity": ["man", "motorcycle", "ground", "paper", "building", "window", "car"],
  "attribute pairs": [["motorcycle", "silver"], ["motorcycle", "parked"], ["ground", "paved"], ["paper", "white"],
    ["building", "white"], ["window", "glass"], ["car", "parked"]],
  "relationships": [["man", "look at", "motorcycle"], ["man", "crouch on", "ground"], ["man", "hold", "paper"],
    ["motorcycle", "stand on", "ground"], ["building", "behind", "motorcycle"], ["car", "behind", "motorcycle"]]}"#;

/// The part of [`SCENE_GRAPH`] the positive rationale relies on.
pub const GROUNDED_SUBGRAPH: &str = r#"{"entity": ["man", "motorcycle", "paper", "ground"],
  "attribute pairs": [["motorcycle", "silver"], ["motorcycle", "parked"], ["paper", "white"], ["ground", "paved"]],
  "relationships": [["man", "look at", "motorcycle"], ["man", "crouch on", "ground"], ["man", "hold", "paper"],
    ["motorcycle", "stand on", "ground"]]}"#;

pub const QUESTION: &str =
    "What kind of activity with respect to the motorcycle is the man on the floor most likely engaging in?";

pub const ANSWER: &str = "Inspecting / Diagnosing";

/// A free-form positive rationale for the instance, as an MLLM wrote it.
pub const POSITIVE_RATIONALE: &str = "1. The man is on the floor next to the motorcycle, not sitting on it.
2. Several people are gathered around the motorcycle, suggesting a repair or inspection setting.
3. One person holds a piece of paper, likely a manual or document.
4. The man\u{2019}s position implies he is interacting with the motorcycle.
Conclusion: He is most likely inspecting or performing maintenance on the motorcycle.";

pub fn scene_graph() -> SceneGraph {
    parse_scene_graph(SCENE_GRAPH).expect("sample scene graph is valid")
}

pub fn grounded_subgraph() -> SceneGraph {
    parse_scene_graph(GROUNDED_SUBGRAPH).expect("sample subgraph is valid")
}

pub fn instance() -> Instance {
    Instance {
        id: "motorcycle-inspection".into(),
        image: "images/motorcycle.jpg".into(),
        question: QUESTION.into(),
        answer: Some(ANSWER.into()),
    }
}
