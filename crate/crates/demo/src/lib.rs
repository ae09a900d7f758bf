//! Browser demo: perturbs the bundled motorcycle example, picks diverse
//! points on a plane, and traces the preference loss. The plain functions are
//! usable natively; the `wasm` module exposes them to JavaScript.

use scenealign::dpo::{sigmoid, softplus};
use scenealign::embed::Embedding;
use scenealign::grounding::residual_pool;
use scenealign::perturb::{build_negative, OpTag, OverthinkMode, PlannedEdit};
use scenealign::scene_graph::jaccard_overlap;
use scenealign::select::{min_pairwise, select_diverse, within_bounds, SelectionConfig};
use scenealign::{sample, SceneGraph};
use serde_json::{json, Value};

fn graph_value(g: &SceneGraph) -> Value {
    serde_json::from_str(&g.to_json()).expect("graphs serialize to valid JSON")
}

/// Applies `op` (`swap`, `replace`, `shorten`, `overthink` or a
/// comma-separated sequence of them) to the grounded part of the example
/// graph and reports the recomposed negative with its overlap. When the edit
/// is absorbed by recomposition, `prompt_graph` holds the edited subgraph.
pub fn perturb_example(ops: &str, seed: u64) -> Result<Value, String> {
    let plan = ops
        .split(',')
        .map(|s| match s.trim() {
            "swap" => Ok(OpTag::Swap),
            "replace" => Ok(OpTag::Replace),
            "shorten" => Ok(OpTag::Shorten),
            "overthink" => Ok(OpTag::Overthink),
            other => Err(format!("unknown operator {other:?}")),
        })
        .map(|t| t.map(PlannedEdit::random))
        .collect::<Result<Vec<_>, _>>()?;
    let (pos, sub) = (sample::scene_graph(), sample::grounded_subgraph());
    let pool = residual_pool(&pos, &sub).map_err(|e| e.to_string())?;
    let neg = build_negative(&pos, &sub, &pool, &plan, OverthinkMode::PromptContext, seed).map_err(|e| e.to_string())?;
    let j = jaccard_overlap(&neg.graph, &pos);
    let cfg = SelectionConfig::default();
    Ok(json!({
        "positive": graph_value(&pos),
        "negative": graph_value(&neg.graph),
        "prompt_graph": neg.prompt_graph.as_ref().map(graph_value),
        "edits": neg.trace.ops,
        "label": neg.trace.operator_label(),
        "jaccard": { "shared": j.shared, "union": j.union, "value": j.value() },
        "kept": within_bounds(j.value(), cfg.gamma_lower, cfg.gamma_upper),
    }))
}

/// Max–min diverse subset of `m` points given as flat `[x0, y0, x1, y1, ..]`.
/// Returns the chosen indices and their minimum pairwise distance.
pub fn select_points(coords: &[f64], m: usize) -> Result<(Vec<usize>, f64), String> {
    if coords.len() % 2 != 0 {
        return Err("coordinates must come in (x, y) pairs".into());
    }
    let points = coords
        .chunks(2)
        .map(|p| Embedding::new(p.to_vec()).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let chosen = select_diverse(&points, m, SelectionConfig::default().exact_threshold).map_err(|e| e.to_string())?;
    let dist = scenealign::embed::distance_matrix(&points).map_err(|e| e.to_string())?;
    let score = if chosen.len() < 2 { 0.0 } else { min_pairwise(&dist, &chosen) };
    Ok((chosen, score))
}

/// Per-pair loss softplus(−β·Δ) and its derivative in Δ at `steps` evenly
/// spaced margins Δ in `[lo, hi]`.
pub fn loss_curve(beta: f64, lo: f64, hi: f64, steps: usize) -> Result<Vec<[f64; 3]>, String> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(format!("beta must be positive, got {beta}"));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) || steps < 2 {
        return Err("need finite lo < hi and at least two steps".into());
    }
    Ok((0..steps)
        .map(|i| {
            let delta = lo + (hi - lo) * i as f64 / (steps - 1) as f64;
            [delta, softplus(-beta * delta), -beta * sigmoid(-beta * delta)]
        })
        .collect())
}

#[cfg(target_arch = "wasm32")]
mod wasm {
    use wasm_bindgen::prelude::*;

    #[wasm_bindgen(js_name = perturbExample)]
    pub fn perturb_example(ops: &str, seed: u32) -> Result<String, JsError> {
        super::perturb_example(ops, seed.into())
            .map(|v| v.to_string())
            .map_err(|e| JsError::new(&e))
    }

    /// Chosen indices followed by the achieved minimum distance.
    #[wasm_bindgen(js_name = selectPoints)]
    pub fn select_points(coords: &[f64], m: usize) -> Result<Vec<f64>, JsError> {
        let (chosen, score) = super::select_points(coords, m).map_err(|e| JsError::new(&e))?;
        Ok(chosen.into_iter().map(|i| i as f64).chain([score]).collect())
    }

    /// Flat `[delta, loss, slope, ..]` triples.
    #[wasm_bindgen(js_name = lossCurve)]
    pub fn loss_curve(beta: f64, lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>, JsError> {
        super::loss_curve(beta, lo, hi, steps)
            .map(|c| c.into_iter().flatten().collect())
            .map_err(|e| JsError::new(&e))
    }
}
