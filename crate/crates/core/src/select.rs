//! Overlap filtering and diversity selection of negative candidates.
//!
//! Candidates are kept when their element-level Jaccard overlap with the
//! positive graph lies in `[gamma_lower, gamma_upper]`; from the survivors,
//! `m` are chosen to maximize the minimum pairwise embedding distance of
//! their rationales.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diag::Diagnostic;
use crate::embed::{distance_matrix, EmbedError, Embedding};
use crate::perturb::NegativeCandidate;
use crate::scene_graph::{jaccard_overlap, SceneGraph};

/// Outward slack on the overlap bounds so that e.g. 3/10 counts as 0.3.
const BOUND_SLACK: f64 = 1e-12;
/// Widening applied per relax-bounds round.
pub const RELAX_STEP: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectError {
    #[error("invalid selection configuration: {0}")]
    InvalidConfig(String),
    #[error("candidate {0} has no rationale embedding")]
    MissingEmbedding(usize),
    #[error("distance matrix is not square or has non-finite entries")]
    BadMatrix,
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shortfall {
    /// Emit fewer than `m` negatives and record a diagnostic.
    #[default]
    EmitFewer,
    /// Widen both bounds stepwise until `m` candidates survive or the
    /// window covers `[0, 1]`.
    RelaxBounds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub gamma_lower: f64,
    pub gamma_upper: f64,
    /// Negatives kept per instance.
    pub m: usize,
    /// Largest candidate count solved by exhaustive search.
    pub exact_threshold: usize,
    pub on_shortfall: Shortfall,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            gamma_lower: 0.3,
            gamma_upper: 0.7,
            m: 3,
            exact_threshold: 15,
            on_shortfall: Shortfall::EmitFewer,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectError> {
        let ok = |g: f64| (0.0..=1.0).contains(&g);
        if !ok(self.gamma_lower) || !ok(self.gamma_upper) || self.gamma_lower > self.gamma_upper {
            return Err(SelectError::InvalidConfig(format!(
                "overlap bounds [{}, {}] must satisfy 0 <= lower <= upper <= 1",
                self.gamma_lower, self.gamma_upper
            )));
        }
        if self.m == 0 {
            return Err(SelectError::InvalidConfig("m must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn within_bounds(j: f64, lower: f64, upper: f64) -> bool {
    j >= lower - BOUND_SLACK && j <= upper + BOUND_SLACK
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<NegativeCandidate>,
    pub rejected: Vec<NegativeCandidate>,
    /// Bounds finally applied; wider than configured after relaxing.
    pub bounds: (f64, f64),
    pub diagnostics: Vec<Diagnostic>,
}

/// Scores every candidate against `sg_pos` and partitions by the overlap
/// window, relaxing it when configured to.
pub fn filter_by_overlap(
    sg_pos: &SceneGraph,
    mut candidates: Vec<NegativeCandidate>,
    cfg: &SelectionConfig,
) -> Result<FilterOutcome, SelectError> {
    cfg.validate()?;
    for c in &mut candidates {
        c.jaccard = Some(jaccard_overlap(&c.graph, sg_pos));
    }
    let score = |c: &NegativeCandidate| c.jaccard.expect("scored above").value();
    let (mut lo, mut hi) = (cfg.gamma_lower, cfg.gamma_upper);
    let mut diagnostics = Vec::new();
    if cfg.on_shortfall == Shortfall::RelaxBounds {
        let count = |lo: f64, hi: f64| candidates.iter().filter(|c| within_bounds(score(c), lo, hi)).count();
        let target = cfg.m.min(candidates.len());
        let mut rounds = 0;
        while count(lo, hi) < target && (lo > 0.0 || hi < 1.0) {
            rounds += 1;
            lo = (cfg.gamma_lower - RELAX_STEP * rounds as f64).max(0.0);
            hi = (cfg.gamma_upper + RELAX_STEP * rounds as f64).min(1.0);
        }
        if rounds > 0 {
            diagnostics.push(Diagnostic::new(
                "relaxed-bounds",
                format!("overlap window widened to [{lo:.2}, {hi:.2}]"),
            ));
        }
    }
    let (kept, rejected): (Vec<_>, Vec<_>) = candidates
        .into_iter()
        .partition(|c| within_bounds(score(c), lo, hi));
    Ok(FilterOutcome {
        kept,
        rejected,
        bounds: (lo, hi),
        diagnostics,
    })
}

/// Minimum pairwise distance within `subset`; infinite for fewer than two.
pub fn min_pairwise(dist: &[Vec<f64>], subset: &[usize]) -> f64 {
    let mut best = f64::INFINITY;
    for (a, &i) in subset.iter().enumerate() {
        for &j in &subset[a + 1..] {
            best = best.min(dist[i][j]);
        }
    }
    best
}

fn check_matrix(dist: &[Vec<f64>]) -> Result<(), SelectError> {
    let n = dist.len();
    if dist.iter().any(|row| row.len() != n || row.iter().any(|d| !d.is_finite())) {
        return Err(SelectError::BadMatrix);
    }
    Ok(())
}

/// Exhaustive max–min search. Among optimal subsets the lexicographically
/// smallest index tuple wins.
pub fn select_exact(dist: &[Vec<f64>], m: usize) -> Vec<usize> {
    let n = dist.len();
    if m >= n {
        return (0..n).collect();
    }
    if m == 0 {
        return Vec::new();
    }
    let mut combo: Vec<usize> = (0..m).collect();
    let mut best = combo.clone();
    let mut best_score = min_pairwise(dist, &combo);
    loop {
        // advance to the next combination in lexicographic order
        let Some(i) = (0..m).rev().find(|&i| combo[i] < n - m + i) else {
            break;
        };
        combo[i] += 1;
        for j in i + 1..m {
            combo[j] = combo[j - 1] + 1;
        }
        let score = min_pairwise(dist, &combo);
        if score > best_score {
            best_score = score;
            best.clone_from(&combo);
        }
    }
    best
}

/// Farthest-point heuristic: seed with the farthest pair, then repeatedly
/// add the point farthest from the current selection. The result is within
/// a factor two of the optimum. Returned in selection order.
pub fn select_greedy(dist: &[Vec<f64>], m: usize) -> Vec<usize> {
    let n = dist.len();
    if m >= n {
        return (0..n).collect();
    }
    if m == 0 {
        return Vec::new();
    }
    if m == 1 {
        return vec![0];
    }
    let (mut a, mut b, mut far) = (0, 1, f64::NEG_INFINITY);
    for i in 0..n {
        for j in i + 1..n {
            if dist[i][j] > far {
                (a, b, far) = (i, j, dist[i][j]);
            }
        }
    }
    let mut chosen = vec![a, b];
    let mut nearest: Vec<f64> = (0..n).map(|k| dist[k][a].min(dist[k][b])).collect();
    while chosen.len() < m {
        let next = (0..n)
            .filter(|k| !chosen.contains(k))
            .fold(None::<usize>, |best, k| match best {
                Some(b) if nearest[b] >= nearest[k] => Some(b),
                _ => Some(k),
            })
            .expect("m < n leaves an unchosen point");
        chosen.push(next);
        for k in 0..n {
            nearest[k] = nearest[k].min(dist[k][next]);
        }
    }
    chosen
}

/// Max–min selection over a precomputed distance matrix; exact up to
/// `exact_threshold` points, greedy beyond.
pub fn select_diverse_from_matrix(dist: &[Vec<f64>], m: usize, exact_threshold: usize) -> Result<Vec<usize>, SelectError> {
    check_matrix(dist)?;
    Ok(if dist.len() <= exact_threshold {
        select_exact(dist, m)
    } else {
        select_greedy(dist, m)
    })
}

/// Selects indices of the `m` most mutually distant embeddings.
pub fn select_diverse(embeddings: &[Embedding], m: usize, exact_threshold: usize) -> Result<Vec<usize>, SelectError> {
    let dist = distance_matrix(embeddings)?;
    select_diverse_from_matrix(&dist, m, exact_threshold)
}

/// Keeps the diverse subset of `candidates`, which must carry embeddings.
/// Adds a `selection-shortfall` diagnostic when fewer than `m` exist.
pub fn select_candidates(
    candidates: Vec<NegativeCandidate>,
    cfg: &SelectionConfig,
) -> Result<(Vec<NegativeCandidate>, Vec<Diagnostic>), SelectError> {
    cfg.validate()?;
    let embeddings = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| c.embedding.clone().ok_or(SelectError::MissingEmbedding(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut diagnostics = Vec::new();
    if candidates.len() < cfg.m {
        diagnostics.push(Diagnostic::new(
            "selection-shortfall",
            format!("{} of {} negatives available after filtering", candidates.len(), cfg.m),
        ));
    }
    let picked = select_diverse(&embeddings, cfg.m, cfg.exact_threshold)?;
    let mut slots: Vec<Option<NegativeCandidate>> = candidates.into_iter().map(Some).collect();
    let selected = picked.into_iter().map(|i| slots[i].take().expect("indices are distinct")).collect();
    Ok((selected, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounding::residual_pool;
    use crate::perturb::{build_negative, OverthinkMode, PlannedEdit, OpTag};
    use crate::sample::{grounded_subgraph, scene_graph};
    use crate::scene_graph::ElementRef;
    use proptest::prelude::*;

    fn line(points: &[f64]) -> Vec<Vec<f64>> {
        points.iter().map(|a| points.iter().map(|b| (a - b).abs()).collect()).collect()
    }

    #[test]
    fn one_dimensional_examples() {
        let d = line(&[0.0, 1.0, 2.0, 10.0]);
        assert_eq!(select_exact(&d, 2), vec![0, 3]);
        assert_eq!(select_exact(&d, 3), vec![0, 2, 3]);
        let mut g = select_greedy(&d, 3);
        g.sort();
        assert_eq!(g, vec![0, 2, 3]);
    }

    #[test]
    fn lexicographic_tie_break() {
        // equilateral: every pair ties
        let d = line(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(select_exact(&d, 2), vec![0, 3]);
        let eq = vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]];
        assert_eq!(select_exact(&eq, 2), vec![0, 1]);
    }

    #[test]
    fn degenerate_sizes() {
        let d = line(&[0.0, 5.0]);
        assert_eq!(select_exact(&d, 3), vec![0, 1]);
        assert_eq!(select_exact(&d, 0), Vec::<usize>::new());
        assert_eq!(select_exact(&d, 1), vec![0]);
        assert_eq!(select_greedy(&d, 1), vec![0]);
        assert!(select_diverse_from_matrix(&[], 3, 15).unwrap().is_empty());
        assert_eq!(
            select_diverse_from_matrix(&[vec![0.0, f64::NAN], vec![f64::NAN, 0.0]], 1, 15),
            Err(SelectError::BadMatrix)
        );
    }

    #[test]
    fn bounds_are_inclusive() {
        assert!(within_bounds(3.0 / 10.0, 0.3, 0.7));
        assert!(within_bounds(7.0 / 10.0, 0.3, 0.7));
        assert!(!within_bounds(0.29, 0.3, 0.7));
        assert!(!within_bounds(12.0 / 14.0, 0.3, 0.7));
    }

    #[test]
    fn config_validation() {
        let bad = SelectionConfig { gamma_lower: 0.8, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SelectionConfig { m: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(SelectionConfig::default().validate().is_ok());
    }

    fn case_study_candidates() -> Vec<NegativeCandidate> {
        let (pos, sub) = (scene_graph(), grounded_subgraph());
        let pool = residual_pool(&pos, &sub).unwrap();
        let plans = [
            vec![PlannedEdit { tag: OpTag::Swap, target: Some(ElementRef::relation(0)), payload: None }],
            vec![PlannedEdit { tag: OpTag::Shorten, target: Some(ElementRef::entity(0)), payload: None }],
        ];
        plans
            .iter()
            .map(|p| build_negative(&pos, &sub, &pool, p, OverthinkMode::Reject, 0).unwrap())
            .collect()
    }

    #[test]
    fn filter_scores_case_study() {
        let out = filter_by_overlap(&scene_graph(), case_study_candidates(), &SelectionConfig::default()).unwrap();
        // swap leaves 12/14, above the window; shorten "man" leaves 10/13
        assert!(out.kept.is_empty());
        assert_eq!(out.rejected.len(), 2);
        let js: Vec<_> = out.rejected.iter().map(|c| c.jaccard.unwrap()).collect();
        assert_eq!((js[0].shared, js[0].union), (12, 14));
        assert_eq!((js[1].shared, js[1].union), (10, 13));
    }

    #[test]
    fn relax_bounds_widens_until_enough() {
        let cfg = SelectionConfig {
            m: 2,
            on_shortfall: Shortfall::RelaxBounds,
            ..Default::default()
        };
        let out = filter_by_overlap(&scene_graph(), case_study_candidates(), &cfg).unwrap();
        assert_eq!(out.kept.len(), 2);
        assert!(out.bounds.1 >= 12.0 / 14.0 - 1e-12);
        assert_eq!(out.diagnostics[0].code, "relaxed-bounds");
    }

    #[test]
    fn selection_requires_embeddings() {
        let err = select_candidates(case_study_candidates(), &SelectionConfig::default()).unwrap_err();
        assert_eq!(err, SelectError::MissingEmbedding(0));
    }

    fn brute_force(dist: &[Vec<f64>], m: usize) -> f64 {
        let n = dist.len();
        let mut best = f64::NEG_INFINITY;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != m {
                continue;
            }
            let subset: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
            best = best.max(min_pairwise(dist, &subset));
        }
        best
    }

    fn planar(points: &[(f64, f64)]) -> Vec<Vec<f64>> {
        points
            .iter()
            .map(|a| points.iter().map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()).collect())
            .collect()
    }

    proptest! {
        #[test]
        fn exact_matches_brute_force(points in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 4..10), m in 2usize..4) {
            let d = planar(&points);
            let picked = select_exact(&d, m);
            prop_assert_eq!(picked.len(), m);
            prop_assert!((min_pairwise(&d, &picked) - brute_force(&d, m)).abs() <= 1e-12);
        }

        #[test]
        fn greedy_is_half_optimal(points in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 4..12), m in 2usize..5) {
            let d = planar(&points);
            let g = select_greedy(&d, m);
            let exact = min_pairwise(&d, &select_exact(&d, m));
            prop_assert!(min_pairwise(&d, &g) >= 0.5 * exact - 1e-12);
        }

        #[test]
        fn objective_is_permutation_invariant(points in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 4..9), rot in 0usize..9) {
            let d = planar(&points);
            let mut shuffled = points.clone();
            shuffled.rotate_left(rot % points.len());
            let ds = planar(&shuffled);
            let a = min_pairwise(&d, &select_exact(&d, 3));
            let b = min_pairwise(&ds, &select_exact(&ds, 3));
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
