//! Open-set train/val partitioning: scenes are linked when they share a known
//! identity and whole connected components are assigned to one side.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::dataset::{DatasetBundle, PersonId, SceneId};
use crate::dsu::DisjointSet;
use crate::error::{Error, Result};

/// Allowed deviation of the val fraction from its target, in absolute terms.
pub const SPLIT_TOLERANCE: f64 = 0.05;

/// Undirected scene graph; an edge means the two scenes share an identity.
#[derive(Clone, Debug, Default)]
pub struct IdentityGraph {
    scenes: Vec<SceneId>,
    edges: BTreeSet<(SceneId, SceneId)>,
    /// Identities that contributed edges (after the top-k filter).
    identities: BTreeSet<PersonId>,
    ignored: Vec<PersonId>,
}

impl IdentityGraph {
    pub fn scenes(&self) -> &[SceneId] {
        &self.scenes
    }

    /// Edges with `a < b`.
    pub fn edges(&self) -> &BTreeSet<(SceneId, SceneId)> {
        &self.edges
    }

    pub fn identities(&self) -> &BTreeSet<PersonId> {
        &self.identities
    }

    pub fn ignored(&self) -> &[PersonId] {
        &self.ignored
    }

    /// Connected components, each ascending, ordered by smallest scene id.
    pub fn components(&self) -> Vec<Vec<SceneId>> {
        let mut sorted = self.scenes.clone();
        sorted.sort_unstable();
        let pos: BTreeMap<SceneId, usize> = sorted.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let mut dsu = DisjointSet::new(sorted.len());
        for (a, b) in &self.edges {
            dsu.union(pos[a], pos[b]);
        }
        dsu.groups()
            .into_iter()
            .map(|g| g.into_iter().map(|i| sorted[i]).collect())
            .collect()
    }
}

/// Builds the scene graph, skipping the `ignore_top_k` identities that occur
/// in the most scenes (ties broken by ascending person id).
pub fn build_identity_graph(bundle: &DatasetBundle, ignore_top_k: usize) -> IdentityGraph {
    let ident = bundle.identity_scenes();
    let mut by_freq: Vec<(PersonId, usize)> = ident.iter().map(|(&p, s)| (p, s.len())).collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let ignored: Vec<PersonId> = by_freq.iter().take(ignore_top_k).map(|(p, _)| *p).collect();
    let ignored_set: BTreeSet<PersonId> = ignored.iter().copied().collect();

    let mut edges = BTreeSet::new();
    let mut identities = BTreeSet::new();
    for (pid, scenes) in ident {
        if ignored_set.contains(pid) {
            continue;
        }
        identities.insert(*pid);
        let scenes: Vec<SceneId> = scenes.iter().copied().collect();
        for (i, &a) in scenes.iter().enumerate() {
            for &b in &scenes[i + 1..] {
                edges.insert((a, b));
            }
        }
    }
    IdentityGraph {
        scenes: bundle.scene_ids(),
        edges,
        identities,
        ignored,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SceneSplit {
    pub train: BTreeSet<SceneId>,
    pub val: BTreeSet<SceneId>,
}

/// Assigns whole components to val by greedy bin-fill in descending size
/// order, drawing uniformly (per `seed`) among equally sized components that
/// still fit under the upper tolerance. Fails when the val fraction cannot be
/// brought within [`SPLIT_TOLERANCE`] of the target.
pub fn split_components(graph: &IdentityGraph, target_val_fraction: f64, seed: u64) -> Result<SceneSplit> {
    if !(target_val_fraction > 0.0 && target_val_fraction < 1.0) {
        return Err(Error::contract(format!(
            "target val fraction must lie in (0, 1), got {target_val_fraction}"
        )));
    }
    let total = graph.scenes.len();
    if total == 0 {
        return Ok(SceneSplit {
            train: BTreeSet::new(),
            val: BTreeSet::new(),
        });
    }
    let mut comps = graph.components();
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));

    let n = total as f64;
    let target = target_val_fraction * n;
    let upper = (target_val_fraction + SPLIT_TOLERANCE) * n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = vec![false; comps.len()];
    let mut val_count = 0usize;
    while (val_count as f64) < target {
        let fits = |i: usize| !taken[i] && (val_count + comps[i].len()) as f64 <= upper + 1e-9;
        let Some(best) = (0..comps.len()).filter(|&i| fits(i)).map(|i| comps[i].len()).max() else {
            break;
        };
        let ties: Vec<usize> = (0..comps.len())
            .filter(|&i| fits(i) && comps[i].len() == best)
            .collect();
        let pick = *ties.choose(&mut rng).expect("non-empty tie set");
        taken[pick] = true;
        val_count += comps[pick].len();
    }

    let frac = val_count as f64 / n;
    if (frac - target_val_fraction).abs() > SPLIT_TOLERANCE + 1e-12 {
        let largest = comps[0].len() as f64 / n;
        return Err(Error::SplitInfeasible(format!(
            "best val fraction {frac:.3} is outside {target_val_fraction:.3} ± {SPLIT_TOLERANCE}; \
             largest component covers {:.1}% of {total} scenes, try a larger ignore_top_k",
            largest * 100.0
        )));
    }

    let mut split = SceneSplit {
        train: BTreeSet::new(),
        val: BTreeSet::new(),
    };
    for (comp, is_val) in comps.iter().zip(&taken) {
        let side = if *is_val { &mut split.val } else { &mut split.train };
        side.extend(comp.iter().copied());
    }
    Ok(split)
}

/// Identities (from `graph`) that occur on both sides of a split.
pub fn leaked_identities(bundle: &DatasetBundle, graph: &IdentityGraph, split: &SceneSplit) -> Vec<PersonId> {
    graph
        .identities()
        .iter()
        .filter(|pid| {
            let scenes = &bundle.identity_scenes()[*pid];
            scenes.iter().any(|s| split.train.contains(s)) && scenes.iter().any(|s| split.val.contains(s))
        })
        .copied()
        .collect()
}
