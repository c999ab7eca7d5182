//! Membership structure behind the objectives: which persons appear in which
//! scenes, the two indicator functions, and the positive-pair/candidate index.

use std::collections::BTreeSet;

use crate::data::{AnnId, DatasetBundle, PersonId, SceneId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WorldPerson {
    pub identity: PersonId,
    /// Index of the scene this person's crop was taken from.
    pub own_scene: usize,
}

/// Index-addressed view of persons and scenes: `scenes[k]` is the set of
/// known identities in scene `k`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct World {
    scenes: Vec<BTreeSet<PersonId>>,
    persons: Vec<WorldPerson>,
}

impl World {
    pub fn new(scenes: Vec<BTreeSet<PersonId>>, persons: Vec<WorldPerson>) -> Result<Self> {
        for (i, p) in persons.iter().enumerate() {
            let scene = scenes
                .get(p.own_scene)
                .ok_or_else(|| Error::contract(format!("person {i}: own scene {} out of range", p.own_scene)))?;
            if !scene.contains(&p.identity) {
                return Err(Error::contract(format!(
                    "person {i}: identity {} absent from its own scene {}",
                    p.identity, p.own_scene
                )));
            }
        }
        Ok(World { scenes, persons })
    }

    /// Persons are the bundle's known annotations, scenes follow bundle order.
    /// Returns the world with the annotation and scene ids for each index.
    pub fn from_bundle(bundle: &DatasetBundle) -> (World, Vec<AnnId>, Vec<SceneId>) {
        let scene_ids = bundle.scene_ids();
        let scenes = scene_ids.iter().map(|&s| bundle.known_identities_in(s)).collect();
        let mut persons = Vec::new();
        let mut ann_ids = Vec::new();
        for (k, &sid) in scene_ids.iter().enumerate() {
            for a in bundle.annotations_in(sid) {
                if let Some(identity) = a.person_id {
                    persons.push(WorldPerson { identity, own_scene: k });
                    ann_ids.push(a.ann_id);
                }
            }
        }
        (World { scenes, persons }, ann_ids, scene_ids)
    }

    pub fn scenes(&self) -> &[BTreeSet<PersonId>] {
        &self.scenes
    }

    pub fn persons(&self) -> &[WorldPerson] {
        &self.persons
    }

    pub fn num_scenes(&self) -> usize {
        self.scenes.len()
    }

    pub fn num_persons(&self) -> usize {
        self.persons.len()
    }

    /// Query-scene indicator: person `i`'s identity is present in scene `k`.
    pub fn indicator_qs(&self, person: usize, scene: usize) -> bool {
        self.scenes[scene].contains(&self.persons[person].identity)
    }

    /// Scene-scene indicator: the scenes share at least one known identity.
    pub fn indicator_ss(&self, a: usize, b: usize) -> bool {
        !self.scenes[a].is_disjoint(&self.scenes[b])
    }
}

/// Query-scene indicator over a bundle. The person must be a known annotation.
pub fn indicator_qs(bundle: &DatasetBundle, person: AnnId, scene: SceneId) -> Result<bool> {
    let ann = bundle
        .annotation(person)
        .ok_or_else(|| Error::contract(format!("annotation {person} not in bundle")))?;
    let pid = ann
        .person_id
        .ok_or_else(|| Error::contract(format!("annotation {person} is not a known person")))?;
    Ok(bundle.annotations_in(scene).any(|a| a.person_id == Some(pid)))
}

/// Scene-scene indicator over a bundle; symmetric.
pub fn indicator_ss(bundle: &DatasetBundle, a: SceneId, b: SceneId) -> bool {
    !bundle.known_identities_in(a).is_disjoint(&bundle.known_identities_in(b))
}

/// One positive pair and the candidate set it is contrasted against.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositivePair {
    /// Person index (query-scene form) or scene index (scene-scene form).
    pub anchor: usize,
    pub positive: usize,
    /// Ascending scene indices; always contains `positive`.
    pub candidates: Vec<usize>,
}

impl PositivePair {
    pub fn positive_slot(&self) -> Result<usize> {
        self.candidates
            .iter()
            .position(|&k| k == self.positive)
            .ok_or_else(|| {
                Error::contract(format!(
                    "positive scene {} missing from candidate set of anchor {}",
                    self.positive, self.anchor
                ))
            })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairIndex {
    pub pairs: Vec<PositivePair>,
}

impl PairIndex {
    /// Every `(i, j)` with `I^Q[i][j] = 1`, candidates `{k : k = j or I^Q[i][k] = 0}`.
    pub fn query_scene(world: &World) -> Self {
        let m = world.num_scenes();
        let mut pairs = Vec::new();
        for i in 0..world.num_persons() {
            let member: Vec<bool> = (0..m).map(|k| world.indicator_qs(i, k)).collect();
            let negatives: Vec<usize> = (0..m).filter(|&k| !member[k]).collect();
            for j in (0..m).filter(|&j| member[j]) {
                let mut candidates = negatives.clone();
                let at = candidates.partition_point(|&k| k < j);
                candidates.insert(at, j);
                pairs.push(PositivePair {
                    anchor: i,
                    positive: j,
                    candidates,
                });
            }
        }
        PairIndex { pairs }
    }

    /// Every `(i, j)`, `i ≠ j`, with `I^S[i][j] = 1`; candidates
    /// `{k : k = j or I^S[i][k] = 0}`, never including `i` itself.
    pub fn scene_scene(world: &World) -> Self {
        let m = world.num_scenes();
        let mut pairs = Vec::new();
        for i in 0..m {
            let shares: Vec<bool> = (0..m).map(|k| world.indicator_ss(i, k)).collect();
            for j in (0..m).filter(|&j| j != i && shares[j]) {
                let candidates = (0..m).filter(|&k| k != i && (k == j || !shares[k])).collect();
                pairs.push(PositivePair {
                    anchor: i,
                    positive: j,
                    candidates,
                });
            }
        }
        PairIndex { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}
