//! Re-identification objective (Online Instance Matching) and the training
//! lookup tables.
//!
//! [`OimTable`] keeps one momentum-averaged unit prototype per known identity
//! and a circular queue of unknown-person embeddings. [`GfnLut`] holds
//! per-epoch snapshots of scene and person embeddings that enlarge the GFN
//! candidate sets without carrying gradients.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnnId, DatasetBundle, EmbeddingStore, PersonId, SceneId, StoreKind};
use crate::error::{Error, Result};
use crate::math::{cross_entropy, dot, norm, normalize};

pub const DEFAULT_OIM_SCALAR: f64 = 30.0;
pub const DEFAULT_OIM_MOMENTUM: f64 = 0.5;
/// Unknown-queue capacity used for CUHK-SYSU.
pub const QUEUE_SIZE_LARGE: usize = 5000;
/// Unknown-queue capacity used for PRW.
pub const QUEUE_SIZE_SMALL: usize = 500;

#[derive(Clone, Debug)]
pub struct OimTable {
    dim: usize,
    identities: Vec<PersonId>,
    index: HashMap<PersonId, usize>,
    /// Zero until the identity's first update, unit norm afterwards.
    prototypes: Vec<Vec<f64>>,
    momentum: f64,
    scalar: f64,
    queue: VecDeque<Vec<f64>>,
    capacity: usize,
}

impl OimTable {
    pub fn new(dim: usize, identities: impl IntoIterator<Item = PersonId>, queue_capacity: usize) -> Self {
        let identities: Vec<PersonId> = identities.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let index = identities.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        OimTable {
            dim,
            prototypes: vec![vec![0.0; dim]; identities.len()],
            identities,
            index,
            momentum: DEFAULT_OIM_MOMENTUM,
            scalar: DEFAULT_OIM_SCALAR,
            queue: VecDeque::with_capacity(queue_capacity),
            capacity: queue_capacity,
        }
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn with_scalar(mut self, scalar: f64) -> Self {
        self.scalar = scalar;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn scalar(&self) -> f64 {
        self.scalar
    }

    pub fn identities(&self) -> &[PersonId] {
        &self.identities
    }

    pub fn contains(&self, identity: PersonId) -> bool {
        self.index.contains_key(&identity)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn queue(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.queue.iter().map(Vec::as_slice)
    }

    pub fn is_initialized(&self, identity: PersonId) -> bool {
        self.index
            .get(&identity)
            .is_some_and(|&i| self.prototypes[i].iter().any(|&v| v != 0.0))
    }

    /// Current prototype of `identity`, a snapshot without gradient.
    pub fn lookup(&self, identity: PersonId) -> Result<&[f64]> {
        let i = *self
            .index
            .get(&identity)
            .ok_or_else(|| Error::data(format!("identity {identity} not in OIM table")))?;
        if self.prototypes[i].iter().all(|&v| v == 0.0) {
            return Err(Error::data(format!("identity {identity} has no prototype yet")));
        }
        Ok(&self.prototypes[i])
    }

    /// `prototype ← normalize(m · prototype + (1 − m) · normalize(embedding))`.
    pub fn update(&mut self, identity: PersonId, embedding: &[f64]) -> Result<()> {
        let i = *self
            .index
            .get(&identity)
            .ok_or_else(|| Error::contract(format!("identity {identity} not in OIM table")))?;
        let e = normalize(embedding)?;
        let m = self.momentum;
        let mixed: Vec<f64> = self.prototypes[i].iter().zip(&e).map(|(p, v)| m * p + (1.0 - m) * v).collect();
        match normalize(&mixed) {
            Ok(p) => self.prototypes[i] = p,
            // exact cancellation; the previous prototype stays
            Err(_) => log::debug!("identity {identity}: momentum update cancelled out"),
        }
        Ok(())
    }

    /// Appends a normalised unknown embedding, evicting the oldest when full.
    pub fn push_unknown(&mut self, embedding: &[f64]) -> Result<()> {
        if self.capacity == 0 {
            return Ok(());
        }
        let e = normalize(embedding)?;
        if self.queue.len() == self.capacity {
            self.queue.pop_front();
        }
        self.queue.push_back(e);
        Ok(())
    }

    /// Applies a batch after its loss has been taken: labelled embeddings
    /// update their prototypes, unlabelled ones enter the queue.
    pub fn absorb(&mut self, embeddings: &[Vec<f64>], labels: &[Option<PersonId>]) -> Result<()> {
        for (e, l) in embeddings.iter().zip(labels) {
            match l {
                Some(p) => self.update(*p, e)?,
                None => self.push_unknown(e)?,
            }
        }
        Ok(())
    }

    /// Prototypes and queue as two stores.
    pub fn to_stores(&self) -> Result<(EmbeddingStore, EmbeddingStore)> {
        let protos = EmbeddingStore::new(
            StoreKind::Prototype,
            self.dim,
            self.identities.clone(),
            self.prototypes.iter().flatten().map(|&v| v as f32).collect(),
        )?;
        let queue = EmbeddingStore::new(
            StoreKind::Queue,
            self.dim,
            (0..self.queue.len() as i64).collect(),
            self.queue.iter().flatten().map(|&v| v as f32).collect(),
        )?;
        Ok((protos, queue))
    }

    pub fn from_stores(prototypes: &EmbeddingStore, queue: &EmbeddingStore, queue_capacity: usize) -> Result<Self> {
        if prototypes.dim() != queue.dim() && !queue.is_empty() {
            return Err(Error::data("prototype and queue stores disagree on dim"));
        }
        let mut table = OimTable::new(prototypes.dim(), prototypes.ids().iter().copied(), queue_capacity);
        for (i, &id) in prototypes.ids().iter().enumerate() {
            let slot = table.index[&id];
            table.prototypes[slot] = prototypes.row(i).iter().map(|&v| f64::from(v)).collect();
        }
        for row in queue.rows_f64() {
            table.push_unknown(&row)?;
        }
        Ok(table)
    }
}

#[derive(Clone, Debug)]
pub struct OimLoss {
    /// Mean over labelled embeddings; 0 when there are none.
    pub loss: f64,
    pub labeled: usize,
    /// Gradient per batch embedding (zero rows for unlabelled ones).
    pub grads: Vec<Vec<f64>>,
}

/// Cross-entropy over `scalar · [prototype sims ‖ queue sims]` for every
/// labelled embedding. Embeddings are normalised internally; the table is
/// read-only and receives no gradient.
pub fn oim_loss(embeddings: &[Vec<f64>], labels: &[Option<PersonId>], table: &OimTable) -> Result<OimLoss> {
    if embeddings.len() != labels.len() {
        return Err(Error::contract("one label per embedding required"));
    }
    let labeled = labels.iter().filter(|l| l.is_some()).count();
    let scale = if labeled > 0 { 1.0 / labeled as f64 } else { 0.0 };
    let bank: Vec<&[f64]> = table
        .prototypes
        .iter()
        .map(Vec::as_slice)
        .chain(table.queue.iter().map(Vec::as_slice))
        .collect();

    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(embeddings.len());
    for (v, label) in embeddings.iter().zip(labels) {
        if v.len() != table.dim {
            return Err(Error::contract(format!("embedding dim {} vs table dim {}", v.len(), table.dim)));
        }
        let Some(pid) = label else {
            grads.push(vec![0.0; v.len()]);
            continue;
        };
        let target = *table
            .index
            .get(pid)
            .ok_or_else(|| Error::contract(format!("label {pid} not in OIM table")))?;
        let n = norm(v);
        let e = normalize(v)?;
        let logits: Vec<f64> = bank.iter().map(|b| table.scalar * dot(&e, b)).collect();
        let (l, d_logits) = cross_entropy(&logits, target);
        loss += l;
        // ∂L/∂e = scalar · Σ_k dl_k b_k, then project through e = v/‖v‖
        let mut d_e = vec![0.0; v.len()];
        for (b, dl) in bank.iter().zip(&d_logits) {
            for (g, bv) in d_e.iter_mut().zip(b.iter()) {
                *g += table.scalar * dl * bv;
            }
        }
        let radial = dot(&d_e, &e);
        grads.push(d_e.iter().zip(&e).map(|(g, ev)| scale * (g - radial * ev) / n).collect());
    }
    Ok(OimLoss {
        loss: loss * scale,
        labeled,
        grads,
    })
}

/// Gradient-stopped embedding snapshots, fully refreshed once per epoch.
#[derive(Clone, Debug, Default)]
pub struct GfnLut {
    epoch: Option<usize>,
    scenes: BTreeMap<SceneId, Vec<f64>>,
    persons: BTreeMap<AnnId, Vec<f64>>,
}

impl GfnLut {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces every entry.
    pub fn refresh(
        &mut self,
        epoch: usize,
        scenes: impl IntoIterator<Item = (SceneId, Vec<f64>)>,
        persons: impl IntoIterator<Item = (AnnId, Vec<f64>)>,
    ) {
        self.epoch = Some(epoch);
        self.scenes = scenes.into_iter().collect();
        self.persons = persons.into_iter().collect();
    }

    pub fn epoch(&self) -> Option<usize> {
        self.epoch
    }

    pub fn scene(&self, id: SceneId) -> Option<&[f64]> {
        self.scenes.get(&id).map(Vec::as_slice)
    }

    pub fn person(&self, id: AnnId) -> Option<&[f64]> {
        self.persons.get(&id).map(Vec::as_slice)
    }

    pub fn scene_ids(&self) -> impl Iterator<Item = SceneId> + '_ {
        self.scenes.keys().copied()
    }

    pub fn num_scenes(&self) -> usize {
        self.scenes.len()
    }

    pub fn num_persons(&self) -> usize {
        self.persons.len()
    }
}

/// How many positive and hard-negative scenes to draw per batch person.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplePlan {
    pub positives_per_person: usize,
    pub hard_negatives_per_person: usize,
    pub use_lut: bool,
}

impl Default for SamplePlan {
    fn default() -> Self {
        SamplePlan {
            positives_per_person: 1,
            hard_negatives_per_person: 1,
            use_lut: true,
        }
    }
}

impl SamplePlan {
    pub fn validate(&self) -> Result<()> {
        if self.use_lut && self.positives_per_person + self.hard_negatives_per_person == 0 {
            return Err(Error::contract("a lookup-table plan must sample at least one scene"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PersonSample {
    pub ann_id: AnnId,
    /// Ascending.
    pub positives: Vec<SceneId>,
    /// Ascending.
    pub hard_negatives: Vec<SceneId>,
}

/// A hard negative for a query shares an identity with the query's scene but
/// does not contain the query identity.
pub fn is_hard_negative(bundle: &DatasetBundle, query_identity: PersonId, query_scene: SceneId, scene: SceneId) -> bool {
    let ids = bundle.known_identities_in(scene);
    !ids.contains(&query_identity) && !ids.is_disjoint(&bundle.known_identities_in(query_scene))
}

/// Draws positive and hard-negative scenes for every known batch person.
/// With `use_lut` the pool is every scene in the lookup table, otherwise only
/// the batch-resident scenes. Short pools are taken whole.
pub fn sample_for_batch(
    plan: &SamplePlan,
    batch_persons: &[AnnId],
    batch_scenes: &BTreeSet<SceneId>,
    bundle: &DatasetBundle,
    lut: &GfnLut,
    seed: u64,
) -> Result<Vec<PersonSample>> {
    plan.validate()?;
    let pool: Vec<SceneId> = if plan.use_lut {
        lut.scene_ids().collect()
    } else {
        batch_scenes.iter().copied().collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(batch_persons.len());
    for &ann_id in batch_persons {
        let ann = bundle
            .annotation(ann_id)
            .ok_or_else(|| Error::contract(format!("annotation {ann_id} not in bundle")))?;
        let Some(pid) = ann.person_id else {
            continue;
        };
        let with_person = bundle.scenes_with(pid).expect("known identity has scenes");
        let own_ids = bundle.known_identities_in(ann.scene_id);
        let pos_pool = pool.iter().copied().filter(|s| with_person.contains(s));
        let mut positives = pos_pool.choose_multiple(&mut rng, plan.positives_per_person);
        let neg_pool = pool.iter().copied().filter(|s| {
            !with_person.contains(s) && !bundle.known_identities_in(*s).is_disjoint(&own_ids)
        });
        let mut hard_negatives = neg_pool.choose_multiple(&mut rng, plan.hard_negatives_per_person);
        positives.sort_unstable();
        hard_negatives.sort_unstable();
        out.push(PersonSample {
            ann_id,
            positives,
            hard_negatives,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table2() -> OimTable {
        let mut t = OimTable::new(3, [1, 2], 4);
        t.update(1, &[1.0, 0.0, 0.0]).unwrap();
        t.update(2, &[0.0, 1.0, 0.0]).unwrap();
        t
    }

    #[test]
    fn single_identity_loss_is_zero() {
        let mut t = OimTable::new(2, [5], 10);
        t.update(5, &[0.6, 0.8]).unwrap();
        let r = oim_loss(&[vec![0.6, 0.8]], &[Some(5)], &t).unwrap();
        assert_eq!(r.loss, 0.0);
    }

    #[test]
    fn orthogonal_prototypes_loss() {
        let t = table2();
        let r = oim_loss(&[vec![2.0, 0.0, 0.0]], &[Some(1)], &t).unwrap();
        let expected = (-30f64).exp().ln_1p();
        assert!((r.loss - expected).abs() < 1e-20, "{}", r.loss);
        assert!((r.loss - 9.36e-14).abs() < 1e-15);
    }

    #[test]
    fn unlabeled_entries_contribute_nothing() {
        let t = table2();
        let r = oim_loss(&[vec![0.3, 0.1, 0.0], vec![1.0, 0.2, 0.1]], &[None, Some(2)], &t).unwrap();
        assert_eq!(r.labeled, 1);
        assert!(r.grads[0].iter().all(|&g| g == 0.0));
        assert!(oim_loss(&[vec![1.0, 0.0, 0.0]], &[Some(9)], &t).is_err());
    }

    #[test]
    fn momentum_update_examples() {
        let mut t = table2();
        t.update(1, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(t.lookup(1).unwrap(), &[1.0, 0.0, 0.0]);
        t.update(1, &[0.0, 0.0, 5.0]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let p = t.lookup(1).unwrap();
        assert!((p[0] - h).abs() < 1e-15 && (p[2] - h).abs() < 1e-15);
        for _ in 0..60 {
            t.update(1, &[0.0, 3.0, 0.0]).unwrap();
        }
        assert!((t.lookup(1).unwrap()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lookup_semantics() {
        let mut t = OimTable::new(2, [1, 2], 4);
        assert!(t.lookup(1).is_err());
        assert!(t.lookup(3).is_err());
        t.update(1, &[3.0, 4.0]).unwrap();
        assert_eq!(t.lookup(1).unwrap(), &[0.6, 0.8]);
        assert_eq!(t.lookup(1).unwrap(), t.lookup(1).unwrap());
    }

    #[test]
    fn queue_is_fifo_with_capacity() {
        let mut t = OimTable::new(1, [], 3);
        for k in 0..5 {
            t.push_unknown(&[if k % 2 == 0 { 1.0 } else { -1.0 }]).unwrap();
        }
        let q: Vec<f64> = t.queue().map(|e| e[0]).collect();
        assert_eq!(q, vec![1.0, -1.0, 1.0]);
    }

    #[test]
    fn table_checkpoint_round_trip() {
        let mut t = table2();
        t.push_unknown(&[0.0, 0.0, 2.0]).unwrap();
        let (p, q) = t.to_stores().unwrap();
        let back = OimTable::from_stores(&p, &q, t.capacity()).unwrap();
        assert_eq!(back.lookup(2).unwrap(), t.lookup(2).unwrap());
        assert_eq!(back.queue().len(), 1);
    }

    #[test]
    fn lut_refresh_replaces_entries() {
        let mut lut = GfnLut::new();
        lut.refresh(0, [(1, vec![1.0]), (2, vec![2.0])], [(10, vec![0.5])]);
        lut.refresh(1, [(3, vec![3.0])], []);
        assert_eq!(lut.epoch(), Some(1));
        assert!(lut.scene(1).is_none());
        assert_eq!(lut.scene(3), Some(&[3.0][..]));
        assert_eq!(lut.num_persons(), 0);
    }

    #[test]
    fn plan_validation() {
        let p = SamplePlan {
            positives_per_person: 0,
            hard_negatives_per_person: 0,
            use_lut: true,
        };
        assert!(p.validate().is_err());
        assert!(SamplePlan { use_lut: false, ..p }.validate().is_ok());
    }
}
