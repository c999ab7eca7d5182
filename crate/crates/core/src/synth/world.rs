use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{AnnId, DatasetBundle, PersonAnnotation, PersonId, SceneId, SceneRecord};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::math::normalize;

const SLOT_WIDTH: u32 = 64;
const SCENE_HEIGHT: u32 = 128;

/// Shape of a generated world.
///
/// Identity prototypes live in the first `identity_dim` coordinates; every
/// scene additionally carries a random context vector in the remaining
/// coordinates. Raw scene features are therefore dominated by context until a
/// projection learns to discard it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub num_scenes: usize,
    /// Inclusive `[min, max]` persons per scene.
    pub persons_per_scene: [usize; 2],
    pub dim: usize,
    pub identity_dim: usize,
    /// Std of the Gaussian noise added to every person and scene feature.
    pub identity_noise_std: f64,
    /// Per-coordinate std of the scene context vector.
    pub scene_context_std: f64,
    pub cameras: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_identities: 50,
            num_scenes: 200,
            persons_per_scene: [1, 3],
            dim: 32,
            identity_dim: 24,
            identity_noise_std: 0.05,
            scene_context_std: 1.0,
            cameras: 4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 || self.num_scenes == 0 || self.cameras == 0 {
            return Err(Error::contract("identity, scene and camera counts must be at least 1"));
        }
        if self.dim < 2 {
            return Err(Error::contract(format!("dim must be at least 2, got {}", self.dim)));
        }
        if self.identity_dim == 0 || self.identity_dim > self.dim {
            return Err(Error::contract(format!(
                "identity_dim {} outside 1..={}",
                self.identity_dim, self.dim
            )));
        }
        let [lo, hi] = self.persons_per_scene;
        if lo == 0 || lo > hi {
            return Err(Error::contract(format!("invalid persons_per_scene range [{lo}, {hi}]")));
        }
        if hi > self.num_identities {
            return Err(Error::contract(format!(
                "scenes of up to {hi} persons need at least {hi} identities, got {}",
                self.num_identities
            )));
        }
        for (name, v) in [
            ("identity_noise_std", self.identity_noise_std),
            ("scene_context_std", self.scene_context_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// A generated world: annotations plus the raw features the trainable heads
/// consume.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub bundle: DatasetBundle,
    pub prototypes: BTreeMap<PersonId, Vec<f64>>,
    pub person_features: BTreeMap<AnnId, Vec<f64>>,
    pub scene_features: BTreeMap<SceneId, Vec<f64>>,
}

impl SynthWorld {
    pub fn dim(&self) -> usize {
        self.scene_features.values().next().map_or(0, Vec::len)
    }

    /// The sub-world of the scenes in `keep`, with their persons and features.
    pub fn subset(&self, keep: &BTreeSet<SceneId>) -> SynthWorld {
        let bundle = self.bundle.subset(keep, self.bundle.partition().to_string());
        let person_features = bundle
            .annotations()
            .iter()
            .map(|a| (a.ann_id, self.person_features[&a.ann_id].clone()))
            .collect();
        SynthWorld {
            prototypes: self.prototypes.clone(),
            person_features,
            scene_features: keep
                .iter()
                .filter_map(|s| self.scene_features.get(s).map(|f| (*s, f.clone())))
                .collect(),
            bundle,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dist: &Normal<f64>, n: usize) -> Vec<f64> {
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn noisy_unit(base: &[f64], std: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let noise = Normal::new(0.0, std).expect("std validated");
    let v: Vec<f64> = base.iter().map(|b| b + noise.sample(rng)).collect();
    normalize(&v)
}

pub fn generate_world(cfg: &SynthConfig) -> Result<SynthWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let context = Normal::new(0.0, cfg.scene_context_std).expect("std validated");

    let mut prototypes = BTreeMap::new();
    for pid in 1..=cfg.num_identities as PersonId {
        let mut v = gaussian(&mut rng, &unit, cfg.identity_dim);
        v.resize(cfg.dim, 0.0);
        prototypes.insert(pid, normalize(&v)?);
    }

    let [lo, hi] = cfg.persons_per_scene;
    let mut scenes = Vec::with_capacity(cfg.num_scenes);
    let mut annotations = Vec::new();
    let mut person_features = BTreeMap::new();
    let mut scene_features = BTreeMap::new();
    let mut next_ann: AnnId = 1;
    for k in 0..cfg.num_scenes {
        let sid = k as SceneId + 1;
        let count = rng.gen_range(lo..=hi);
        let mut roster: Vec<PersonId> = sample(&mut rng, cfg.num_identities, count)
            .into_iter()
            .map(|i| i as PersonId + 1)
            .collect();
        roster.sort_unstable();

        let mut base = vec![0.0; cfg.dim];
        for (slot, &pid) in roster.iter().enumerate() {
            let proto = &prototypes[&pid];
            for (b, p) in base.iter_mut().zip(proto) {
                *b += p / count as f64;
            }
            person_features.insert(next_ann, noisy_unit(proto, cfg.identity_noise_std, &mut rng)?);
            annotations.push(PersonAnnotation {
                ann_id: next_ann,
                scene_id: sid,
                bbox: BBox::new(f64::from(slot as u32 * SLOT_WIDTH + 8), 8.0, 48.0, 112.0),
                person_id: Some(pid),
                is_known: true,
            });
            next_ann += 1;
        }
        for b in base.iter_mut().skip(cfg.identity_dim) {
            *b += context.sample(&mut rng);
        }
        scene_features.insert(sid, noisy_unit(&base, cfg.identity_noise_std, &mut rng)?);
        scenes.push(SceneRecord {
            scene_id: sid,
            file_name: format!("synth_{sid:05}.jpg"),
            width: SLOT_WIDTH * hi as u32,
            height: SCENE_HEIGHT,
            cam_id: (k % cfg.cameras) as i64 + 1,
        });
    }
    let bundle = DatasetBundle::new(format!("synth_{}", cfg.seed), scenes, annotations)?;
    Ok(SynthWorld {
        bundle,
        prototypes,
        person_features,
        scene_features,
    })
}
