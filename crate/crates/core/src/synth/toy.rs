use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::TrainableParams;
use super::train::{train_gfn, TrainOptions, TrainOutcome};
use super::world::{generate_world, SynthConfig, SynthWorld};
use crate::data::{resolve_retrieval_spec, RetrievalFormat, RetrievalSpec, SceneId};
use crate::error::{Error, Result};
use crate::oim::{OimTable, SamplePlan, QUEUE_SIZE_SMALL};
use crate::eval::{gfn_scene_metrics, metric_deltas, person_retrieval_metrics, MetricReport, DEFAULT_IOU_THRESHOLD};
use crate::gfn::GfnConfig;
use crate::retrieval::{score_gallery_scenes, search_all, GalleryDetection, InMemoryDetections, RetrievalTask, SearchFlags};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    /// Scene retrieval by filter score.
    pub gfn_scene: MetricReport,
    /// Person retrieval per flag setting, keyed by [`SearchFlags::name`].
    pub person: BTreeMap<String, MetricReport>,
    /// Each flag setting minus the no-filter ranking.
    pub deltas: BTreeMap<String, BTreeMap<String, f64>>,
    /// Expected scene top-1 of a random ranking.
    pub chance_top1: f64,
}

impl ToyReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }
}

/// Queries, embedded gallery scenes and the detection provider of a toy world.
pub type ToyInputs = (Vec<RetrievalTask>, BTreeMap<SceneId, Vec<f64>>, InMemoryDetections);

/// Embeds `world` with `params` and builds one task per known crop, gallery
/// = every other scene. Detections are the ground-truth boxes with score 1.
pub fn toy_tasks(
    world: &SynthWorld,
    params: &TrainableParams,
    query_scenes: Option<&BTreeSet<SceneId>>,
) -> Result<ToyInputs> {
    let scenes: BTreeMap<SceneId, Vec<f64>> = world
        .scene_features
        .iter()
        .map(|(&s, u)| (s, params.embed_scene(u)))
        .collect();
    let persons: BTreeMap<_, Vec<f64>> = world
        .person_features
        .iter()
        .map(|(&a, r)| (a, params.embed_person(r)))
        .collect();
    let spec = RetrievalSpec {
        format: RetrievalFormat::All,
        queries: Vec::new(),
    };
    let tasks = resolve_retrieval_spec(&spec, &world.bundle, true)?
        .iter()
        .filter(|q| query_scenes.is_none_or(|k| k.contains(&q.query_scene_id)))
        .map(|q| RetrievalTask::new(q, persons[&q.query_ann_id].clone(), scenes[&q.query_scene_id].clone()))
        .collect::<Result<Vec<_>>>()?;
    let dets = world
        .bundle
        .annotations()
        .iter()
        .map(|a| GalleryDetection::new(a.scene_id, a.bbox, persons[&a.ann_id].clone(), 1.0))
        .collect::<Result<Vec<_>>>()?;
    Ok((tasks, scenes, InMemoryDetections::new(dets)))
}

/// Scene-retrieval metrics of the filter plus person retrieval under all
/// four flag settings, with deltas against the unfiltered ranking.
pub fn evaluate_toy(
    world: &SynthWorld,
    params: &TrainableParams,
    cfg: &GfnConfig,
    query_scenes: Option<&BTreeSet<SceneId>>,
) -> Result<ToyReport> {
    let (tasks, scenes, dets) = toy_tasks(world, params, query_scenes)?;
    let fusion = &params.fusion;
    let scores = tasks
        .iter()
        .map(|t| score_gallery_scenes(t, &scenes, cfg, fusion))
        .collect::<Result<Vec<_>>>()?;
    let gfn_scene = gfn_scene_metrics(&tasks, &scores, &world.bundle)?;

    let mut chance = Vec::new();
    for t in &tasks {
        let g = t.gallery_set();
        let pos = g
            .iter()
            .filter(|&&s| world.bundle.known_identities_in(s).contains(&t.person_id))
            .count();
        if pos > 0 {
            chance.push(pos as f64 / g.len() as f64);
        }
    }
    let chance_top1 = if chance.is_empty() {
        0.0
    } else {
        chance.iter().sum::<f64>() / chance.len() as f64
    };

    let mut person = BTreeMap::new();
    for flags in SearchFlags::SWEEP {
        let results = search_all(&tasks, &scenes, &dets, cfg, fusion, flags)?;
        let report = person_retrieval_metrics(&tasks, &results, &world.bundle, DEFAULT_IOU_THRESHOLD)?;
        person.insert(flags.name().to_string(), report);
    }
    let base = &person[SearchFlags::OFF.name()];
    let deltas = person
        .iter()
        .filter(|(k, _)| k.as_str() != SearchFlags::OFF.name())
        .map(|(k, r)| (k.clone(), metric_deltas(base, r)))
        .collect();
    Ok(ToyReport {
        gfn_scene,
        person,
        deltas,
        chance_top1,
    })
}

/// One seeded toy experiment: world, held-out split, optimiser budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyRunConfig {
    pub world: SynthConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Fraction of scenes withheld from training; their crops are the
    /// evaluation queries.
    pub held_out_fraction: f64,
    pub queue_capacity: usize,
    pub plan: SamplePlan,
    pub train: TrainOptions,
}

impl Default for ToyRunConfig {
    /// One person per scene: with several, the query scene's other occupants
    /// leak through the fused query and cap held-out filter top-1 well below
    /// the single-occupant level.
    fn default() -> Self {
        ToyRunConfig {
            world: SynthConfig {
                persons_per_scene: [1, 1],
                ..SynthConfig::default()
            },
            learning_rate: 0.1,
            epochs: 200,
            held_out_fraction: 0.2,
            queue_capacity: QUEUE_SIZE_SMALL,
            plan: SamplePlan::default(),
            train: TrainOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyRun {
    pub held_out: BTreeSet<SceneId>,
    pub untrained: ToyReport,
    pub trained: ToyReport,
    pub outcome: TrainOutcome,
}

/// A seeded random subset of `round(fraction · scenes)` scenes, at least one
/// and leaving at least one for training.
pub fn held_out_scenes(world: &SynthWorld, fraction: f64, seed: u64) -> Result<BTreeSet<SceneId>> {
    let ids = world.bundle.scene_ids();
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::contract(format!("held-out fraction must lie in (0, 1), got {fraction}")));
    }
    if ids.len() < 2 {
        return Err(Error::contract("a held-out split needs at least two scenes"));
    }
    let n = ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ids.choose_multiple(&mut rng, n).copied().collect())
}

/// Generates the world, trains on the non-held-out scenes and evaluates the
/// held-out queries against the full gallery before and after training.
pub fn run_toy(cfg: &ToyRunConfig, gfn: &GfnConfig) -> Result<ToyRun> {
    let world = generate_world(&cfg.world)?;
    let held_out = held_out_scenes(&world, cfg.held_out_fraction, cfg.world.seed ^ 0x5EED)?;
    let keep: BTreeSet<SceneId> = world.scene_features.keys().filter(|s| !held_out.contains(s)).copied().collect();
    let train_world = world.subset(&keep);
    let params = TrainableParams::init(cfg.world.dim, cfg.learning_rate, cfg.epochs, cfg.world.seed ^ 0x1417);
    let untrained = evaluate_toy(&world, &params, gfn, Some(&held_out))?;
    let table = OimTable::new(cfg.world.dim, world.prototypes.keys().copied(), cfg.queue_capacity);
    let outcome = train_gfn(&train_world, params, gfn, &cfg.plan, table, &cfg.train)?;
    let trained = evaluate_toy(&world, &outcome.params, gfn, Some(&held_out))?;
    Ok(ToyRun {
        held_out,
        untrained,
        trained,
        outcome,
    })
}
