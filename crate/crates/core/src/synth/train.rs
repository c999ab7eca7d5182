use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{affine_backward, ParamGrads, TrainableParams};
use super::world::{generate_world, SynthConfig, SynthWorld};
use crate::data::{AnnId, PersonId, SceneId};
use crate::error::{Error, Result};
use crate::gfn::{
    baseline_gfn_loss, combined_gfn_loss, scene_only_gfn_loss, BatchStats, EmbeddingSet, FusionMode, GfnConfig,
    Objective, PairIndex, QuerySource, Reduction, World, WorldPerson,
};
use crate::math::axpy;
use crate::oim::{oim_loss, sample_for_batch, GfnLut, OimTable, SamplePlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    /// Scenes per mini-batch; every known person of those scenes joins it.
    pub batch_size: usize,
    pub seed: u64,
    /// Check analytic against numeric gradients on a small world first.
    pub audit: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 8,
            seed: 0,
            audit: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub steps: usize,
    pub reid: f64,
    pub gfn: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: TrainableParams,
    pub table: OimTable,
    pub curve: Vec<EpochLoss>,
    pub audit: Option<GradAudit>,
}

/// Loss of one step split into its two terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub reid: f64,
    pub gfn: f64,
}

impl StepLoss {
    pub fn total(&self) -> f64 {
        self.reid + self.gfn
    }
}

/// Everything one step's loss depends on apart from the parameters.
#[derive(Clone, Debug)]
pub struct BatchProblem {
    pub person_raw: Vec<Vec<f64>>,
    pub labels: Vec<PersonId>,
    /// Index into the batch scenes.
    pub own_scene: Vec<usize>,
    /// Raw features of the batch scenes, which receive gradients.
    pub scene_raw: Vec<Vec<f64>>,
    /// Gradient-stopped embeddings of sampled lookup-table scenes.
    pub lut_scenes: Vec<Vec<f64>>,
    /// Gradient-stopped query embeddings per person, used when the query
    /// source is the prototype table.
    pub frozen_queries: Option<Vec<Vec<f64>>>,
    pub world: World,
}

/// Assembles a step from batch scenes plus extra (lookup-table) scenes.
#[allow(clippy::too_many_arguments)]
pub fn build_problem(
    world: &SynthWorld,
    params: &TrainableParams,
    batch_scenes: &[SceneId],
    extra_scenes: &[SceneId],
    lut: &GfnLut,
    table: &OimTable,
    query_source: QuerySource,
) -> Result<BatchProblem> {
    let bundle = &world.bundle;
    let mut rosters = Vec::with_capacity(batch_scenes.len() + extra_scenes.len());
    let mut persons = Vec::new();
    let mut person_raw = Vec::new();
    let mut labels = Vec::new();
    let mut own_scene = Vec::new();
    for (k, &sid) in batch_scenes.iter().enumerate() {
        rosters.push(bundle.known_identities_in(sid));
        for a in bundle.annotations_in(sid) {
            let Some(pid) = a.person_id else { continue };
            persons.push(WorldPerson {
                identity: pid,
                own_scene: k,
            });
            person_raw.push(world.person_features[&a.ann_id].clone());
            labels.push(pid);
            own_scene.push(k);
        }
    }
    let mut lut_scenes = Vec::with_capacity(extra_scenes.len());
    for &sid in extra_scenes {
        rosters.push(bundle.known_identities_in(sid));
        let emb = lut
            .scene(sid)
            .ok_or_else(|| Error::data(format!("scene {sid} missing from lookup table")))?;
        lut_scenes.push(emb.to_vec());
    }
    let frozen_queries = match query_source {
        QuerySource::Batch => None,
        // identities not yet seen by the table fall back to a detached copy
        // of their current embedding
        QuerySource::Prototype => Some(
            person_raw
                .iter()
                .zip(&labels)
                .map(|(r, pid)| match table.lookup(*pid) {
                    Ok(p) => p.to_vec(),
                    Err(_) => params.embed_person(r),
                })
                .collect(),
        ),
    };
    Ok(BatchProblem {
        person_raw,
        labels,
        own_scene,
        scene_raw: batch_scenes.iter().map(|s| world.scene_features[s].clone()).collect(),
        lut_scenes,
        frozen_queries,
        world: World::new(rosters, persons)?,
    })
}

/// Loss and parameter gradient of one step (mean-reduced re-id and filter
/// terms, summed). Returns the fusion batch statistics for the running
/// update.
pub fn step_loss(
    params: &TrainableParams,
    problem: &BatchProblem,
    cfg: &GfnConfig,
    table: &OimTable,
) -> Result<(StepLoss, ParamGrads, Option<BatchStats>)> {
    let d = params.dim;
    let xs: Vec<Vec<f64>> = problem.person_raw.iter().map(|r| params.embed_person(r)).collect();
    let labels: Vec<Option<PersonId>> = problem.labels.iter().map(|&p| Some(p)).collect();
    let reid = oim_loss(&xs, &labels, table)?;

    let mut scenes = EmbeddingSet::trainable(problem.scene_raw.iter().map(|u| params.embed_scene(u)).collect());
    for e in &problem.lut_scenes {
        scenes.push(e.clone(), true);
    }
    let persons = match &problem.frozen_queries {
        Some(q) => EmbeddingSet::frozen(q.clone()),
        None => EmbeddingSet::trainable(xs.clone()),
    };
    let gfn = match cfg.objective {
        Objective::Baseline => {
            let pairs = PairIndex::query_scene(&problem.world);
            baseline_gfn_loss(&persons, &scenes, &pairs, cfg.tau, Reduction::Mean)?
        }
        Objective::Combined => {
            let pairs = PairIndex::query_scene(&problem.world);
            let mut fusion = params.fusion.clone();
            if fusion.mode == FusionMode::Inference {
                fusion.mode = FusionMode::Train;
            }
            combined_gfn_loss(
                &persons,
                &scenes,
                &problem.own_scene,
                &pairs,
                &fusion,
                cfg.tau,
                cfg.beta,
                Reduction::Mean,
            )?
        }
        Objective::SceneOnly => {
            let pairs = PairIndex::scene_scene(&problem.world);
            scene_only_gfn_loss(&scenes, &pairs, cfg.tau, Reduction::Mean)?
        }
    };

    let mut g = ParamGrads::zeros(d);
    for (i, r) in problem.person_raw.iter().enumerate() {
        let mut dx = reid.grads[i].clone();
        if let Some(gp) = gfn.grad_persons.get(i) {
            axpy(&mut dx, 1.0, gp);
        }
        affine_backward(&mut g.person_weight, &mut g.person_bias, &dx, r);
    }
    for (k, u) in problem.scene_raw.iter().enumerate() {
        affine_backward(&mut g.scene_weight, &mut g.scene_bias, &gfn.grad_scenes[k], u);
    }
    if !gfn.grad_gamma.is_empty() {
        g.gamma = gfn.grad_gamma;
        g.delta = gfn.grad_delta;
    }
    Ok((
        StepLoss {
            reid: reid.loss,
            gfn: gfn.loss,
        },
        g,
        gfn.fusion_stats,
    ))
}

/// Re-embeds every scene and person with the current parameters.
pub fn refresh_lut(lut: &mut GfnLut, epoch: usize, world: &SynthWorld, params: &TrainableParams) {
    lut.refresh(
        epoch,
        world.scene_features.iter().map(|(&s, u)| (s, params.embed_scene(u))),
        world.person_features.iter().map(|(&a, r)| (a, params.embed_person(r))),
    );
}

/// Trains with plain gradient descent on re-id plus filter loss.
///
/// Each epoch refreshes the lookup table, shuffles the scenes into batches
/// of `batch_size`, and for every batch samples extra candidate scenes per
/// `plan`. After each step the fusion running statistics and the OIM table
/// are updated from the step's (pre-update) embeddings.
pub fn train_gfn(
    world: &SynthWorld,
    mut params: TrainableParams,
    cfg: &GfnConfig,
    plan: &SamplePlan,
    mut table: OimTable,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    plan.validate()?;
    params.validate()?;
    if opts.batch_size == 0 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    if world.dim() != params.dim || table.dim() != params.dim {
        return Err(Error::contract(format!(
            "world dim {}, parameter dim {} and table dim {} must agree",
            world.dim(),
            params.dim,
            table.dim()
        )));
    }
    let audit = if opts.audit {
        let a = gradient_audit(cfg, opts.seed)?;
        if a.max_rel_err > AUDIT_TOLERANCE {
            return Err(Error::Diverged {
                step: 0,
                detail: format!("gradient audit failed: max relative error {:.3e}", a.max_rel_err),
            });
        }
        Some(a)
    } else {
        None
    };
    params.fusion.mode = FusionMode::Train;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut lut = GfnLut::new();
    let mut scene_order = world.bundle.scene_ids();
    let mut curve = Vec::with_capacity(params.epochs);
    let mut step = 0usize;
    for epoch in 0..params.epochs {
        refresh_lut(&mut lut, epoch, world, &params);
        scene_order.shuffle(&mut rng);
        let (mut sum_reid, mut sum_gfn, mut steps) = (0.0, 0.0, 0usize);
        for chunk in scene_order.chunks(opts.batch_size) {
            let mut batch: Vec<SceneId> = chunk.to_vec();
            batch.sort_unstable();
            let batch_set: BTreeSet<SceneId> = batch.iter().copied().collect();
            let ann_ids: Vec<AnnId> = batch
                .iter()
                .flat_map(|&s| world.bundle.annotations_in(s).filter(|a| a.is_known).map(|a| a.ann_id))
                .collect();
            if ann_ids.is_empty() {
                continue;
            }
            let sample_seed = opts.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let samples = sample_for_batch(plan, &ann_ids, &batch_set, &world.bundle, &lut, sample_seed)?;
            let extra: Vec<SceneId> = samples
                .iter()
                .flat_map(|s| s.positives.iter().chain(&s.hard_negatives).copied())
                .filter(|s| !batch_set.contains(s))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if params.flat().iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    detail: "non-finite parameter".into(),
                });
            }
            let problem = build_problem(world, &params, &batch, &extra, &lut, &table, cfg.query_source)?;
            let (loss, grads, stats) = step_loss(&params, &problem, cfg, &table).map_err(|e| match e {
                Error::Degenerate(detail) => Error::Diverged { step, detail },
                other => other,
            })?;
            if !loss.total().is_finite() || grads.flat().iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss {} (reid {}, gfn {})", loss.total(), loss.reid, loss.gfn),
                });
            }
            let embeddings: Vec<Vec<f64>> = problem.person_raw.iter().map(|r| params.embed_person(r)).collect();
            let labels: Vec<Option<PersonId>> = problem.labels.iter().map(|&p| Some(p)).collect();
            params.apply(&grads);
            if let Some(s) = stats {
                params.fusion.update_running(&s);
            }
            table.absorb(&embeddings, &labels)?;
            sum_reid += loss.reid;
            sum_gfn += loss.gfn;
            steps += 1;
            step += 1;
        }
        let n = steps.max(1) as f64;
        let e = EpochLoss {
            epoch,
            steps,
            reid: sum_reid / n,
            gfn: sum_gfn / n,
            total: (sum_reid + sum_gfn) / n,
        };
        log::debug!("epoch {epoch}: reid {:.4} gfn {:.4}", e.reid, e.gfn);
        curve.push(e);
    }
    params.fusion.mode = FusionMode::Inference;
    Ok(TrainOutcome {
        params,
        table,
        curve,
        audit,
    })
}

/// A loss curve as CSV with header `epoch,steps,reid,gfn,total`.
pub fn curve_to_csv(curve: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,steps,reid,gfn,total\n");
    for e in curve {
        s.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.steps, e.reid, e.gfn, e.total));
    }
    s
}

pub const AUDIT_TOLERANCE: f64 = 1e-4;
pub const AUDIT_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradAudit {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`, maximised over components.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Full-step gradient check on a dim-8 world with randomised parameters,
/// one frozen lookup-table scene and a populated OIM table.
pub fn gradient_audit(cfg: &GfnConfig, seed: u64) -> Result<GradAudit> {
    let wcfg = SynthConfig {
        num_identities: 4,
        num_scenes: 6,
        persons_per_scene: [1, 3],
        dim: 8,
        identity_dim: 6,
        identity_noise_std: 0.2,
        scene_context_std: 0.5,
        cameras: 2,
        seed,
    };
    let world = generate_world(&wcfg)?;
    let mut params = TrainableParams::init(8, 0.1, 1, seed ^ 0xA5A5);
    let mut perturb = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let jitter = rand_distr::Normal::new(0.0, 0.3).expect("positive std");
    use rand_distr::Distribution;
    let mut flat = params.flat();
    for v in flat.iter_mut() {
        *v += jitter.sample(&mut perturb);
    }
    params.set_flat(&flat);

    let ids: BTreeSet<PersonId> = world.prototypes.keys().copied().collect();
    let mut table = OimTable::new(8, ids, 4);
    for a in world.bundle.annotations() {
        table.update(a.person_id.expect("synthetic persons are known"), &params.embed_person(&world.person_features[&a.ann_id]))?;
    }
    table.push_unknown(&[1.0, -0.5, 0.2, 0.0, 0.3, 0.1, -0.2, 0.4])?;

    let mut lut = GfnLut::new();
    refresh_lut(&mut lut, 0, &world, &params);
    let scene_ids = world.bundle.scene_ids();
    let (batch, extra) = scene_ids.split_at(scene_ids.len() - 1);
    let problem = build_problem(&world, &params, batch, extra, &lut, &table, cfg.query_source)?;

    let (_, grads, _) = step_loss(&params, &problem, cfg, &table)?;
    let analytic = grads.flat();
    let mut probe = params.clone();
    let numeric = numeric_gradient(&flat, AUDIT_STEP, |x| {
        probe.set_flat(x);
        step_loss(&probe, &problem, cfg, &table).map_or(f64::NAN, |(l, _, _)| l.total())
    });
    Ok(GradAudit {
        max_rel_err: max_relative_error(&analytic, &numeric, 1e-6),
        checked: analytic.len(),
    })
}
