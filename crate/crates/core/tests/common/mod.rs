//! Shared fixtures and finite-difference oracles for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use gfn_core::data::PersonId;
use gfn_core::gfn::{
    baseline_gfn_loss, combined_gfn_loss, fuse_batch, scene_only_gfn_loss, EmbeddingSet, FusionMode, FusionParams,
    PairIndex, Reduction, World, WorldPerson, DEFAULT_BETA, DEFAULT_TAU,
};
use gfn_core::oim::{oim_loss, OimTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
pub const FLOOR: f64 = 1e-6;
pub const DIM: usize = 8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    // Box-Muller keeps this file free of extra distributions
    (0..d)
        .map(|_| {
            let u: f64 = rng.gen_range(1e-12..1.0);
            let v: f64 = rng.gen();
            (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        })
        .collect()
}

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR))
        .fold(0.0, f64::max)
}

/// Central differences of `f` with respect to every coordinate of `x`.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + H;
            let up = f(&p);
            p[i] = x[i] - H;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// A small random world: 2..=6 scenes over up to 4 identities, up to 6
/// persons each drawn from a scene roster, with random embeddings.
pub struct RandomWorld {
    pub world: World,
    pub persons: Vec<Vec<f64>>,
    pub scenes: Vec<Vec<f64>>,
    pub own_scene: Vec<usize>,
}

pub fn random_world(seed: u64) -> RandomWorld {
    let mut r = rng(seed);
    let m = r.gen_range(2..=6);
    let ids = r.gen_range(2..=4) as PersonId;
    let mut rosters: Vec<BTreeSet<PersonId>> = (0..m)
        .map(|_| {
            let mut s = BTreeSet::new();
            for _ in 0..r.gen_range(1..=3) {
                s.insert(r.gen_range(1..=ids));
            }
            s
        })
        .collect();
    // guarantee at least one identity appears in two scenes
    let shared = *rosters[0].iter().next().unwrap();
    rosters[1].insert(shared);
    let mut slots: Vec<(PersonId, usize)> = rosters
        .iter()
        .enumerate()
        .flat_map(|(k, s)| s.iter().map(move |&p| (p, k)))
        .collect();
    while slots.len() > 6 {
        let i = r.gen_range(0..slots.len());
        slots.remove(i);
    }
    let persons: Vec<WorldPerson> = slots
        .iter()
        .map(|&(identity, own_scene)| WorldPerson { identity, own_scene })
        .collect();
    let own_scene = slots.iter().map(|s| s.1).collect();
    let world = World::new(rosters, persons).unwrap();
    RandomWorld {
        persons: (0..world.num_persons()).map(|_| gaussian_vec(&mut r, DIM)).collect(),
        scenes: (0..m).map(|_| gaussian_vec(&mut r, DIM)).collect(),
        own_scene,
        world,
    }
}

fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn unflatten(flat: &[f64], n: usize) -> Vec<Vec<f64>> {
    flat.chunks(DIM).take(n).map(<[f64]>::to_vec).collect()
}

pub fn baseline_grad_error(w: &RandomWorld) -> f64 {
    let pairs = PairIndex::query_scene(&w.world);
    let loss = |p: &[Vec<f64>], s: &[Vec<f64>]| {
        baseline_gfn_loss(
            &EmbeddingSet::trainable(p.to_vec()),
            &EmbeddingSet::trainable(s.to_vec()),
            &pairs,
            DEFAULT_TAU,
            Reduction::Sum,
        )
        .unwrap()
    };
    let out = loss(&w.persons, &w.scenes);
    let np = w.persons.len();
    let x: Vec<f64> = flatten(&w.persons).into_iter().chain(flatten(&w.scenes)).collect();
    let numeric = central_diff(&x, |v| {
        let (a, b) = v.split_at(np * DIM);
        loss(&unflatten(a, np), &unflatten(b, w.scenes.len())).loss
    });
    let analytic: Vec<f64> = flatten(&out.grad_persons).into_iter().chain(flatten(&out.grad_scenes)).collect();
    rel_err(&analytic, &numeric)
}

pub fn scene_only_grad_error(w: &RandomWorld) -> f64 {
    let pairs = PairIndex::scene_scene(&w.world);
    let loss = |s: &[Vec<f64>]| {
        scene_only_gfn_loss(&EmbeddingSet::trainable(s.to_vec()), &pairs, DEFAULT_TAU, Reduction::Sum).unwrap()
    };
    let out = loss(&w.scenes);
    let numeric = central_diff(&flatten(&w.scenes), |v| loss(&unflatten(v, w.scenes.len())).loss);
    rel_err(&flatten(&out.grad_scenes), &numeric)
}

/// Checks persons, scenes, gamma and delta through the train-mode fusion.
pub fn combined_grad_error(w: &RandomWorld, seed: u64) -> f64 {
    let mut r = rng(seed);
    let pairs = PairIndex::query_scene(&w.world);
    let mut fusion = FusionParams::new(DIM);
    fusion.gamma = gaussian_vec(&mut r, DIM).iter().map(|g| 1.0 + 0.3 * g).collect();
    fusion.delta = gaussian_vec(&mut r, DIM).iter().map(|g| 0.3 * g).collect();
    let np = w.persons.len();
    let ns = w.scenes.len();
    let loss = |p: &[Vec<f64>], s: &[Vec<f64>], f: &FusionParams| {
        combined_gfn_loss(
            &EmbeddingSet::trainable(p.to_vec()),
            &EmbeddingSet::trainable(s.to_vec()),
            &w.own_scene,
            &pairs,
            f,
            DEFAULT_TAU,
            DEFAULT_BETA,
            Reduction::Sum,
        )
        .unwrap()
    };
    let out = loss(&w.persons, &w.scenes, &fusion);
    let x: Vec<f64> = flatten(&w.persons)
        .into_iter()
        .chain(flatten(&w.scenes))
        .chain(fusion.gamma.iter().copied())
        .chain(fusion.delta.iter().copied())
        .collect();
    let numeric = central_diff(&x, |v| {
        let (p, rest) = v.split_at(np * DIM);
        let (s, rest) = rest.split_at(ns * DIM);
        let (g, d) = rest.split_at(DIM);
        let mut f = fusion.clone();
        f.gamma = g.to_vec();
        f.delta = d.to_vec();
        loss(&unflatten(p, np), &unflatten(s, ns), &f).loss
    });
    let analytic: Vec<f64> = flatten(&out.grad_persons)
        .into_iter()
        .chain(flatten(&out.grad_scenes))
        .chain(out.grad_gamma.iter().copied())
        .chain(out.grad_delta.iter().copied())
        .collect();
    rel_err(&analytic, &numeric)
}

/// Linear probe `Σ c · fuse(x, y)` differentiated through every input and
/// the affine parameters, in the given mode.
pub fn fusion_grad_error(seed: u64, mode: FusionMode) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(2..=6);
    let xs: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut r, DIM)).collect();
    let ys: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut r, DIM)).collect();
    let c: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut r, DIM)).collect();
    let mut params = FusionParams::new(DIM).with_mode(mode);
    params.gamma = gaussian_vec(&mut r, DIM);
    params.delta = gaussian_vec(&mut r, DIM);
    params.running_mean = gaussian_vec(&mut r, DIM).iter().map(|v| 0.2 * v).collect();
    params.running_var = (0..DIM).map(|_| r.gen_range(0.5..2.0)).collect();
    let beta = r.gen_range(0.2..1.0);
    let probe = |xs: &[Vec<f64>], ys: &[Vec<f64>], p: &FusionParams| {
        let xr: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let yr: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
        let fwd = fuse_batch(&xr, &yr, p, beta).unwrap();
        let v: f64 = fwd
            .outputs
            .iter()
            .zip(&c)
            .map(|(o, c)| o.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        (v, fwd)
    };
    let (_, fwd) = probe(&xs, &ys, &params);
    let g = fwd.backward(&params, &c);
    let x: Vec<f64> = flatten(&xs)
        .into_iter()
        .chain(flatten(&ys))
        .chain(params.gamma.iter().copied())
        .chain(params.delta.iter().copied())
        .collect();
    let numeric = central_diff(&x, |v| {
        let (a, rest) = v.split_at(n * DIM);
        let (b, rest) = rest.split_at(n * DIM);
        let (gm, dl) = rest.split_at(DIM);
        let mut p = params.clone();
        p.gamma = gm.to_vec();
        p.delta = dl.to_vec();
        probe(&unflatten(a, n), &unflatten(b, n), &p).0
    });
    let mut analytic: Vec<f64> = flatten(&g.d_x).into_iter().chain(flatten(&g.d_y)).collect();
    if mode == FusionMode::Bypass {
        // bypass has no affine stage
        analytic.extend(std::iter::repeat_n(0.0, 2 * DIM));
    } else {
        analytic.extend(g.d_gamma.iter().chain(&g.d_delta));
    }
    rel_err(&analytic, &numeric)
}

/// OIM loss over a random table with some uninitialised prototypes, a
/// queue, and a mix of labelled and unlabelled embeddings.
pub fn oim_grad_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let ids: Vec<PersonId> = (1..=5).collect();
    let mut table = OimTable::new(DIM, ids.iter().copied(), 4);
    for &id in &ids[..4] {
        table.update(id, &gaussian_vec(&mut r, DIM)).unwrap();
    }
    for _ in 0..3 {
        table.push_unknown(&gaussian_vec(&mut r, DIM)).unwrap();
    }
    let n = r.gen_range(2..=6);
    let embs: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut r, DIM)).collect();
    let labels: Vec<Option<PersonId>> = (0..n)
        .map(|i| if i == 0 { None } else { Some(ids[r.gen_range(0..5)]) })
        .collect();
    let out = oim_loss(&embs, &labels, &table).unwrap();
    let numeric = central_diff(&flatten(&embs), |v| oim_loss(&unflatten(v, n), &labels, &table).unwrap().loss);
    rel_err(&flatten(&out.grads), &numeric)
}

/// Maximum error of every audited gradient over `worlds` random worlds.
pub fn audit_all(worlds: u64) -> Vec<(&'static str, f64)> {
    let mut worst = vec![
        ("baseline", 0.0f64),
        ("combined", 0.0),
        ("scene_only", 0.0),
        ("fusion", 0.0),
        ("oim", 0.0),
    ];
    for seed in 0..worlds {
        let w = random_world(seed);
        worst[0].1 = worst[0].1.max(baseline_grad_error(&w));
        worst[1].1 = worst[1].1.max(combined_grad_error(&w, seed));
        worst[2].1 = worst[2].1.max(scene_only_grad_error(&w));
        for mode in [FusionMode::Train, FusionMode::Inference, FusionMode::Bypass] {
            worst[3].1 = worst[3].1.max(fusion_grad_error(seed, mode));
        }
        worst[4].1 = worst[4].1.max(oim_grad_error(seed));
    }
    worst
}

/// A random world that embeds the shared-scene pattern: identity A alone in
/// one scene, A with B in another, B without A in a third, the first and
/// third sharing nobody. Crops of A (first scene) and B (third scene) are
/// persons 0 and 1; extra random scenes and persons follow.
pub fn pattern_world(seed: u64) -> World {
    let mut r = rng(seed);
    let (a, b): (PersonId, PersonId) = (1, 2);
    let mut scenes = vec![BTreeSet::from([a]), BTreeSet::from([a, b]), BTreeSet::from([b])];
    // extras in the outer scenes use disjoint identity pools
    if r.gen_bool(0.5) {
        scenes[0].insert(3);
    }
    if r.gen_bool(0.5) {
        scenes[2].insert(4);
    }
    for _ in 0..r.gen_range(0..=3) {
        let mut s = BTreeSet::new();
        for _ in 0..r.gen_range(1..=3) {
            s.insert(r.gen_range(1..=6));
        }
        scenes.push(s);
    }
    let order: Vec<usize> = {
        let mut v: Vec<usize> = (0..scenes.len()).collect();
        // shuffle scene positions so the pattern is not always first
        for i in (1..v.len()).rev() {
            let j = r.gen_range(0..=i);
            v.swap(i, j);
        }
        v
    };
    let placed: Vec<BTreeSet<PersonId>> = order.iter().map(|&k| scenes[k].clone()).collect();
    let pos = |orig: usize| order.iter().position(|&k| k == orig).unwrap();
    let mut persons = vec![
        WorldPerson {
            identity: a,
            own_scene: pos(0),
        },
        WorldPerson {
            identity: b,
            own_scene: pos(2),
        },
    ];
    for _ in 0..r.gen_range(0..=3) {
        let k = r.gen_range(0..placed.len());
        let ids: Vec<PersonId> = placed[k].iter().copied().collect();
        persons.push(WorldPerson {
            identity: ids[r.gen_range(0..ids.len())],
            own_scene: k,
        });
    }
    World::new(placed, persons).unwrap()
}

/// Any small world, pattern or not.
pub fn arbitrary_world(seed: u64) -> World {
    random_world(seed).world
}

pub mod metric_fixture {
    use std::collections::BTreeMap;

    use gfn_core::data::{DatasetBundle, PersonAnnotation, SceneRecord};
    use gfn_core::geometry::BBox;
    use gfn_core::retrieval::{RankedEntry, RankedResult, RetrievalTask};

    pub const GT: BBox = BBox {
        x: 10.0,
        y: 10.0,
        w: 40.0,
        h: 80.0,
    };
    pub const DISTRACTOR: BBox = BBox {
        x: 200.0,
        y: 10.0,
        w: 40.0,
        h: 80.0,
    };

    /// Query scene 0 holding identity 1; gallery scenes `1..=n`, scene `k`
    /// holding identity 1 at [`GT`] when bit `k-1` of `positives` is set, and
    /// always a distractor identity at [`DISTRACTOR`].
    pub fn bundle(n: usize, positives: u32) -> DatasetBundle {
        let mut scenes = Vec::new();
        let mut anns = Vec::new();
        let mut next = 1;
        for k in 0..=n {
            scenes.push(SceneRecord {
                scene_id: k as i64,
                file_name: format!("s{k}.jpg"),
                width: 400,
                height: 200,
                cam_id: 1,
            });
            if k == 0 || positives >> (k - 1) & 1 == 1 {
                anns.push(PersonAnnotation {
                    ann_id: next,
                    scene_id: k as i64,
                    bbox: GT,
                    person_id: Some(1),
                    is_known: true,
                });
                next += 1;
            }
            if k > 0 {
                anns.push(PersonAnnotation {
                    ann_id: next,
                    scene_id: k as i64,
                    bbox: DISTRACTOR,
                    person_id: Some(100 + k as i64),
                    is_known: true,
                });
                next += 1;
            }
        }
        DatasetBundle::new("sweep", scenes, anns).unwrap()
    }

    pub fn task(n: usize) -> RetrievalTask {
        RetrievalTask {
            query_ann_id: 1,
            query_scene_id: 0,
            person_id: 1,
            query_embedding: vec![1.0, 0.0],
            query_scene_embedding: vec![0.0, 1.0],
            gallery: (1..=n as i64).collect(),
        }
    }

    /// One entry per ranked `(scene, box)`, scores strictly decreasing.
    pub fn result(ranked: &[(i64, BBox)]) -> RankedResult {
        let n = ranked.len();
        RankedResult {
            entries: ranked
                .iter()
                .enumerate()
                .map(|(r, &(scene_id, bbox))| RankedEntry {
                    scene_id,
                    bbox,
                    s_reid: (n - r) as f64 / n as f64,
                    s_det: 1.0,
                    s_gfn: None,
                    s_final: (n - r) as f64 / n as f64,
                })
                .collect(),
            filtered_scene_ids: Default::default(),
            scene_scores: BTreeMap::new(),
        }
    }
}

/// AP as the mean, over positives found, of the fraction of hits at or above
/// each hit's rank, counted by rescanning the prefix.
pub fn oracle_ap(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            let above = hits[..=k].iter().filter(|&&h| h).count();
            total += above as f64 / (k + 1) as f64;
        }
    }
    total / positives as f64
}

/// Every permutation of `0..n`, lexicographic.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

pub struct SweepCounts {
    pub person_cases: usize,
    pub scene_cases: usize,
    pub detection_cases: usize,
    pub mismatches: Vec<String>,
}

/// Exhaustive comparison of the three metric functions against the oracles
/// over galleries of up to `max_n` scenes.
pub fn metric_sweep(max_n: usize) -> SweepCounts {
    use gfn_core::eval::{detection_metrics, gfn_scene_metrics, person_retrieval_metrics, ScoredBox};
    use metric_fixture::*;
    use std::collections::BTreeMap;

    let mut c = SweepCounts {
        person_cases: 0,
        scene_cases: 0,
        detection_cases: 0,
        mismatches: Vec::new(),
    };
    for n in 1..=max_n {
        let perms = permutations(n);
        let task = task(n);
        for positives in 0u32..(1 << n) {
            let bundle = bundle(n, positives);
            let is_pos = |s: usize| positives >> (s - 1) & 1 == 1;
            let npos = positives.count_ones() as usize;
            // box choice per positive scene: the true box or the distractor
            let choice_limit = if n <= 5 { 1u32 << npos } else { 1 };
            for choice in 0..choice_limit {
                let pos_scenes: Vec<usize> = (1..=n).filter(|&s| is_pos(s)).collect();
                let on_gt = |s: usize| {
                    pos_scenes
                        .iter()
                        .position(|&p| p == s)
                        .is_some_and(|i| choice >> i & 1 == 0)
                };
                for perm in &perms {
                    let ranked: Vec<(i64, gfn_core::geometry::BBox)> = perm
                        .iter()
                        .map(|&i| {
                            let s = i + 1;
                            (s as i64, if on_gt(s) { GT } else { DISTRACTOR })
                        })
                        .collect();
                    let hits: Vec<bool> = perm.iter().map(|&i| on_gt(i + 1)).collect();
                    let rep = person_retrieval_metrics(
                        std::slice::from_ref(&task),
                        &[result(&ranked)],
                        &bundle,
                        0.5,
                    )
                    .unwrap();
                    c.person_cases += 1;
                    if npos == 0 {
                        if rep.excluded_queries() != 1 || !rep.per_query.is_empty() {
                            c.mismatches.push(format!("person n={n} no positives not excluded"));
                        }
                        continue;
                    }
                    let (ap, top1) = (oracle_ap(&hits, npos), hits[0]);
                    if rep.map() != ap || rep.top1() != f64::from(u8::from(top1)) {
                        c.mismatches
                            .push(format!("person n={n} pos={positives:b} perm={perm:?}: {} vs {ap}", rep.map()));
                    }
                }
            }
            // scene metrics: ranking given by filter scores
            for perm in &perms {
                let scores: BTreeMap<i64, f64> =
                    perm.iter().enumerate().map(|(r, &i)| ((i + 1) as i64, -(r as f64))).collect();
                let rep = gfn_scene_metrics(std::slice::from_ref(&task), &[scores], &bundle).unwrap();
                c.scene_cases += 1;
                let hits: Vec<bool> = perm.iter().map(|&i| is_pos(i + 1)).collect();
                if npos == 0 {
                    if rep.excluded_queries() != 1 {
                        c.mismatches.push(format!("scene n={n} no positives not excluded"));
                    }
                    continue;
                }
                if rep.map() != oracle_ap(&hits, npos) || rep.top1() != f64::from(u8::from(hits[0])) {
                    c.mismatches.push(format!("scene n={n} pos={positives:b} perm={perm:?}"));
                }
            }
        }
    }

    // detection metrics: each scene has one ground-truth box and holds no
    // detection, a hit, a miss, or a hit plus a duplicate
    for n in 1..=max_n.min(5) {
        let gt: BTreeMap<i64, Vec<gfn_core::geometry::BBox>> = (1..=n as i64).map(|s| (s, vec![GT])).collect();
        for state in 0..4usize.pow(n as u32) {
            let mut dets: Vec<(i64, gfn_core::geometry::BBox, bool)> = Vec::new();
            for s in 0..n {
                let sid = (s + 1) as i64;
                match state / 4usize.pow(s as u32) % 4 {
                    0 => {}
                    1 => dets.push((sid, GT, true)),
                    2 => dets.push((sid, DISTRACTOR, false)),
                    _ => {
                        dets.push((sid, GT, true));
                        dets.push((sid, GT, true));
                    }
                }
            }
            let m = dets.len();
            let orders = if m <= 5 {
                permutations(m)
            } else {
                let mut r = rng(state as u64);
                (0..30)
                    .map(|_| {
                        let mut v: Vec<usize> = (0..m).collect();
                        for i in (1..m).rev() {
                            v.swap(i, r.gen_range(0..=i));
                        }
                        v
                    })
                    .collect()
            };
            for order in orders {
                // order[r] is the detection ranked r-th
                let mut by_scene: BTreeMap<i64, Vec<ScoredBox>> = BTreeMap::new();
                for (r, &i) in order.iter().enumerate() {
                    by_scene.entry(dets[i].0).or_default().push(ScoredBox {
                        bbox: dets[i].1,
                        score: (m - r) as f64,
                    });
                }
                let got = detection_metrics(&by_scene, &gt, 0.5);
                c.detection_cases += 1;
                let mut matched = std::collections::BTreeSet::new();
                let hits: Vec<bool> = order
                    .iter()
                    .map(|&i| dets[i].2 && matched.insert(dets[i].0))
                    .collect();
                let tp = hits.iter().filter(|&&h| h).count();
                if got.ap != oracle_ap(&hits, n) || got.recall != tp as f64 / n as f64 || got.num_detections != m {
                    c.mismatches.push(format!("detection n={n} state={state} order={order:?}"));
                }
            }
        }
    }
    c
}

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn bytes(path: &std::path::Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Save, load and save again for every persisted format, collecting each
/// format whose second write differs from the first.
pub fn io_round_trip_failures(dir: &std::path::Path) -> Vec<String> {
    use gfn_core::data::{load_dataset, save_dataset, EmbeddingStore, RetrievalSpec, StoreKind};
    use gfn_core::retrieval::{detections_to_jsonl, load_detections};
    use gfn_core::synth::TrainableParams;

    let mut failures = Vec::new();
    for name in ["clean.json", "duplicate_box.json", "repeated_person.json"] {
        let bundle = load_dataset(fixture(name)).unwrap();
        let a = dir.join(format!("a_{name}"));
        let b = dir.join(format!("b_{name}"));
        save_dataset(&bundle, &a).unwrap();
        let again = load_dataset(&a).unwrap();
        save_dataset(&again, &b).unwrap();
        if bytes(&a) != bytes(&b) || again.report() != bundle.report() {
            failures.push(format!("dataset {name}"));
        }
    }

    let mut r = rng(31);
    let rows: Vec<Vec<f64>> = (0..7).map(|_| gaussian_vec(&mut r, 5)).collect();
    let store = EmbeddingStore::from_rows(StoreKind::Scene, (100..107).collect(), &rows).unwrap();
    store.save(dir.join("s1.json")).unwrap();
    let loaded = EmbeddingStore::load(dir.join("s1.json")).unwrap();
    loaded.save(dir.join("s2.json")).unwrap();
    if loaded != store
        || bytes(&dir.join("s1.json")) != bytes(&dir.join("s2.json"))
        || bytes(&dir.join("s1.bin")) != bytes(&dir.join("s2.bin"))
    {
        failures.push("embedding store".into());
    }

    let bundle = load_dataset(fixture("clean.json")).unwrap();
    let spec = RetrievalSpec {
        format: gfn_core::data::RetrievalFormat::All,
        queries: Vec::new(),
    };
    let resolved = gfn_core::data::resolve_retrieval_spec(&spec, &bundle, true).unwrap();
    let full = RetrievalSpec::from_resolved(&resolved);
    full.save(dir.join("spec1.json")).unwrap();
    let back = RetrievalSpec::load(dir.join("spec1.json")).unwrap();
    back.save(dir.join("spec2.json")).unwrap();
    let re_resolved = gfn_core::data::resolve_retrieval_spec(&back, &bundle, true).unwrap();
    if back != full || re_resolved != resolved || bytes(&dir.join("spec1.json")) != bytes(&dir.join("spec2.json")) {
        failures.push("retrieval spec".into());
    }

    let dets = gfn_core::retrieval::InMemoryDetections::new(bundle.annotations().iter().map(|a| {
        let e: Vec<f64> = gaussian_vec(&mut r, 4).iter().map(|v| f64::from(*v as f32)).collect();
        gfn_core::retrieval::GalleryDetection::new(a.scene_id, a.bbox, e, 0.75).unwrap()
    }));
    let (lines, dstore) = detections_to_jsonl(&dets).unwrap();
    std::fs::write(dir.join("dets.jsonl"), &lines).unwrap();
    let reloaded = load_detections(dir.join("dets.jsonl"), &dstore).unwrap();
    let (lines2, dstore2) = detections_to_jsonl(&reloaded).unwrap();
    if lines != lines2 || dstore != dstore2 {
        failures.push("detections".into());
    }

    let params = TrainableParams::init(4, 0.25, 3, 9);
    let (c1, c2) = (dir.join("ckpt1"), dir.join("ckpt2"));
    params.save_checkpoint(&c1).unwrap();
    TrainableParams::load_checkpoint(&c1).unwrap().save_checkpoint(&c2).unwrap();
    if ["params.json", "weights.json", "weights.bin"]
        .iter()
        .any(|f| bytes(&c1.join(f)) != bytes(&c2.join(f)))
    {
        failures.push("checkpoint".into());
    }

    let mut table = OimTable::new(3, [4, 8, 15], 2);
    table.update(8, &[0.0, 1.0, 0.5]).unwrap();
    for q in [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.6, 0.8, 0.0]] {
        table.push_unknown(&q).unwrap();
    }
    let (p, q) = table.to_stores().unwrap();
    let (p2, q2) = OimTable::from_stores(&p, &q, 2).unwrap().to_stores().unwrap();
    if p != p2 || q != q2 {
        failures.push("oim table".into());
    }
    failures
}

/// Three scenes holding `{A}`, `{A, B}` and `{B}`, with one query crop of A in
/// the first scene and one of B in the last.
pub fn three_scene_world() -> World {
    World::new(
        vec![BTreeSet::from([1]), BTreeSet::from([1, 2]), BTreeSet::from([2])],
        vec![
            WorldPerson {
                identity: 1,
                own_scene: 0,
            },
            WorldPerson {
                identity: 2,
                own_scene: 2,
            },
        ],
    )
    .unwrap()
}

/// Tries every candidate threshold (each match score and +inf) and keeps the
/// largest one whose recall reaches the target.
pub fn npv_oracle(m: &[f64], n: &[f64], r: f64) -> (f64, f64) {
    let mut cands: Vec<f64> = m.to_vec();
    cands.push(f64::INFINITY);
    let mut best = f64::NEG_INFINITY;
    for &t in &cands {
        let kept = m.iter().filter(|&&s| s >= t).count();
        if kept as f64 / m.len() as f64 >= r && t > best {
            best = t;
        }
    }
    let below = n.iter().filter(|&&s| s < best).count();
    (best, below as f64 / n.len() as f64)
}

/// Splits `worlds` random synthetic worlds and checks each feasible split for
/// leakage and size; returns how many were feasible.
pub fn split_soundness(worlds: u64) -> Result<usize, String> {
    use gfn_core::data::{build_identity_graph, leaked_identities, split_components, SPLIT_TOLERANCE};
    use gfn_core::synth::{generate_world, SynthConfig};

    let mut feasible = 0;
    for seed in 0..worlds {
        let w = generate_world(&SynthConfig {
            num_identities: 60,
            num_scenes: 40,
            persons_per_scene: [1, 2],
            dim: 4,
            identity_dim: 4,
            seed,
            ..SynthConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let graph = build_identity_graph(&w.bundle, (seed % 3) as usize);
        let target = 0.2 + 0.1 * (seed % 3) as f64;
        match split_components(&graph, target, seed) {
            Ok(split) => {
                feasible += 1;
                let leaked = leaked_identities(&w.bundle, &graph, &split);
                if !leaked.is_empty() {
                    return Err(format!("seed {seed}: identities {leaked:?} span both sides"));
                }
                let frac = split.val.len() as f64 / graph.scenes().len() as f64;
                if (frac - target).abs() > SPLIT_TOLERANCE + 1e-12 {
                    return Err(format!("seed {seed}: val fraction {frac} for target {target}"));
                }
                if !split.train.is_disjoint(&split.val) || split.train.len() + split.val.len() != graph.scenes().len() {
                    return Err(format!("seed {seed}: train and val do not partition the scenes"));
                }
            }
            Err(gfn_core::Error::SplitInfeasible(_)) => {}
            Err(e) => return Err(format!("seed {seed}: unexpected error {e}")),
        }
    }
    Ok(feasible)
}
