mod common;

use std::collections::BTreeSet;

use common::*;
use gfn_core::data::{build_identity_graph, split_components};
use gfn_core::eval::{npv_at_recall, score_histogram};
use gfn_core::gfn::{FusionParams, GfnConfig, Objective};
use gfn_core::math::{cosine_sim, logistic_weight, normalize, Orientation};
use gfn_core::objective_graph::{attraction_groups, build_objective_graph, is_star_forest, is_well_posed};
use gfn_core::oim::{is_hard_negative, sample_for_batch, GfnLut, OimTable, SamplePlan};
use gfn_core::retrieval::{filter_gallery, score_gallery_scenes, two_phase_search, RecordingProvider, SearchFlags};
use gfn_core::synth::{generate_world, toy_tasks, SynthConfig, TrainableParams};
use gfn_core::Error;
use proptest::prelude::*;

fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_is_bounded_and_symmetric(u in vec_strategy(6), v in vec_strategy(6)) {
        if let (Ok(a), Ok(b)) = (cosine_sim(&u, &v), cosine_sim(&v, &u)) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn normalised_vectors_have_unit_norm(u in vec_strategy(7)) {
        if let Ok(n) = normalize(&u) {
            let len: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((len - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logistic_weight_is_monotone(a in -1.0f64..1.0, b in -1.0f64..1.0, alpha in 0.05f64..2.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let inc = |s| logistic_weight(s, alpha, Orientation::Increasing);
        prop_assert!(inc(lo) <= inc(hi));
        prop_assert!(inc(lo) > 0.0 && inc(hi) < 1.0);
        let dec = |s| logistic_weight(s, alpha, Orientation::Decreasing);
        prop_assert!(dec(lo) >= dec(hi));
    }

    #[test]
    fn queue_is_fifo(cap in 1usize..6, pushes in prop::collection::vec(vec_strategy(4), 0..12)) {
        let mut t = OimTable::new(4, [1], cap);
        let mut kept = Vec::new();
        for p in &pushes {
            if let Ok(n) = normalize(p) {
                t.push_unknown(p).unwrap();
                kept.push(n);
            }
        }
        let expect: Vec<Vec<f64>> = kept.iter().skip(kept.len().saturating_sub(cap)).cloned().collect();
        let got: Vec<Vec<f64>> = t.queue().map(<[f64]>::to_vec).collect();
        prop_assert_eq!(got.len(), expect.len());
        for (g, e) in got.iter().zip(&expect) {
            for (a, b) in g.iter().zip(e) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prototypes_stay_unit_norm(updates in prop::collection::vec((1i64..4, vec_strategy(5)), 1..20)) {
        let mut t = OimTable::new(5, [1, 2, 3], 2);
        for (id, e) in &updates {
            if normalize(e).is_ok() {
                t.update(*id, e).unwrap();
            }
        }
        for id in 1..4 {
            if let Ok(p) = t.lookup(id) {
                let len: f64 = p.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((len - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn histogram_conserves_counts(m in prop::collection::vec(-1.0f64..1.0, 1..50), n in prop::collection::vec(-1.0f64..1.0, 1..50), bins in 1usize..20) {
        let h = score_histogram(&m, &n, bins).unwrap();
        prop_assert_eq!(h.match_counts.iter().sum::<usize>(), m.len());
        prop_assert_eq!(h.nonmatch_counts.iter().sum::<usize>(), n.len());
        prop_assert_eq!(h.edges.len(), bins + 1);
    }

    #[test]
    fn npv_threshold_keeps_target_recall(m in prop::collection::vec(-1.0f64..1.0, 1..40), n in prop::collection::vec(-1.0f64..1.0, 1..40), r in 0.0f64..=1.0) {
        let (thr, npv) = npv_at_recall(&m, &n, r).unwrap();
        let kept = m.iter().filter(|&&s| s >= thr).count();
        prop_assert!(kept as f64 >= r * m.len() as f64 - 1e-9);
        prop_assert!((0.0..=1.0).contains(&npv));
    }

    #[test]
    fn npv_is_monotone_in_recall(m in prop::collection::vec(-1.0f64..1.0, 1..40), n in prop::collection::vec(-1.0f64..1.0, 1..40), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (t_lo, _) = npv_at_recall(&m, &n, lo).unwrap();
        let (t_hi, _) = npv_at_recall(&m, &n, hi).unwrap();
        prop_assert!(t_hi <= t_lo);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn combined_graphs_are_well_posed_stars(seed in any::<u64>()) {
        for world in [pattern_world(seed), arbitrary_world(seed)] {
            let g = build_objective_graph(Objective::Combined, &world);
            prop_assert!(is_well_posed(&g).well_posed);
            prop_assert!(is_star_forest(&g));
        }
    }

    #[test]
    fn shared_scene_pattern_breaks_other_objectives(seed in any::<u64>()) {
        let world = pattern_world(seed);
        for objective in [Objective::Baseline, Objective::SceneOnly] {
            let g = build_objective_graph(objective, &world);
            let wp = is_well_posed(&g);
            prop_assert!(!wp.well_posed);
            prop_assert!(!wp.conflicts.is_empty());
            // each conflict sits inside one attraction group
            let groups = attraction_groups(&g);
            for (a, b) in &wp.conflicts {
                prop_assert!(groups.iter().any(|grp| grp.contains(a) && grp.contains(b)));
            }
        }
    }
}

fn sampling_fixture(seed: u64) -> (gfn_core::synth::SynthWorld, GfnLut) {
    let w = generate_world(&SynthConfig {
        num_identities: 6,
        num_scenes: 14,
        dim: 8,
        identity_dim: 6,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let p = TrainableParams::init(8, 0.1, 1, seed);
    let mut lut = GfnLut::new();
    gfn_core::synth::refresh_lut(&mut lut, 0, &w, &p);
    (w, lut)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn sampling_is_deterministic_and_respects_predicates(seed in 0u64..1000, pos in 0usize..3, neg in 0usize..3, use_lut in any::<bool>()) {
        let (w, lut) = sampling_fixture(seed);
        let batch: BTreeSet<i64> = w.bundle.scene_ids().into_iter().take(4).collect();
        let anns: Vec<i64> = w.bundle.annotations().iter().filter(|a| batch.contains(&a.scene_id)).map(|a| a.ann_id).collect();
        let plan = SamplePlan { positives_per_person: pos, hard_negatives_per_person: neg, use_lut };
        prop_assume!(plan.validate().is_ok());
        let a = sample_for_batch(&plan, &anns, &batch, &w.bundle, &lut, seed).unwrap();
        let b = sample_for_batch(&plan, &anns, &batch, &w.bundle, &lut, seed).unwrap();
        prop_assert_eq!(&a, &b);
        for s in &a {
            let ann = w.bundle.annotation(s.ann_id).unwrap();
            let pid = ann.person_id.unwrap();
            prop_assert!(s.positives.len() <= pos && s.hard_negatives.len() <= neg);
            for p in &s.positives {
                prop_assert!(w.bundle.known_identities_in(*p).contains(&pid));
                prop_assert!(use_lut || batch.contains(p));
            }
            for h in &s.hard_negatives {
                prop_assert!(is_hard_negative(&w.bundle, pid, ann.scene_id, *h));
                prop_assert!(use_lut || batch.contains(h));
            }
        }
    }

    #[test]
    fn filtering_is_monotone_and_skips_detection_calls(seed in 0u64..1000, l1 in -1.0f64..1.0, l2 in -1.0f64..1.0) {
        let w = generate_world(&SynthConfig { num_identities: 6, num_scenes: 10, dim: 8, identity_dim: 6, seed, ..SynthConfig::default() }).unwrap();
        let p = TrainableParams::init(8, 0.1, 1, seed);
        let (tasks, scenes, dets) = toy_tasks(&w, &p, None).unwrap();
        let task = &tasks[0];
        let fusion = FusionParams::new(8).with_mode(gfn_core::gfn::FusionMode::Inference);
        let scores = score_gallery_scenes(task, &scenes, &GfnConfig::default(), &fusion).unwrap();
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let (k_lo, _) = filter_gallery(&scores, lo);
        let (k_hi, f_hi) = filter_gallery(&scores, hi);
        prop_assert!(k_hi.is_subset(&k_lo));
        let rec = RecordingProvider::new(dets);
        let cfg = GfnConfig { lambda_gfn: hi, ..GfnConfig::default() };
        let r = two_phase_search(task, &scenes, &rec, &cfg, &fusion, SearchFlags::BOTH).unwrap();
        let called: BTreeSet<i64> = rec.calls().into_iter().collect();
        prop_assert_eq!(&called, &k_hi);
        prop_assert!(called.is_disjoint(&f_hi));
        prop_assert_eq!(&r.filtered_scene_ids, &f_hi);
    }
}

#[test]
fn split_soundness_over_random_worlds() {
    let feasible = split_soundness(50).unwrap();
    assert!(feasible >= 25, "only {feasible} feasible worlds");
}

#[test]
fn single_component_world_is_infeasible() {
    let w = generate_world(&SynthConfig {
        num_identities: 3,
        num_scenes: 30,
        persons_per_scene: [3, 3],
        dim: 4,
        identity_dim: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let graph = build_identity_graph(&w.bundle, 0);
    assert_eq!(graph.components().len(), 1);
    assert!(matches!(split_components(&graph, 0.3, 0), Err(Error::SplitInfeasible(_))));
}
