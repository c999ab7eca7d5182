use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gfn_core::data::{
    build_identity_graph, leaked_identities, load_dataset, resolve_retrieval_spec, save_dataset, split_components,
    DatasetBundle, EmbeddingStore, ResolvedQuery, RetrievalSpec, SceneId, StoreKind,
};
use gfn_core::eval::{
    camera_split_eval, compute_savings, gfn_scene_metrics, metric_deltas, npv_at_recall, person_retrieval_metrics,
    score_histogram, CameraMode, MetricReport,
};
use gfn_core::gfn::{FusionMode, FusionParams};
use gfn_core::retrieval::{
    detections_to_jsonl, load_detections, score_gallery_scenes, search_all, subsample_gallery, two_phase_search,
    InMemoryDetections, RetrievalTask, SearchFlags,
};
use gfn_core::synth::{curve_to_csv, generate_world, run_toy, toy_tasks, ToyReport, TrainableParams};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Preset, RunConfig};
use crate::CliError;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serialises");
    text.push('\n');
    write_file(path, &text)
}

fn require<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("`{key}` is not set")))
}

pub fn validate(dataset: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let bundle = load_dataset(dataset)?;
    let report = bundle.report();
    println!(
        "dataset {}: {} scenes, {} annotations, issues: {}",
        bundle.partition(),
        bundle.scenes().len(),
        bundle.annotations().len(),
        report.issue_count()
    );
    for d in &report.duplicate_boxes {
        println!("duplicate box in scene {}: annotations {:?}", d.scene_id, d.ann_ids);
    }
    for r in &report.repeated_person_ids {
        println!("person id {} repeated in scene {}: annotations {:?}", r.person_id, r.scene_id, r.ann_ids);
    }
    if let Some(out) = out {
        write_json(&out.join("validation.json"), report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SplitReport {
    components: usize,
    ignored_identities: Vec<i64>,
    target_val_fraction: f64,
    val_fraction: f64,
    train_scenes: usize,
    val_scenes: usize,
    leaked_identities: Vec<i64>,
}

pub fn split(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let bundle = load_dataset(require(&cfg.data.dataset, "data.dataset")?)?;
    let graph = build_identity_graph(&bundle, cfg.split.ignore_top_k);
    let split = split_components(&graph, cfg.split.target_fraction, cfg.seed.unwrap_or(0))?;
    let leaked = leaked_identities(&bundle, &graph, &split);
    let total = graph.scenes().len().max(1) as f64;
    let report = SplitReport {
        components: graph.components().len(),
        ignored_identities: graph.ignored().to_vec(),
        target_val_fraction: cfg.split.target_fraction,
        val_fraction: split.val.len() as f64 / total,
        train_scenes: split.train.len(),
        val_scenes: split.val.len(),
        leaked_identities: leaked.clone(),
    };
    create_dir(out)?;
    save_dataset(&bundle.subset(&split.train, "train"), out.join("train.json"))?;
    save_dataset(&bundle.subset(&split.val, "val"), out.join("val.json"))?;
    write_json(&out.join("split_report.json"), &report)?;
    if !leaked.is_empty() {
        return Err(CliError::Data(format!("identities {leaked:?} span train and val")));
    }
    println!(
        "{} components; train {} scenes, val {} scenes ({:.3} of target {:.3})",
        report.components, report.train_scenes, report.val_scenes, report.val_fraction, report.target_val_fraction
    );
    Ok(())
}

/// Everything a retrieval run reads from disk.
struct EvalInputs {
    bundle: DatasetBundle,
    tasks: Vec<RetrievalTask>,
    scenes: EmbeddingStore,
    fusion: FusionParams,
}

fn load_fusion(cfg: &RunConfig, dim: usize) -> Result<FusionParams, CliError> {
    let fusion = match &cfg.data.checkpoint {
        Some(dir) => TrainableParams::load_checkpoint(dir)?.fusion,
        None => FusionParams::new(dim),
    };
    if fusion.dim() != dim {
        return Err(CliError::Data(format!(
            "checkpoint fusion dim {} does not match scene embedding dim {dim}",
            fusion.dim()
        )));
    }
    Ok(fusion.with_mode(FusionMode::Inference))
}

fn load_inputs(cfg: &RunConfig) -> Result<EvalInputs, CliError> {
    let bundle = load_dataset(require(&cfg.data.dataset, "data.dataset")?)?;
    let spec = RetrievalSpec::load(require(&cfg.data.retrieval, "data.retrieval")?)?;
    let persons = EmbeddingStore::load(require(&cfg.data.persons, "data.persons")?)?;
    let scenes = EmbeddingStore::load(require(&cfg.data.scenes, "data.scenes")?)?;
    let resolved = resolve_retrieval_spec(&spec, &bundle, cfg.eval.exclude_query_scene)?;
    let tasks = resolved
        .iter()
        .map(|q| RetrievalTask::from_stores(q, &persons, &scenes))
        .collect::<gfn_core::Result<Vec<_>>>()?;
    let fusion = load_fusion(cfg, scenes.dim())?;
    Ok(EvalInputs {
        bundle,
        tasks,
        scenes,
        fusion,
    })
}

fn load_provider(cfg: &RunConfig) -> Result<InMemoryDetections, CliError> {
    let store = EmbeddingStore::load(require(&cfg.data.detection_embeddings, "data.detection_embeddings")?)?;
    Ok(load_detections(require(&cfg.data.detections, "data.detections")?, &store)?)
}

fn summary_row(csv: &mut String, setting: &str, report: &MetricReport, base: &MetricReport) {
    let d = metric_deltas(base, report);
    writeln!(
        csv,
        "{setting},{},{},{},{},{}",
        report.map(),
        report.top1(),
        d["delta_mAP"],
        d["delta_top1"],
        report.per_query.len()
    )
    .expect("writing to a String cannot fail");
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let inputs = load_inputs(cfg)?;
    let provider = load_provider(cfg)?;
    let iou = cfg.eval.iou_threshold;
    let mut reports = Vec::new();
    let mut scene_scores = Vec::new();
    for flags in SearchFlags::SWEEP {
        let results = search_all(&inputs.tasks, &inputs.scenes, &provider, &cfg.gfn, &inputs.fusion, flags)?;
        let report = person_retrieval_metrics(&inputs.tasks, &results, &inputs.bundle, iou)?;
        if flags == SearchFlags::BOTH {
            scene_scores = results.into_iter().map(|r| r.scene_scores).collect();
        }
        reports.push(report);
    }
    // the sweep starts with both flags off
    let base = &reports[0];
    let mut csv = String::from("setting,mAP,top1,delta_mAP,delta_top1,queries\n");
    for (flags, report) in SearchFlags::SWEEP.into_iter().zip(&reports) {
        write_json(&out.join("reports").join(format!("{}.json", flags.name())), report)?;
        summary_row(&mut csv, flags.name(), report, base);
        println!(
            "{:<18} mAP {:.4} top-1 {:.4}  delta mAP {:+.4} delta top-1 {:+.4}",
            flags.name(),
            report.map(),
            report.top1(),
            report.map() - base.map(),
            report.top1() - base.top1()
        );
    }
    write_file(&out.join("summary.csv"), &csv)?;
    let scene = gfn_scene_metrics(&inputs.tasks, &scene_scores, &inputs.bundle)?;
    println!("gallery filter scene retrieval: mAP {:.4} top-1 {:.4}", scene.map(), scene.top1());
    write_json(&out.join("reports").join("gfn_scene.json"), &scene)?;

    if !cfg.eval.gallery_sizes.is_empty() {
        let seed = cfg.seed.unwrap_or(0);
        let mut csv = String::from("gallery_size,queries,mAP_no_gfn,top1_no_gfn,mAP_gfn,top1_gfn\n");
        for &size in &cfg.eval.gallery_sizes {
            let tasks = inputs
                .tasks
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let size = size.min(t.gallery_set().len());
                    subsample_gallery(t, &inputs.bundle, size, seed.wrapping_add(i as u64))
                })
                .collect::<gfn_core::Result<Vec<_>>>()?;
            let mut row = Vec::new();
            for flags in [SearchFlags::OFF, SearchFlags::BOTH] {
                let results = search_all(&tasks, &inputs.scenes, &provider, &cfg.gfn, &inputs.fusion, flags)?;
                let r = person_retrieval_metrics(&tasks, &results, &inputs.bundle, iou)?;
                row.push((r.map(), r.top1(), r.per_query.len()));
            }
            writeln!(csv, "{size},{},{},{},{},{}", row[0].2, row[0].0, row[0].1, row[1].0, row[1].1)
                .expect("writing to a String cannot fail");
        }
        write_file(&out.join("gallery_size.csv"), &csv)?;
    }

    if cfg.eval.camera_split {
        let mut csv = String::from("camera_mode,setting,mAP,top1,queries\n");
        for (mode, name) in [(CameraMode::SameCam, "same_cam"), (CameraMode::CrossCam, "cross_cam")] {
            for flags in [SearchFlags::OFF, SearchFlags::BOTH] {
                let r = camera_split_eval(&inputs.tasks, &inputs.bundle, mode, iou, |t| {
                    two_phase_search(t, &inputs.scenes, &provider, &cfg.gfn, &inputs.fusion, flags)
                })?;
                writeln!(csv, "{name},{},{},{},{}", flags.name(), r.map(), r.top1(), r.per_query.len())
                    .expect("writing to a String cannot fail");
            }
        }
        write_file(&out.join("camera_split.csv"), &csv)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ToyArtifact<'a> {
    objective: &'static str,
    held_out_scenes: usize,
    audit: Option<gfn_core::synth::GradAudit>,
    first_epoch_gfn_loss: Option<f64>,
    final_epoch_gfn_loss: Option<f64>,
    untrained: &'a ToyReport,
    trained: &'a ToyReport,
}

/// Writes the trained world in the on-disk formats `eval` reads, with the
/// held-out queries as a fully specified retrieval spec.
fn export_world(
    dir: &Path,
    world: &gfn_core::synth::SynthWorld,
    params: &TrainableParams,
    held_out: &BTreeSet<SceneId>,
) -> Result<(), CliError> {
    create_dir(dir)?;
    save_dataset(&world.bundle, dir.join("dataset.json"))?;
    let (tasks, scenes, dets) = toy_tasks(world, params, Some(held_out))?;
    let ids: Vec<i64> = scenes.keys().copied().collect();
    let rows: Vec<Vec<f64>> = scenes.values().cloned().collect();
    EmbeddingStore::from_rows(StoreKind::Scene, ids, &rows)?.save(dir.join("scenes.json"))?;
    let (ids, rows): (Vec<i64>, Vec<Vec<f64>>) = world
        .person_features
        .iter()
        .map(|(&a, raw)| (a, params.embed_person(raw)))
        .unzip();
    EmbeddingStore::from_rows(StoreKind::Person, ids, &rows)?.save(dir.join("persons.json"))?;
    let (lines, store) = detections_to_jsonl(&dets)?;
    write_file(&dir.join("detections.jsonl"), &lines)?;
    store.save(dir.join("detection_embeddings.json"))?;
    let resolved: Vec<ResolvedQuery> = tasks
        .iter()
        .map(|t| ResolvedQuery {
            query_ann_id: t.query_ann_id,
            query_scene_id: t.query_scene_id,
            person_id: t.person_id,
            gallery: t.gallery.clone(),
        })
        .collect();
    RetrievalSpec::from_resolved(&resolved).save(dir.join("retrieval.json"))?;
    Ok(())
}

pub fn train_toy(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut toy = cfg.toy.clone();
    if let Some(seed) = cfg.seed {
        toy.world.seed = seed;
        toy.train.seed = seed;
    }
    let run = run_toy(&toy, &cfg.gfn)?;
    let params = &run.outcome.params;
    create_dir(out)?;
    params.save_checkpoint(out.join("checkpoint"))?;
    write_file(&out.join("loss_curve.csv"), &curve_to_csv(&run.outcome.curve))?;
    let artifact = ToyArtifact {
        objective: cfg.gfn.objective.name(),
        held_out_scenes: run.held_out.len(),
        audit: run.outcome.audit,
        first_epoch_gfn_loss: run.outcome.curve.first().map(|e| e.gfn),
        final_epoch_gfn_loss: run.outcome.curve.last().map(|e| e.gfn),
        untrained: &run.untrained,
        trained: &run.trained,
    };
    write_json(&out.join("report.json"), &artifact)?;
    let world = generate_world(&toy.world)?;
    export_world(&out.join("export"), &world, params, &run.held_out)?;
    println!(
        "{} objective: scene top-1 {:.3} -> {:.3} (chance {:.3}) on {} held-out queries",
        artifact.objective,
        run.untrained.gfn_scene.top1(),
        run.trained.gfn_scene.top1(),
        run.trained.chance_top1,
        run.trained.gfn_scene.per_query.len()
    );
    if let (Some(a), Some(b)) = (artifact.first_epoch_gfn_loss, artifact.final_epoch_gfn_loss) {
        println!("filter loss {a:.4} -> {b:.4} over {} epochs", run.outcome.curve.len());
    }
    Ok(())
}

/// Match and nonmatch filter scores over every task's gallery.
fn split_scores(inputs: &EvalInputs, cfg: &RunConfig) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let per_task = inputs
        .tasks
        .par_iter()
        .map(|t| {
            let scores = score_gallery_scenes(t, &inputs.scenes, &cfg.gfn, &inputs.fusion)?;
            let mut m = Vec::new();
            let mut n = Vec::new();
            for (s, v) in scores {
                if inputs.bundle.known_identities_in(s).contains(&t.person_id) {
                    m.push(v);
                } else {
                    n.push(v);
                }
            }
            Ok((m, n))
        })
        .collect::<gfn_core::Result<Vec<_>>>()?;
    let (m, n): (Vec<Vec<f64>>, Vec<Vec<f64>>) = per_task.into_iter().unzip();
    Ok((m.concat(), n.concat()))
}

fn savings_input(name: &str, configured: Option<f64>, measured: Option<f64>, preset: Option<f64>) -> Result<(f64, &'static str), CliError> {
    let (v, src) = match (configured, measured, preset) {
        (Some(v), _, _) => (v, "config"),
        (None, Some(v), _) => (v, "measured"),
        (None, None, Some(v)) => (v, "preset"),
        _ => {
            return Err(CliError::Usage(format!(
                "savings needs `filter.{name}`: set it, supply scored data or choose a preset"
            )))
        }
    };
    if !(0.0..=1.0).contains(&v) {
        return Err(CliError::Usage(format!("filter.{name} = {v} lies outside [0, 1]")));
    }
    Ok((v, src))
}

pub fn filter_analysis(cfg: &RunConfig, out: &Path, preset: Option<Preset>) -> Result<(), CliError> {
    let f = &cfg.filter;
    let preset = preset.or(f.preset).map(Preset::values);
    let has_data = cfg.data.dataset.is_some() || cfg.data.scenes.is_some();
    let mut measured_negative = None;
    let mut measured_npv = None;
    create_dir(out)?;
    if has_data {
        let inputs = load_inputs(cfg)?;
        let (m, n) = split_scores(&inputs, cfg)?;
        let hist = score_histogram(&m, &n, f.bins)?;
        write_file(&out.join("histogram.csv"), &hist.to_csv())?;
        let mut csv = String::from("recall_target,threshold,npv\n");
        for &r in &f.recall_targets {
            let (t, v) = npv_at_recall(&m, &n, r)?;
            writeln!(csv, "{r},{t},{v}").expect("writing to a String cannot fail");
            println!("recall {r:.3}: threshold {t:.4}, npv {v:.4}");
        }
        write_file(&out.join("npv.csv"), &csv)?;
        measured_npv = Some(npv_at_recall(&m, &n, f.savings_recall)?.1);
        measured_negative = Some(n.len() as f64 / (m.len() + n.len()) as f64);
    }
    let (neg, neg_src) = savings_input(
        "negative_fraction",
        f.negative_fraction,
        measured_negative,
        preset.map(|p| p.negative_fraction),
    )?;
    let (npv, npv_src) = savings_input("npv", f.npv, measured_npv, preset.map(|p| p.npv))?;
    let (det, det_src) = savings_input(
        "detection_time_fraction",
        f.detection_time_fraction,
        None,
        preset.map(|p| p.detection_time_fraction),
    )?;
    let saved = compute_savings(neg, npv, det);
    let report: Value = json!({
        "negative_fraction": {"value": neg, "source": neg_src},
        "npv": {"value": npv, "source": npv_src, "recall": f.savings_recall},
        "detection_time_fraction": {"value": det, "source": det_src},
        "computation_saved": saved,
    });
    write_json(&out.join("savings.json"), &report)?;
    println!("computation saved: {:.1}%", 100.0 * saved);
    Ok(())
}
