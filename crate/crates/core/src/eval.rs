//! Retrieval, detection and filtering metrics.
//!
//! Average precision is the exact non-interpolated form: the mean, over all
//! ground-truth positives, of precision at the rank where each is found.
//! Positives that never appear in the ranking contribute zero.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{AnnId, DatasetBundle, SceneId};
use crate::error::{Error, Result};
use crate::retrieval::{RankedResult, RetrievalTask};

pub use crate::geometry::{iou, BBox};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// `Σ precision@k over hit ranks / num_positives`; 0 without positives.
pub fn average_precision(hits: &[bool], num_positives: usize) -> f64 {
    if num_positives == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
            sum += tp as f64 / (k + 1) as f64;
        }
    }
    sum / num_positives as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub recall: f64,
    pub ap: f64,
    pub num_gt: usize,
    pub num_detections: usize,
}

/// Greedy matching over all detections in descending score order (ties by
/// scene id, then box x). Each detection takes the unmatched ground-truth box
/// of its scene with the highest IoU, if that IoU reaches the threshold.
pub fn detection_metrics(
    detections: &BTreeMap<SceneId, Vec<ScoredBox>>,
    ground_truth: &BTreeMap<SceneId, Vec<BBox>>,
    iou_threshold: f64,
) -> DetectionMetrics {
    let mut all: Vec<(SceneId, ScoredBox)> = detections
        .iter()
        .flat_map(|(&s, v)| v.iter().map(move |d| (s, *d)))
        .collect();
    all.sort_by(|(sa, a), (sb, b)| {
        b.score
            .total_cmp(&a.score)
            .then(sa.cmp(sb))
            .then(a.bbox.x.total_cmp(&b.bbox.x))
            .then(a.bbox.y.total_cmp(&b.bbox.y))
    });
    let num_gt: usize = ground_truth.values().map(Vec::len).sum();
    let mut used: BTreeMap<SceneId, Vec<bool>> = ground_truth.iter().map(|(&s, v)| (s, vec![false; v.len()])).collect();
    let mut hits = Vec::with_capacity(all.len());
    for (sid, d) in &all {
        let hit = match (ground_truth.get(sid), used.get_mut(sid)) {
            (Some(gts), Some(flags)) => claim_best(gts, flags, &d.bbox, iou_threshold),
            _ => false,
        };
        hits.push(hit);
    }
    let matched = hits.iter().filter(|&&h| h).count();
    DetectionMetrics {
        recall: if num_gt > 0 { matched as f64 / num_gt as f64 } else { 0.0 },
        ap: average_precision(&hits, num_gt),
        num_gt,
        num_detections: all.len(),
    }
}

/// Marks the best still-free box with IoU ≥ threshold; true if one existed.
fn claim_best(gts: &[BBox], used: &mut [bool], b: &BBox, threshold: f64) -> bool {
    let best = gts
        .iter()
        .enumerate()
        .filter(|(i, _)| !used[*i])
        .map(|(i, g)| (i, iou(g, b)))
        .filter(|&(_, v)| v >= threshold)
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
    match best {
        Some((i, _)) => {
            used[i] = true;
            true
        }
        None => false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryMetric {
    pub query_ann_id: AnnId,
    pub ap: f64,
    pub top1: bool,
    pub positives: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `mAP` and `top1`, plus anything a caller adds.
    pub metrics: BTreeMap<String, f64>,
    pub per_query: Vec<QueryMetric>,
    pub metadata: BTreeMap<String, Value>,
}

impl MetricReport {
    fn from_queries(per_query: Vec<QueryMetric>, excluded: usize) -> Self {
        let n = per_query.len();
        let (map, top1) = if n == 0 {
            (0.0, 0.0)
        } else {
            (
                per_query.iter().map(|q| q.ap).sum::<f64>() / n as f64,
                per_query.iter().filter(|q| q.top1).count() as f64 / n as f64,
            )
        };
        let mut metadata = BTreeMap::new();
        metadata.insert("evaluated_queries".into(), Value::from(n));
        metadata.insert("excluded_queries".into(), Value::from(excluded));
        if excluded > 0 {
            log::warn!("{excluded} queries without gallery positives excluded from metrics");
        }
        MetricReport {
            metrics: BTreeMap::from([("mAP".to_string(), map), ("top1".to_string(), top1)]),
            per_query,
            metadata,
        }
    }

    pub fn map(&self) -> f64 {
        self.metrics.get("mAP").copied().unwrap_or(0.0)
    }

    pub fn top1(&self) -> f64 {
        self.metrics.get("top1").copied().unwrap_or(0.0)
    }

    pub fn excluded_queries(&self) -> usize {
        self.metadata
            .get("excluded_queries")
            .and_then(Value::as_u64)
            .unwrap_or(0) as usize
    }

    pub fn with_metadata(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.metadata.insert(key.to_string(), value.into());
        self
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }
}

/// `other − base` for every metric present in both reports.
pub fn metric_deltas(base: &MetricReport, other: &MetricReport) -> BTreeMap<String, f64> {
    other
        .metrics
        .iter()
        .filter_map(|(k, v)| base.metrics.get(k).map(|b| (format!("delta_{k}"), v - b)))
        .collect()
}

/// Ranks ground-truth boxes of the query identity inside a task's gallery,
/// excluding the query crop itself.
fn gallery_positives(task: &RetrievalTask, bundle: &DatasetBundle) -> BTreeMap<SceneId, Vec<BBox>> {
    let mut out: BTreeMap<SceneId, Vec<BBox>> = BTreeMap::new();
    for sid in task.gallery_set() {
        for a in bundle.annotations_in(sid) {
            if a.person_id == Some(task.person_id) && a.ann_id != task.query_ann_id {
                out.entry(sid).or_default().push(a.bbox);
            }
        }
    }
    out
}

/// Per-query metric for one ranked result, or `None` without positives.
pub fn person_query_metric(
    task: &RetrievalTask,
    result: &RankedResult,
    bundle: &DatasetBundle,
    iou_threshold: f64,
) -> Option<QueryMetric> {
    let gt = gallery_positives(task, bundle);
    let positives: usize = gt.values().map(Vec::len).sum();
    if positives == 0 {
        return None;
    }
    let mut used: BTreeMap<SceneId, Vec<bool>> = gt.iter().map(|(&s, v)| (s, vec![false; v.len()])).collect();
    let hits: Vec<bool> = result
        .entries
        .iter()
        .map(|e| match (gt.get(&e.scene_id), used.get_mut(&e.scene_id)) {
            (Some(boxes), Some(flags)) => claim_best(boxes, flags, &e.bbox, iou_threshold),
            _ => false,
        })
        .collect();
    Some(QueryMetric {
        query_ann_id: task.query_ann_id,
        ap: average_precision(&hits, positives),
        top1: hits.first().copied().unwrap_or(false),
        positives,
    })
}

/// Person-search mAP and top-1. Ground-truth occurrences are counted over the
/// whole gallery, so positives removed by filtering count as misses.
pub fn person_retrieval_metrics(
    tasks: &[RetrievalTask],
    results: &[RankedResult],
    bundle: &DatasetBundle,
    iou_threshold: f64,
) -> Result<MetricReport> {
    if tasks.len() != results.len() {
        return Err(Error::contract("one result per task required"));
    }
    let per: Vec<Option<QueryMetric>> = tasks
        .par_iter()
        .zip(results)
        .map(|(t, r)| person_query_metric(t, r, bundle, iou_threshold))
        .collect();
    let excluded = per.iter().filter(|q| q.is_none()).count();
    Ok(MetricReport::from_queries(per.into_iter().flatten().collect(), excluded))
}

/// Scene order used for filter-score metrics: descending score, ties by
/// ascending scene id.
pub fn rank_scenes(scores: &BTreeMap<SceneId, f64>) -> Vec<SceneId> {
    let mut v: Vec<(SceneId, f64)> = scores.iter().map(|(&k, &s)| (k, s)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().map(|(k, _)| k).collect()
}

/// Scene-retrieval mAP and top-1 of the filter scores, a scene matching when
/// it contains the query identity.
pub fn gfn_scene_metrics(
    tasks: &[RetrievalTask],
    scene_scores: &[BTreeMap<SceneId, f64>],
    bundle: &DatasetBundle,
) -> Result<MetricReport> {
    if tasks.len() != scene_scores.len() {
        return Err(Error::contract("one score map per task required"));
    }
    let per: Vec<Option<QueryMetric>> = tasks
        .par_iter()
        .zip(scene_scores)
        .map(|(t, scores)| {
            let gallery = t.gallery_set();
            let is_match = |s: SceneId| bundle.known_identities_in(s).contains(&t.person_id);
            let positives = gallery.iter().filter(|&&s| is_match(s)).count();
            if positives == 0 {
                return None;
            }
            let hits: Vec<bool> = rank_scenes(scores)
                .into_iter()
                .filter(|s| gallery.contains(s))
                .map(is_match)
                .collect();
            Some(QueryMetric {
                query_ann_id: t.query_ann_id,
                ap: average_precision(&hits, positives),
                top1: hits.first().copied().unwrap_or(false),
                positives,
            })
        })
        .collect();
    let excluded = per.iter().filter(|q| q.is_none()).count();
    Ok(MetricReport::from_queries(per.into_iter().flatten().collect(), excluded))
}

/// Threshold keeping at least `recall_target` of the matches, and the
/// fraction of nonmatches strictly below it.
///
/// The threshold is the `c`-th largest match score for the smallest `c` with
/// `c / n ≥ recall_target`; a zero target keeps nothing and filters every
/// nonmatch.
pub fn npv_at_recall(matches: &[f64], nonmatches: &[f64], recall_target: f64) -> Result<(f64, f64)> {
    if matches.is_empty() || nonmatches.is_empty() {
        return Err(Error::contract("npv needs nonempty match and nonmatch score sets"));
    }
    if !(0.0..=1.0).contains(&recall_target) {
        return Err(Error::contract(format!("recall target {recall_target} outside [0, 1]")));
    }
    let n = matches.len();
    let mut sorted = matches.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // exact count test; a float ceil can be off by one
    let mut c = ((recall_target * n as f64).ceil() as usize).min(n);
    while c > 0 && (c - 1) as f64 / n as f64 >= recall_target {
        c -= 1;
    }
    while c < n && (c as f64 / n as f64) < recall_target {
        c += 1;
    }
    let threshold = if c == 0 { f64::INFINITY } else { sorted[c - 1] };
    let below = nonmatches.iter().filter(|&&s| s < threshold).count();
    Ok((threshold, below as f64 / nonmatches.len() as f64))
}

/// Share of per-query compute removed by filtering: the fraction of gallery
/// scenes that are negatives, times the fraction of those filtered, times
/// the share of time spent on stages that filtered scenes skip. Inputs are
/// expected in `[0, 1]`.
pub fn compute_savings(negative_fraction: f64, npv: f64, detection_time_fraction: f64) -> f64 {
    negative_fraction * npv * detection_time_fraction
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    pub match_counts: Vec<usize>,
    pub nonmatch_counts: Vec<usize>,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,match_count,nonmatch_count\n");
        for i in 0..self.match_counts.len() {
            writeln!(
                s,
                "{},{},{},{}",
                self.edges[i],
                self.edges[i + 1],
                self.match_counts[i],
                self.nonmatch_counts[i]
            )
            .expect("writing to a String cannot fail");
        }
        s
    }
}

/// Two histograms over the shared range of both score sets. The last bin is
/// closed on the right.
pub fn score_histogram(matches: &[f64], nonmatches: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::contract("histogram needs at least one bin"));
    }
    let all = matches.iter().chain(nonmatches);
    if let Some(v) = all.clone().find(|v| !v.is_finite()) {
        return Err(Error::degenerate(format!("non-finite score {v}")));
    }
    let mut lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let mut hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    if lo > hi {
        (lo, hi) = (0.0, 1.0);
    } else if lo == hi {
        hi = lo + 1.0;
    }
    let width = hi - lo;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 / bins as f64 })
        .collect();
    let count = |scores: &[f64]| {
        let mut c = vec![0usize; bins];
        for &s in scores {
            let b = (((s - lo) / width) * bins as f64).floor() as usize;
            c[b.min(bins - 1)] += 1;
        }
        c
    };
    Ok(Histogram {
        edges,
        match_counts: count(matches),
        nonmatch_counts: count(nonmatches),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraMode {
    SameCam,
    CrossCam,
}

/// Keeps only gallery scenes whose camera matches (or differs from) the
/// query scene's. `None` when nothing is left.
pub fn restrict_by_camera(task: &RetrievalTask, bundle: &DatasetBundle, mode: CameraMode) -> Option<RetrievalTask> {
    let qcam = bundle.scene(task.query_scene_id)?.cam_id;
    let gallery: Vec<SceneId> = task
        .gallery
        .iter()
        .copied()
        .filter(|&s| {
            bundle.scene(s).is_some_and(|r| match mode {
                CameraMode::SameCam => r.cam_id == qcam,
                CameraMode::CrossCam => r.cam_id != qcam,
            })
        })
        .collect();
    (!gallery.is_empty()).then(|| RetrievalTask {
        gallery,
        ..task.clone()
    })
}

/// Restricts every gallery by camera, runs `search` on what remains and
/// scores it. Queries left without gallery or without positives are excluded.
pub fn camera_split_eval<F>(
    tasks: &[RetrievalTask],
    bundle: &DatasetBundle,
    mode: CameraMode,
    iou_threshold: f64,
    search: F,
) -> Result<MetricReport>
where
    F: Fn(&RetrievalTask) -> Result<RankedResult> + Sync,
{
    let restricted: Vec<RetrievalTask> = tasks
        .iter()
        .filter_map(|t| restrict_by_camera(t, bundle, mode))
        .collect();
    let results = restricted.par_iter().map(&search).collect::<Result<Vec<_>>>()?;
    let mut report = person_retrieval_metrics(&restricted, &results, bundle, iou_threshold)?;
    let excluded = report.excluded_queries() + (tasks.len() - restricted.len());
    report.metadata.insert("excluded_queries".into(), Value::from(excluded));
    report.metadata.insert(
        "camera_mode".into(),
        serde_json::to_value(mode).expect("mode serialises"),
    );
    Ok(report)
}

/// Distinct scene ids referenced by any task.
pub fn referenced_scenes(tasks: &[RetrievalTask]) -> BTreeSet<SceneId> {
    tasks.iter().flat_map(|t| t.gallery.iter().copied()).collect()
}
