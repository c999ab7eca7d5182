//! Two-phase person search: score gallery scenes with the gallery filter,
//! drop the ones below threshold, then rank the detections of the remaining
//! scenes by `s_reid · s_det · σ(s_gfn / α)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AnnId, DatasetBundle, EmbeddingStore, PersonId, ResolvedQuery, SceneId};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::gfn::{FusionParams, GfnConfig, GfnScorer};
use crate::math::{cosine_sim, logistic_weight, Orientation};

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryDetection {
    pub scene_id: SceneId,
    pub bbox: BBox,
    pub embedding: Vec<f64>,
    pub s_det: f64,
}

impl GalleryDetection {
    pub fn new(scene_id: SceneId, bbox: BBox, embedding: Vec<f64>, s_det: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s_det) {
            return Err(Error::data(format!("detection score {s_det} outside [0, 1] in scene {scene_id}")));
        }
        Ok(GalleryDetection {
            scene_id,
            bbox,
            embedding,
            s_det,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub scene_id: SceneId,
    pub bbox: BBox,
    pub s_reid: f64,
    pub s_det: f64,
    /// Absent when the gallery filter was not consulted.
    pub s_gfn: Option<f64>,
    pub s_final: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub entries: Vec<RankedEntry>,
    pub filtered_scene_ids: BTreeSet<SceneId>,
    /// Every gallery scene's filter score, when computed.
    pub scene_scores: BTreeMap<SceneId, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalTask {
    pub query_ann_id: AnnId,
    pub query_scene_id: SceneId,
    pub person_id: PersonId,
    pub query_embedding: Vec<f64>,
    pub query_scene_embedding: Vec<f64>,
    pub gallery: Vec<SceneId>,
}

impl RetrievalTask {
    pub fn new(
        query: &ResolvedQuery,
        query_embedding: Vec<f64>,
        query_scene_embedding: Vec<f64>,
    ) -> Result<Self> {
        if query.gallery.is_empty() {
            return Err(Error::contract(format!("query {} has an empty gallery", query.query_ann_id)));
        }
        Ok(RetrievalTask {
            query_ann_id: query.query_ann_id,
            query_scene_id: query.query_scene_id,
            person_id: query.person_id,
            query_embedding,
            query_scene_embedding,
            gallery: query.gallery.clone(),
        })
    }

    /// Looks both query embeddings up in stores keyed by annotation and scene id.
    pub fn from_stores(query: &ResolvedQuery, persons: &EmbeddingStore, scenes: &EmbeddingStore) -> Result<Self> {
        let q = persons.embedding(query.query_ann_id)?.into_inner();
        let s = scenes.embedding(query.query_scene_id)?.into_inner();
        Self::new(query, q, s)
    }

    /// Distinct gallery scenes, ascending.
    pub fn gallery_set(&self) -> BTreeSet<SceneId> {
        self.gallery.iter().copied().collect()
    }
}

/// Source of scene embeddings for filter scoring.
pub trait SceneEmbeddings: Sync {
    fn scene_embedding(&self, scene: SceneId) -> Option<Vec<f64>>;
}

impl SceneEmbeddings for EmbeddingStore {
    fn scene_embedding(&self, scene: SceneId) -> Option<Vec<f64>> {
        self.get(scene).map(|r| r.iter().map(|&v| f64::from(v)).collect())
    }
}

impl SceneEmbeddings for BTreeMap<SceneId, Vec<f64>> {
    fn scene_embedding(&self, scene: SceneId) -> Option<Vec<f64>> {
        self.get(&scene).cloned()
    }
}

/// Source of gallery detections, queried one scene at a time.
pub trait DetectionProvider: Sync {
    fn detections(&self, scene: SceneId) -> Result<Vec<GalleryDetection>>;
}

#[derive(Clone, Debug, Default)]
pub struct InMemoryDetections {
    by_scene: BTreeMap<SceneId, Vec<GalleryDetection>>,
}

impl InMemoryDetections {
    pub fn new(detections: impl IntoIterator<Item = GalleryDetection>) -> Self {
        let mut by_scene: BTreeMap<SceneId, Vec<GalleryDetection>> = BTreeMap::new();
        for d in detections {
            by_scene.entry(d.scene_id).or_default().push(d);
        }
        InMemoryDetections { by_scene }
    }

    pub fn len(&self) -> usize {
        self.by_scene.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &GalleryDetection> {
        self.by_scene.values().flatten()
    }
}

impl DetectionProvider for InMemoryDetections {
    /// Scenes without detections yield an empty list.
    fn detections(&self, scene: SceneId) -> Result<Vec<GalleryDetection>> {
        Ok(self.by_scene.get(&scene).cloned().unwrap_or_default())
    }
}

/// Wraps a provider and records every scene it was asked for.
#[derive(Debug)]
pub struct RecordingProvider<P> {
    inner: P,
    calls: Mutex<Vec<SceneId>>,
}

impl<P: DetectionProvider> RecordingProvider<P> {
    pub fn new(inner: P) -> Self {
        RecordingProvider {
            inner,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<SceneId> {
        self.calls.lock().expect("call log poisoned").clone()
    }

    pub fn clear(&self) {
        self.calls.lock().expect("call log poisoned").clear();
    }
}

impl<P: DetectionProvider> DetectionProvider for RecordingProvider<P> {
    fn detections(&self, scene: SceneId) -> Result<Vec<GalleryDetection>> {
        self.calls.lock().expect("call log poisoned").push(scene);
        self.inner.detections(scene)
    }
}

/// One line of a detections file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub scene_id: SceneId,
    pub bbox: BBox,
    pub s_det: f64,
    pub embedding_id: i64,
}

/// Reads JSON-lines detections, resolving embeddings through `store`.
pub fn load_detections(path: impl AsRef<Path>, store: &EmbeddingStore) -> Result<InMemoryDetections> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(line)
            .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let emb = store.get(rec.embedding_id).ok_or_else(|| {
            Error::data(format!("{}:{}: unknown embedding id {}", path.display(), n + 1, rec.embedding_id))
        })?;
        out.push(GalleryDetection::new(
            rec.scene_id,
            rec.bbox,
            emb.iter().map(|&v| f64::from(v)).collect(),
            rec.s_det,
        )?);
    }
    Ok(InMemoryDetections::new(out))
}

/// Writes detections as JSON lines, with `embedding_id` the position in the
/// returned store.
pub fn detections_to_jsonl(dets: &InMemoryDetections) -> Result<(String, EmbeddingStore)> {
    let mut lines = String::new();
    let mut rows = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        let rec = DetectionRecord {
            scene_id: d.scene_id,
            bbox: d.bbox,
            s_det: d.s_det,
            embedding_id: i as i64,
        };
        lines.push_str(&serde_json::to_string(&rec).expect("record serialises"));
        lines.push('\n');
        rows.push(d.embedding.clone());
    }
    let ids = (0..rows.len() as i64).collect();
    let store = if rows.is_empty() {
        EmbeddingStore::new(crate::data::StoreKind::Person, 1, Vec::new(), Vec::new())?
    } else {
        EmbeddingStore::from_rows(crate::data::StoreKind::Person, ids, &rows)?
    };
    Ok((lines, store))
}

/// Filter score of every distinct gallery scene.
pub fn score_gallery_scenes(
    task: &RetrievalTask,
    scenes: &dyn SceneEmbeddings,
    cfg: &GfnConfig,
    params: &FusionParams,
) -> Result<BTreeMap<SceneId, f64>> {
    let scorer = GfnScorer::new(&task.query_embedding, &task.query_scene_embedding, cfg, params)?;
    task.gallery_set()
        .into_iter()
        .map(|sid| {
            let y = scenes
                .scene_embedding(sid)
                .ok_or_else(|| Error::data(format!("no scene embedding for gallery scene {sid}")))?;
            Ok((sid, scorer.score(&y)?))
        })
        .collect()
}

/// Splits scenes into kept (`score ≥ lambda`) and filtered.
pub fn filter_gallery(scores: &BTreeMap<SceneId, f64>, lambda_gfn: f64) -> (BTreeSet<SceneId>, BTreeSet<SceneId>) {
    let (kept, filtered): (Vec<_>, Vec<_>) = scores.iter().partition(|(_, &s)| s >= lambda_gfn);
    (
        kept.into_iter().map(|(&k, _)| k).collect(),
        filtered.into_iter().map(|(&k, _)| k).collect(),
    )
}

pub fn final_score(s_reid: f64, s_det: f64, s_gfn: f64, alpha: f64, orientation: Orientation) -> f64 {
    s_reid * s_det * logistic_weight(s_gfn, alpha, orientation)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchFlags {
    pub use_gfn_filter: bool,
    pub use_gfn_weight: bool,
}

impl SearchFlags {
    pub const OFF: SearchFlags = SearchFlags {
        use_gfn_filter: false,
        use_gfn_weight: false,
    };
    pub const BOTH: SearchFlags = SearchFlags {
        use_gfn_filter: true,
        use_gfn_weight: true,
    };

    /// Off, weight only, filter only, both.
    pub const SWEEP: [SearchFlags; 4] = [
        SearchFlags::OFF,
        SearchFlags {
            use_gfn_filter: false,
            use_gfn_weight: true,
        },
        SearchFlags {
            use_gfn_filter: true,
            use_gfn_weight: false,
        },
        SearchFlags::BOTH,
    ];

    pub fn name(self) -> &'static str {
        match (self.use_gfn_filter, self.use_gfn_weight) {
            (false, false) => "no_gfn",
            (false, true) => "weight_only",
            (true, false) => "filter_only",
            (true, true) => "filter_and_weight",
        }
    }

    pub fn any(self) -> bool {
        self.use_gfn_filter || self.use_gfn_weight
    }
}

/// Descending `s_final`, then ascending scene id, then ascending box position.
pub fn rank_entries(entries: &mut [RankedEntry]) {
    entries.sort_by(|a, b| {
        b.s_final
            .total_cmp(&a.s_final)
            .then(a.scene_id.cmp(&b.scene_id))
            .then(a.bbox.x.total_cmp(&b.bbox.x))
            .then(a.bbox.y.total_cmp(&b.bbox.y))
    });
}

/// Runs one query. With both flags off the filter is never evaluated, so the
/// result does not depend on `cfg` or `params` at all.
pub fn two_phase_search(
    task: &RetrievalTask,
    scenes: &dyn SceneEmbeddings,
    provider: &dyn DetectionProvider,
    cfg: &GfnConfig,
    params: &FusionParams,
    flags: SearchFlags,
) -> Result<RankedResult> {
    let scene_scores = if flags.any() {
        score_gallery_scenes(task, scenes, cfg, params)?
    } else {
        BTreeMap::new()
    };
    let (kept, filtered_scene_ids) = if flags.use_gfn_filter {
        filter_gallery(&scene_scores, cfg.lambda_gfn)
    } else {
        (task.gallery_set(), BTreeSet::new())
    };

    let mut entries = Vec::new();
    for sid in kept {
        let s_gfn = scene_scores.get(&sid).copied();
        let weight = match (flags.use_gfn_weight, s_gfn) {
            (true, Some(s)) => logistic_weight(s, cfg.alpha, cfg.orientation),
            _ => 1.0,
        };
        for d in provider.detections(sid)? {
            if d.scene_id != sid {
                return Err(Error::data(format!(
                    "provider returned a detection of scene {} for scene {sid}",
                    d.scene_id
                )));
            }
            let s_reid = cosine_sim(&task.query_embedding, &d.embedding)?;
            entries.push(RankedEntry {
                scene_id: sid,
                bbox: d.bbox,
                s_reid,
                s_det: d.s_det,
                s_gfn,
                s_final: s_reid * d.s_det * weight,
            });
        }
    }
    rank_entries(&mut entries);
    Ok(RankedResult {
        entries,
        filtered_scene_ids,
        scene_scores,
    })
}

/// [`two_phase_search`] over many tasks in parallel; output order follows input.
pub fn search_all(
    tasks: &[RetrievalTask],
    scenes: &dyn SceneEmbeddings,
    provider: &dyn DetectionProvider,
    cfg: &GfnConfig,
    params: &FusionParams,
    flags: SearchFlags,
) -> Result<Vec<RankedResult>> {
    tasks
        .par_iter()
        .map(|t| two_phase_search(t, scenes, provider, cfg, params, flags))
        .collect()
}

/// Shrinks the gallery to `size` distinct scenes. Scenes holding the query
/// identity are always kept (even past `size`); the rest are drawn uniformly.
pub fn subsample_gallery(task: &RetrievalTask, bundle: &DatasetBundle, size: usize, seed: u64) -> Result<RetrievalTask> {
    let all: Vec<SceneId> = task.gallery_set().into_iter().collect();
    if size == 0 || size > all.len() {
        return Err(Error::contract(format!(
            "gallery size {size} outside 1..={}",
            all.len()
        )));
    }
    let (positives, mut negatives): (Vec<SceneId>, Vec<SceneId>) = all
        .into_iter()
        .partition(|&s| bundle.known_identities_in(s).contains(&task.person_id));
    let fill = size.saturating_sub(positives.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    negatives.shuffle(&mut rng);
    negatives.truncate(fill);
    let mut gallery: Vec<SceneId> = positives.into_iter().chain(negatives).collect();
    gallery.sort_unstable();
    Ok(RetrievalTask {
        gallery,
        ..task.clone()
    })
}
