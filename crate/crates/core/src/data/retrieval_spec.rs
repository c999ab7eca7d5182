use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{AnnId, DatasetBundle, PersonId, SceneId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalFormat {
    /// Each query lists its exact gallery.
    FullySpecified,
    /// Queries listed; gallery is every scene of the partition.
    QueriesOnly,
    /// Every known annotation is a query against every scene.
    All,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryEntry {
    pub query_ann_id: AnnId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gallery_scene_ids: Option<Vec<SceneId>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalSpec {
    pub format: RetrievalFormat,
    #[serde(default)]
    pub queries: Vec<QueryEntry>,
}

/// A query with an explicit gallery, ready for embedding lookup.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedQuery {
    pub query_ann_id: AnnId,
    pub query_scene_id: SceneId,
    pub person_id: PersonId,
    pub gallery: Vec<SceneId>,
}

impl RetrievalSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: malformed retrieval spec: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("spec serialises");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// The fully-specified spec equivalent to already-resolved queries.
    pub fn from_resolved(tasks: &[ResolvedQuery]) -> Self {
        RetrievalSpec {
            format: RetrievalFormat::FullySpecified,
            queries: tasks
                .iter()
                .map(|t| QueryEntry {
                    query_ann_id: t.query_ann_id,
                    gallery_scene_ids: Some(t.gallery.clone()),
                })
                .collect(),
        }
    }

    /// Gallery scenes listed more than once for some query, as
    /// `(query_ann_id, scene_id)`. Kept in place; this only reports them.
    pub fn repeated_gallery_scenes(&self) -> Vec<(AnnId, SceneId)> {
        let mut out = Vec::new();
        for q in &self.queries {
            let mut seen = BTreeSet::new();
            for &s in q.gallery_scene_ids.iter().flatten() {
                if !seen.insert(s) {
                    out.push((q.query_ann_id, s));
                }
            }
        }
        out
    }
}

/// Expands `spec` into explicit per-query galleries. For the partition-wide
/// formats the query's own scene is dropped when `exclude_query_scene` is
/// set; fully specified galleries are used verbatim.
pub fn resolve_retrieval_spec(
    spec: &RetrievalSpec,
    bundle: &DatasetBundle,
    exclude_query_scene: bool,
) -> Result<Vec<ResolvedQuery>> {
    let query_ids: Vec<AnnId> = match spec.format {
        RetrievalFormat::All => bundle
            .annotations()
            .iter()
            .filter(|a| a.is_known)
            .map(|a| a.ann_id)
            .collect(),
        _ => spec.queries.iter().map(|q| q.query_ann_id).collect(),
    };
    let all_scenes = bundle.scene_ids();

    query_ids
        .iter()
        .enumerate()
        .map(|(k, &qid)| {
            let ann = bundle
                .annotation(qid)
                .ok_or_else(|| Error::data(format!("query annotation {qid} not found in partition")))?;
            let person_id = ann
                .person_id
                .ok_or_else(|| Error::data(format!("query annotation {qid} has no person_id")))?;
            let gallery = match spec.format {
                RetrievalFormat::FullySpecified => {
                    let g = spec.queries[k].gallery_scene_ids.clone().unwrap_or_default();
                    if g.is_empty() {
                        return Err(Error::data(format!(
                            "query annotation {qid}: fully specified entry needs gallery_scene_ids"
                        )));
                    }
                    if let Some(missing) = g.iter().find(|s| bundle.scene(**s).is_none()) {
                        return Err(Error::data(format!(
                            "query annotation {qid}: gallery scene {missing} not in partition"
                        )));
                    }
                    g
                }
                _ => all_scenes
                    .iter()
                    .copied()
                    .filter(|&s| !(exclude_query_scene && s == ann.scene_id))
                    .collect(),
            };
            Ok(ResolvedQuery {
                query_ann_id: qid,
                query_scene_id: ann.scene_id,
                person_id,
                gallery,
            })
        })
        .collect()
}
