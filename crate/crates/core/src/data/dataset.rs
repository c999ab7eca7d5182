use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub type SceneId = i64;
pub type AnnId = i64;
pub type PersonId = i64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    #[serde(rename = "id")]
    pub scene_id: SceneId,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub cam_id: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonAnnotation {
    #[serde(rename = "id")]
    pub ann_id: AnnId,
    #[serde(rename = "image_id")]
    pub scene_id: SceneId,
    pub bbox: BBox,
    pub person_id: Option<PersonId>,
    pub is_known: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: i64,
    pub name: String,
}

impl Category {
    pub fn person() -> Self {
        Category {
            id: 1,
            name: "person".to_owned(),
        }
    }
}

/// On-disk layout. Unknown keys (COCO `area`, `iscrowd`, ...) are ignored.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    partition: Option<String>,
    images: Vec<SceneRecord>,
    annotations: Vec<PersonAnnotation>,
    categories: Vec<Category>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateBox {
    pub scene_id: SceneId,
    pub ann_ids: Vec<AnnId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepeatedPersonId {
    pub scene_id: SceneId,
    pub person_id: PersonId,
    pub ann_ids: Vec<AnnId>,
}

/// Known upstream annotation defects. They are reported and left in place.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub duplicate_boxes: Vec<DuplicateBox>,
    pub repeated_person_ids: Vec<RepeatedPersonId>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.duplicate_boxes.is_empty() && self.repeated_person_ids.is_empty()
    }

    pub fn issue_count(&self) -> usize {
        self.duplicate_boxes.len() + self.repeated_person_ids.len()
    }
}

/// Scenes and person annotations of one partition, immutable once built.
#[derive(Clone, Debug)]
pub struct DatasetBundle {
    partition: String,
    scenes: Vec<SceneRecord>,
    annotations: Vec<PersonAnnotation>,
    report: ValidationReport,
    scene_index: HashMap<SceneId, usize>,
    ann_index: HashMap<AnnId, usize>,
    anns_by_scene: HashMap<SceneId, Vec<usize>>,
    scenes_by_person: BTreeMap<PersonId, BTreeSet<SceneId>>,
}

impl DatasetBundle {
    /// Validates and indexes. Structural problems are hard errors; known
    /// upstream defects land in the [`ValidationReport`].
    pub fn new(
        partition: impl Into<String>,
        scenes: Vec<SceneRecord>,
        annotations: Vec<PersonAnnotation>,
    ) -> Result<Self> {
        let mut scene_index = HashMap::with_capacity(scenes.len());
        for (i, s) in scenes.iter().enumerate() {
            if s.width == 0 || s.height == 0 {
                return Err(Error::data(format!(
                    "image {}: width and height must be positive",
                    s.scene_id
                )));
            }
            if scene_index.insert(s.scene_id, i).is_some() {
                return Err(Error::data(format!("image {}: duplicate image id", s.scene_id)));
            }
        }

        let mut ann_index = HashMap::with_capacity(annotations.len());
        let mut anns_by_scene: HashMap<SceneId, Vec<usize>> = HashMap::new();
        let mut scenes_by_person: BTreeMap<PersonId, BTreeSet<SceneId>> = BTreeMap::new();
        for (i, a) in annotations.iter().enumerate() {
            let scene = scene_index
                .get(&a.scene_id)
                .map(|&k| &scenes[k])
                .ok_or_else(|| {
                    Error::data(format!(
                        "annotation {}: image_id {} does not exist",
                        a.ann_id, a.scene_id
                    ))
                })?;
            if !a.bbox.is_valid() {
                return Err(Error::data(format!(
                    "annotation {}: bbox {:?} must have positive width and height",
                    a.ann_id, a.bbox
                )));
            }
            let (x1, y1, x2, y2) = a.bbox.corners();
            if x1 < 0.0 || y1 < 0.0 || x2 > f64::from(scene.width) || y2 > f64::from(scene.height) {
                return Err(Error::data(format!(
                    "annotation {}: bbox {:?} exceeds image {} extent {}x{}",
                    a.ann_id, a.bbox, scene.scene_id, scene.width, scene.height
                )));
            }
            if a.is_known != a.person_id.is_some() {
                return Err(Error::data(format!(
                    "annotation {}: is_known={} but person_id is {:?}",
                    a.ann_id, a.is_known, a.person_id
                )));
            }
            if ann_index.insert(a.ann_id, i).is_some() {
                return Err(Error::data(format!("annotation {}: duplicate annotation id", a.ann_id)));
            }
            anns_by_scene.entry(a.scene_id).or_default().push(i);
            if let Some(pid) = a.person_id {
                scenes_by_person.entry(pid).or_default().insert(a.scene_id);
            }
        }

        let report = build_report(&scenes, &annotations, &anns_by_scene);
        Ok(DatasetBundle {
            partition: partition.into(),
            scenes,
            annotations,
            report,
            scene_index,
            ann_index,
            anns_by_scene,
            scenes_by_person,
        })
    }

    pub fn empty(partition: impl Into<String>) -> Self {
        DatasetBundle::new(partition, Vec::new(), Vec::new()).expect("empty bundle is valid")
    }

    pub fn partition(&self) -> &str {
        &self.partition
    }

    pub fn scenes(&self) -> &[SceneRecord] {
        &self.scenes
    }

    pub fn annotations(&self) -> &[PersonAnnotation] {
        &self.annotations
    }

    pub fn report(&self) -> &ValidationReport {
        &self.report
    }

    pub fn scene(&self, id: SceneId) -> Option<&SceneRecord> {
        self.scene_index.get(&id).map(|&i| &self.scenes[i])
    }

    pub fn annotation(&self, id: AnnId) -> Option<&PersonAnnotation> {
        self.ann_index.get(&id).map(|&i| &self.annotations[i])
    }

    /// Annotations located in `scene`, in file order.
    pub fn annotations_in(&self, scene: SceneId) -> impl Iterator<Item = &PersonAnnotation> + '_ {
        self.anns_by_scene
            .get(&scene)
            .into_iter()
            .flatten()
            .map(move |&i| &self.annotations[i])
    }

    pub fn known_identities_in(&self, scene: SceneId) -> BTreeSet<PersonId> {
        self.annotations_in(scene).filter_map(|a| a.person_id).collect()
    }

    /// Scenes containing a known box of `person`.
    pub fn scenes_with(&self, person: PersonId) -> Option<&BTreeSet<SceneId>> {
        self.scenes_by_person.get(&person)
    }

    /// Known identities and the scenes each appears in.
    pub fn identity_scenes(&self) -> &BTreeMap<PersonId, BTreeSet<SceneId>> {
        &self.scenes_by_person
    }

    pub fn scene_ids(&self) -> Vec<SceneId> {
        self.scenes.iter().map(|s| s.scene_id).collect()
    }

    /// Restriction to the given scenes, keeping file order.
    pub fn subset(&self, keep: &BTreeSet<SceneId>, partition: impl Into<String>) -> DatasetBundle {
        let scenes = self
            .scenes
            .iter()
            .filter(|s| keep.contains(&s.scene_id))
            .cloned()
            .collect();
        let annotations = self
            .annotations
            .iter()
            .filter(|a| keep.contains(&a.scene_id))
            .cloned()
            .collect();
        DatasetBundle::new(partition, scenes, annotations).expect("subset of a valid bundle is valid")
    }

    pub fn to_json(&self) -> String {
        let file = DatasetFile {
            partition: Some(self.partition.clone()),
            images: self.scenes.clone(),
            annotations: self.annotations.clone(),
            categories: vec![Category::person()],
        };
        let mut s = serde_json::to_string_pretty(&file).expect("dataset serialises");
        s.push('\n');
        s
    }

    /// Parses a dataset document. `default_partition` is used when the
    /// document carries no `partition` key.
    pub fn from_json(text: &str, default_partition: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(text)
            .map_err(|e| Error::data(format!("malformed dataset JSON: {e}")))?;
        if file.categories.len() != 1 || file.categories[0].name != "person" {
            return Err(Error::data("categories must hold exactly one `person` entry"));
        }
        DatasetBundle::new(
            file.partition.unwrap_or_else(|| default_partition.to_owned()),
            file.images,
            file.annotations,
        )
    }
}

fn build_report(
    scenes: &[SceneRecord],
    annotations: &[PersonAnnotation],
    anns_by_scene: &HashMap<SceneId, Vec<usize>>,
) -> ValidationReport {
    let mut report = ValidationReport::default();
    for scene in scenes {
        let Some(idx) = anns_by_scene.get(&scene.scene_id) else {
            continue;
        };
        let mut by_box: BTreeMap<[u64; 4], Vec<AnnId>> = BTreeMap::new();
        let mut by_person: BTreeMap<PersonId, Vec<AnnId>> = BTreeMap::new();
        for &i in idx {
            let a = &annotations[i];
            by_box.entry(a.bbox.key()).or_default().push(a.ann_id);
            if let Some(pid) = a.person_id {
                by_person.entry(pid).or_default().push(a.ann_id);
            }
        }
        let mut dups: Vec<DuplicateBox> = by_box
            .into_values()
            .filter(|ids| ids.len() > 1)
            .map(|ann_ids| DuplicateBox {
                scene_id: scene.scene_id,
                ann_ids,
            })
            .collect();
        dups.sort_by_key(|d| d.ann_ids[0]);
        report.duplicate_boxes.extend(dups);
        report.repeated_person_ids.extend(
            by_person
                .into_iter()
                .filter(|(_, ids)| ids.len() > 1)
                .map(|(person_id, ann_ids)| RepeatedPersonId {
                    scene_id: scene.scene_id,
                    person_id,
                    ann_ids,
                }),
        );
    }
    report
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetBundle> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("unknown");
    DatasetBundle::from_json(&text, stem).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_dataset(bundle: &DatasetBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bundle.to_json()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn scene(id: SceneId, cam: i64) -> SceneRecord {
        SceneRecord {
            scene_id: id,
            file_name: format!("s{id}.jpg"),
            width: 100,
            height: 100,
            cam_id: cam,
        }
    }

    fn ann(id: AnnId, scene: SceneId, x: f64, pid: Option<PersonId>) -> PersonAnnotation {
        PersonAnnotation {
            ann_id: id,
            scene_id: scene,
            bbox: BBox::new(x, 0.0, 10.0, 20.0),
            person_id: pid,
            is_known: pid.is_some(),
        }
    }

    #[test]
    fn minimal_bundle_has_empty_report() {
        let b = DatasetBundle::new("test", vec![scene(1, 0)], vec![ann(1, 1, 0.0, Some(7))]).unwrap();
        assert!(b.report().is_empty());
        assert_eq!(b.known_identities_in(1), BTreeSet::from([7]));
    }

    #[test]
    fn duplicate_box_is_reported_not_fixed() {
        let b = DatasetBundle::new(
            "test",
            vec![scene(1, 0)],
            vec![ann(1, 1, 0.0, Some(7)), ann(2, 1, 0.0, None)],
        )
        .unwrap();
        assert_eq!(b.report().duplicate_boxes.len(), 1);
        assert_eq!(b.report().duplicate_boxes[0].ann_ids, vec![1, 2]);
        assert_eq!(b.annotations().len(), 2);
    }

    #[test]
    fn repeated_person_id_is_reported() {
        let b = DatasetBundle::new(
            "test",
            vec![scene(1, 0)],
            vec![ann(1, 1, 0.0, Some(7)), ann(2, 1, 30.0, Some(7))],
        )
        .unwrap();
        assert_eq!(b.report().repeated_person_ids.len(), 1);
        assert!(b.report().duplicate_boxes.is_empty());
    }

    #[test]
    fn known_flag_must_match_person_id() {
        let mut a = ann(1, 1, 0.0, Some(7));
        a.person_id = None;
        let err = DatasetBundle::new("t", vec![scene(1, 0)], vec![a]).unwrap_err();
        assert!(err.to_string().contains("annotation 1"), "{err}");
    }

    #[test]
    fn structural_errors_name_the_record() {
        let err = DatasetBundle::new("t", vec![scene(1, 0)], vec![ann(5, 2, 0.0, None)]).unwrap_err();
        assert!(err.to_string().contains("annotation 5"));
        let mut a = ann(6, 1, 0.0, None);
        a.bbox.w = -3.0;
        let err = DatasetBundle::new("t", vec![scene(1, 0)], vec![a]).unwrap_err();
        assert!(err.to_string().contains("annotation 6"));
        let err = DatasetBundle::new("t", vec![scene(1, 0)], vec![ann(7, 1, 95.0, None)]).unwrap_err();
        assert!(err.to_string().contains("exceeds"));
    }

    #[test]
    fn malformed_json_is_a_data_error() {
        assert!(matches!(DatasetBundle::from_json("{", "x"), Err(Error::Data(_))));
        let no_cat = r#"{"images": [], "annotations": [], "categories": []}"#;
        assert!(DatasetBundle::from_json(no_cat, "x").is_err());
    }

    #[test]
    fn json_round_trip_is_byte_stable() {
        let b = DatasetBundle::new(
            "val",
            vec![scene(1, 0), scene(2, 1)],
            vec![ann(1, 1, 0.0, Some(7)), ann(2, 2, 5.5, None)],
        )
        .unwrap();
        let text = b.to_json();
        let back = DatasetBundle::from_json(&text, "ignored").unwrap();
        assert_eq!(back.partition(), "val");
        assert_eq!(back.to_json(), text);
    }
}
