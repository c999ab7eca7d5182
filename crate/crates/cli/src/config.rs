//! TOML run configuration.
//!
//! Every section is optional and falls back to its defaults; unknown keys are
//! rejected. A list placed where the schema expects a single value (or a list
//! of lists where it expects a list) is a grid axis: the file expands into the
//! cartesian product of all axes, first axis slowest.

use std::fs;
use std::path::{Path, PathBuf};

use gfn_core::gfn::GfnConfig;
use gfn_core::synth::ToyRunConfig;
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the world and training seeds and seeds splitting and
    /// gallery subsampling.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub data: DataPaths,
    pub gfn: GfnConfig,
    pub toy: ToyRunConfig,
    pub split: SplitSettings,
    pub eval: EvalSettings,
    pub filter: FilterSettings,
}

/// Inputs of `eval` and `filter-analysis`. Relative paths resolve against the
/// config file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub dataset: Option<PathBuf>,
    /// Query person embeddings keyed by annotation id.
    pub persons: Option<PathBuf>,
    /// Scene embeddings keyed by scene id.
    pub scenes: Option<PathBuf>,
    /// JSON-lines detections.
    pub detections: Option<PathBuf>,
    /// Embeddings the detections refer to by `embedding_id`.
    pub detection_embeddings: Option<PathBuf>,
    pub retrieval: Option<PathBuf>,
    /// Checkpoint directory whose fusion state scores scenes.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub target_fraction: f64,
    pub ignore_top_k: usize,
}

impl Default for SplitSettings {
    fn default() -> Self {
        SplitSettings {
            target_fraction: 0.2,
            ignore_top_k: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub iou_threshold: f64,
    /// Drop each query's own scene from partition-wide galleries.
    pub exclude_query_scene: bool,
    /// Gallery sizes for the size sweep; empty disables it.
    pub gallery_sizes: Vec<usize>,
    /// Also report same-camera and cross-camera retrieval.
    pub camera_split: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            iou_threshold: gfn_core::eval::DEFAULT_IOU_THRESHOLD,
            exclude_query_scene: true,
            gallery_sizes: Vec::new(),
            camera_split: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Cuhk,
    Prw,
}

/// Reference per-query inputs of the cost model for two benchmarks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PresetValues {
    pub negative_fraction: f64,
    pub npv: f64,
    pub detection_time_fraction: f64,
}

impl Preset {
    pub fn values(self) -> PresetValues {
        match self {
            Preset::Cuhk => PresetValues {
                negative_fraction: 0.999,
                npv: 0.914,
                detection_time_fraction: 0.610,
            },
            Preset::Prw => PresetValues {
                negative_fraction: 0.993,
                npv: 0.115,
                detection_time_fraction: 0.578,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSettings {
    pub bins: usize,
    pub recall_targets: Vec<f64>,
    /// Recall at which the savings estimate takes its npv.
    pub savings_recall: f64,
    pub preset: Option<Preset>,
    pub negative_fraction: Option<f64>,
    pub npv: Option<f64>,
    pub detection_time_fraction: Option<f64>,
}

impl Default for FilterSettings {
    fn default() -> Self {
        FilterSettings {
            bins: 20,
            recall_targets: vec![0.9, 0.95, 0.99],
            savings_recall: 0.99,
            preset: None,
            negative_fraction: None,
            npv: None,
            detection_time_fraction: None,
        }
    }
}

/// One expanded run: its config and the grid values that produced it.
#[derive(Clone, Debug)]
pub struct GridRun {
    pub config: RunConfig,
    pub assignments: Vec<(String, Value)>,
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Reads and expands a config file, resolving data paths against its
/// directory.
pub fn load_config(path: &Path) -> Result<Vec<GridRun>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let mut runs = parse_config(&text).map_err(|e| match e {
        CliError::Usage(msg) => CliError::Usage(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    for run in &mut runs {
        run.config.data.resolve(base);
        if let Some(out) = &run.config.out {
            if out.is_relative() {
                run.config.out = Some(base.join(out));
            }
        }
    }
    Ok(runs)
}

impl DataPaths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.dataset,
            &mut self.persons,
            &mut self.scenes,
            &mut self.detections,
            &mut self.detection_embeddings,
            &mut self.retrieval,
            &mut self.checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

pub fn parse_config(text: &str) -> Result<Vec<GridRun>, CliError> {
    let doc: Value = text
        .parse::<toml::Table>()
        .map(Value::Table)
        .map_err(|e| config_error(format!("malformed config: {e}")))?;
    let defaults = Value::try_from(RunConfig::default()).expect("defaults serialise");
    let mut axes = Vec::new();
    collect_axes(&doc, Some(&defaults), &mut Vec::new(), &mut axes)?;

    let mut runs = Vec::new();
    let total: usize = axes.iter().map(|(_, v): &(Vec<String>, Vec<Value>)| v.len()).product();
    for index in 0..total {
        let mut value = doc.clone();
        let mut assignments = Vec::new();
        let mut rest = index;
        // last axis varies fastest
        let mut picks = vec![0; axes.len()];
        for (k, (_, values)) in axes.iter().enumerate().rev() {
            picks[k] = rest % values.len();
            rest /= values.len();
        }
        for ((path, values), pick) in axes.iter().zip(picks) {
            set_path(&mut value, path, values[pick].clone());
            assignments.push((path.join("."), values[pick].clone()));
        }
        // partial tables keep the run defaults of the keys they omit
        let mut merged = defaults.clone();
        overlay(&mut merged, value);
        let config: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| config_error(format!("invalid config: {}", e.message())))?;
        runs.push(GridRun { config, assignments });
    }
    Ok(runs)
}

fn collect_axes(
    value: &Value,
    default: Option<&Value>,
    path: &mut Vec<String>,
    axes: &mut Vec<(Vec<String>, Vec<Value>)>,
) -> Result<(), CliError> {
    match value {
        Value::Table(t) => {
            for (k, v) in t {
                path.push(k.clone());
                let d = default.and_then(|d| d.as_table()).and_then(|d| d.get(k));
                collect_axes(v, d, path, axes)?;
                path.pop();
            }
        }
        Value::Array(items) => {
            let expects_list = matches!(default, Some(Value::Array(_)));
            let is_grid = if expects_list {
                !items.is_empty() && items.iter().all(Value::is_array)
            } else {
                true
            };
            if is_grid {
                if items.is_empty() {
                    return Err(config_error(format!("grid axis `{}` has no values", path.join("."))));
                }
                axes.push((path.clone(), items.clone()));
            }
        }
        _ => {}
    }
    Ok(())
}

fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(value: &mut Value, path: &[String], leaf: Value) {
    let mut cur = value;
    for key in &path[..path.len() - 1] {
        cur = cur.get_mut(key.as_str()).expect("axis path exists");
    }
    cur.as_table_mut()
        .expect("axis parent is a table")
        .insert(path[path.len() - 1].clone(), leaf);
}
