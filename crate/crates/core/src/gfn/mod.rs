//! Gallery filter objectives and scoring.
//!
//! Three training objectives are provided, all built on the same
//! one-positive cross-entropy:
//!
//! * **baseline**: person embedding against scene embeddings,
//! * **combined**: person-scene fused embeddings, anchored on the fusion of
//!   the person with its own scene,
//! * **scene-only**: scene embedding against scene embeddings.
//!
//! At inference each variant yields one cosine score per gallery scene.

mod fusion;
mod loss;
mod world;

pub use fusion::{
    fuse, fuse_batch, BatchStats, FusionForward, FusionGrads, FusionMode, FusionParams, DEFAULT_BN_EPS,
    DEFAULT_BN_MOMENTUM,
};
pub use loss::{baseline_gfn_loss, combined_gfn_loss, scene_only_gfn_loss, EmbeddingSet, GfnLossOutput, Reduction};
pub use world::{indicator_qs, indicator_ss, PairIndex, PositivePair, World, WorldPerson};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{cosine_sim, Orientation};

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 0.2;
pub const DEFAULT_ALPHA: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Baseline,
    #[default]
    Combined,
    SceneOnly,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Baseline, Objective::Combined, Objective::SceneOnly];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Baseline => "baseline",
            Objective::Combined => "combined",
            Objective::SceneOnly => "scene_only",
        }
    }
}

/// Where training-time query person embeddings come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    /// Batch person embeddings, which receive gradients.
    #[default]
    Batch,
    /// Identity prototypes from the OIM table, gradient-stopped.
    Prototype,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GfnConfig {
    /// Training temperature of the contrastive objectives.
    pub tau: f64,
    /// Temperature of the excitation gate.
    pub beta: f64,
    /// Temperature of the inference score weight.
    pub alpha: f64,
    /// Scenes scoring below this are filtered out.
    pub lambda_gfn: f64,
    pub objective: Objective,
    pub query_source: QuerySource,
    pub orientation: Orientation,
}

impl Default for GfnConfig {
    fn default() -> Self {
        GfnConfig {
            tau: DEFAULT_TAU,
            beta: DEFAULT_BETA,
            alpha: DEFAULT_ALPHA,
            lambda_gfn: -1.0,
            objective: Objective::Combined,
            query_source: QuerySource::Batch,
            orientation: Orientation::Increasing,
        }
    }
}

impl GfnConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau", self.tau), ("beta", self.beta), ("alpha", self.alpha)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.lambda_gfn.is_nan() {
            return Err(Error::contract("lambda_gfn must not be NaN"));
        }
        Ok(())
    }
}

/// Scores gallery scenes for one query. The query-side fusion is computed
/// once at construction.
#[derive(Clone, Debug)]
pub struct GfnScorer<'a> {
    objective: Objective,
    person: &'a [f64],
    query_scene: &'a [f64],
    anchor: Option<Vec<f64>>,
    params: FusionParams,
    beta: f64,
}

impl<'a> GfnScorer<'a> {
    pub fn new(
        query_person: &'a [f64],
        query_scene: &'a [f64],
        cfg: &GfnConfig,
        params: &FusionParams,
    ) -> Result<Self> {
        cfg.validate()?;
        // Scoring never uses batch statistics.
        let params = if params.mode == FusionMode::Train {
            params.clone().with_mode(FusionMode::Inference)
        } else {
            params.clone()
        };
        let anchor = match cfg.objective {
            Objective::Combined => Some(fuse(query_person, query_scene, &params, cfg.beta)?),
            _ => None,
        };
        Ok(GfnScorer {
            objective: cfg.objective,
            person: query_person,
            query_scene,
            anchor,
            params,
            beta: cfg.beta,
        })
    }

    pub fn score(&self, gallery_scene: &[f64]) -> Result<f64> {
        match self.objective {
            Objective::Baseline => cosine_sim(self.person, gallery_scene),
            Objective::SceneOnly => cosine_sim(self.query_scene, gallery_scene),
            Objective::Combined => {
                let z = fuse(self.person, gallery_scene, &self.params, self.beta)?;
                let w = self.anchor.as_deref().expect("combined scorer has an anchor");
                cosine_sim(w, &z).map_err(|_| Error::degenerate("fused query-scene embedding has zero norm"))
            }
        }
    }
}

/// GFN score of one gallery scene for one query.
pub fn gfn_score(
    query_person: &[f64],
    query_scene: &[f64],
    gallery_scene: &[f64],
    cfg: &GfnConfig,
    params: &FusionParams,
) -> Result<f64> {
    GfnScorer::new(query_person, query_scene, cfg, params)?.score(gallery_scene)
}
