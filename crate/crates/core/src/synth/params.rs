use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingStore, StoreKind};
use crate::error::{Error, Result};
use crate::gfn::FusionParams;

/// Trainable heads of the toy model: linear scene and person projections and
/// the fusion normalisation. Matrices are row-major `dim × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainableParams {
    pub dim: usize,
    pub scene_weight: Vec<f64>,
    pub scene_bias: Vec<f64>,
    pub person_weight: Vec<f64>,
    pub person_bias: Vec<f64>,
    pub fusion: FusionParams,
    pub learning_rate: f64,
    pub epochs: usize,
}

/// Gradient with the same layout as the trainable part of [`TrainableParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub scene_weight: Vec<f64>,
    pub scene_bias: Vec<f64>,
    pub person_weight: Vec<f64>,
    pub person_bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub delta: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(dim: usize) -> Self {
        ParamGrads {
            scene_weight: vec![0.0; dim * dim],
            scene_bias: vec![0.0; dim],
            person_weight: vec![0.0; dim * dim],
            person_bias: vec![0.0; dim],
            gamma: vec![0.0; dim],
            delta: vec![0.0; dim],
        }
    }

    /// Same order as [`TrainableParams::flat`].
    pub fn flat(&self) -> Vec<f64> {
        [
            &self.scene_weight,
            &self.scene_bias,
            &self.person_weight,
            &self.person_bias,
            &self.gamma,
            &self.delta,
        ]
        .into_iter()
        .flatten()
        .copied()
        .collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Hyper {
    dim: usize,
    learning_rate: f64,
    epochs: usize,
    fusion: FusionParams,
}

impl TrainableParams {
    /// Random Gaussian scene projection with variance `1/dim`, identity person
    /// projection, zero biases and default fusion state.
    pub fn init(dim: usize, learning_rate: f64, epochs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("positive std");
        let scene_weight = (0..dim * dim).map(|_| dist.sample(&mut rng)).collect();
        let mut person_weight = vec![0.0; dim * dim];
        for i in 0..dim {
            person_weight[i * dim + i] = 1.0;
        }
        TrainableParams {
            dim,
            scene_weight,
            scene_bias: vec![0.0; dim],
            person_weight,
            person_bias: vec![0.0; dim],
            fusion: FusionParams::new(dim),
            learning_rate,
            epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if self.scene_weight.len() != d * d
            || self.person_weight.len() != d * d
            || self.scene_bias.len() != d
            || self.person_bias.len() != d
            || self.fusion.dim() != d
        {
            return Err(Error::contract("parameter shapes disagree with dim"));
        }
        self.fusion.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::degenerate("non-finite parameter"));
        }
        Ok(())
    }

    pub fn embed_scene(&self, raw: &[f64]) -> Vec<f64> {
        affine(&self.scene_weight, &self.scene_bias, raw)
    }

    pub fn embed_person(&self, raw: &[f64]) -> Vec<f64> {
        affine(&self.person_weight, &self.person_bias, raw)
    }

    /// Scene weight, scene bias, person weight, person bias, gamma, delta.
    pub fn flat(&self) -> Vec<f64> {
        [
            &self.scene_weight,
            &self.scene_bias,
            &self.person_weight,
            &self.person_bias,
            &self.fusion.gamma,
            &self.fusion.delta,
        ]
        .into_iter()
        .flatten()
        .copied()
        .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for buf in [
            &mut self.scene_weight,
            &mut self.scene_bias,
            &mut self.person_weight,
            &mut self.person_bias,
            &mut self.fusion.gamma,
            &mut self.fusion.delta,
        ] {
            for v in buf.iter_mut() {
                *v = it.next().expect("flat vector too short");
            }
        }
    }

    /// Plain gradient step.
    pub fn apply(&mut self, g: &ParamGrads) {
        let lr = self.learning_rate;
        for (p, d) in [
            (&mut self.scene_weight, &g.scene_weight),
            (&mut self.scene_bias, &g.scene_bias),
            (&mut self.person_weight, &g.person_weight),
            (&mut self.person_bias, &g.person_bias),
            (&mut self.fusion.gamma, &g.gamma),
            (&mut self.fusion.delta, &g.delta),
        ] {
            for (pv, dv) in p.iter_mut().zip(d) {
                *pv -= lr * dv;
            }
        }
    }

    /// Writes `params.json` (hyper-parameters and fusion state) and the
    /// projection rows as an `f32` store `weights.json` + `weights.bin`.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let d = self.dim;
        let rows: Vec<Vec<f64>> = self
            .scene_weight
            .chunks(d)
            .chain(std::iter::once(self.scene_bias.as_slice()))
            .chain(self.person_weight.chunks(d))
            .chain(std::iter::once(self.person_bias.as_slice()))
            .map(<[f64]>::to_vec)
            .collect();
        let ids = (0..rows.len() as i64).collect();
        EmbeddingStore::from_rows(StoreKind::Parameter, ids, &rows)?.save(dir.join("weights.json"))?;
        let hyper = Hyper {
            dim: d,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            fusion: self.fusion.clone(),
        };
        let path = dir.join("params.json");
        let mut text = serde_json::to_string_pretty(&hyper).expect("params serialise");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("params.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let hyper: Hyper = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let store = EmbeddingStore::load(dir.join("weights.json"))?;
        let d = hyper.dim;
        if store.dim() != d || store.len() != 2 * d + 2 {
            return Err(Error::Corrupt(format!(
                "checkpoint weights have shape {}×{}, expected {}×{d}",
                store.len(),
                store.dim(),
                2 * d + 2
            )));
        }
        let rows = store.rows_f64();
        let params = TrainableParams {
            dim: d,
            scene_weight: rows[..d].concat(),
            scene_bias: rows[d].clone(),
            person_weight: rows[d + 1..2 * d + 1].concat(),
            person_bias: rows[2 * d + 1].clone(),
            fusion: hyper.fusion,
            learning_rate: hyper.learning_rate,
            epochs: hyper.epochs,
        };
        params.validate()?;
        Ok(params)
    }
}

pub(crate) fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let d = b.len();
    (0..d)
        .map(|r| b[r] + w[r * d..(r + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect()
}

/// Accumulates `dW += dy ⊗ x`, `db += dy`.
pub(crate) fn affine_backward(dw: &mut [f64], db: &mut [f64], dy: &[f64], x: &[f64]) {
    let d = db.len();
    for r in 0..d {
        db[r] += dy[r];
        for (w, v) in dw[r * d..(r + 1) * d].iter_mut().zip(x) {
            *w += dy[r] * v;
        }
    }
}
