use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::fusion::{fuse_batch, BatchStats, FusionParams};
use super::world::PairIndex;
use crate::error::{Error, Result};
use crate::math::{axpy, contrastive_pair_loss};

/// Embedding rows plus a per-row gradient-stop flag. Frozen rows (lookup
/// table snapshots, prototypes) take part in the loss but receive zero
/// gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingSet {
    pub rows: Vec<Vec<f64>>,
    pub frozen: Vec<bool>,
}

impl EmbeddingSet {
    pub fn trainable(rows: Vec<Vec<f64>>) -> Self {
        let frozen = vec![false; rows.len()];
        EmbeddingSet { rows, frozen }
    }

    pub fn frozen(rows: Vec<Vec<f64>>) -> Self {
        let frozen = vec![true; rows.len()];
        EmbeddingSet { rows, frozen }
    }

    pub fn push(&mut self, row: Vec<f64>, frozen: bool) {
        self.rows.push(row);
        self.frozen.push(frozen);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| vec![0.0; r.len()]).collect()
    }

    fn check(&self, what: &str) -> Result<()> {
        if self.rows.len() != self.frozen.len() {
            return Err(Error::contract(format!("{what}: one frozen flag per row required")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Sum over positive pairs, as the objectives are written.
    #[default]
    Sum,
    Mean,
}

impl Reduction {
    fn scale(self, pairs: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean if pairs > 0 => 1.0 / pairs as f64,
            Reduction::Mean => 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GfnLossOutput {
    pub loss: f64,
    pub positive_pairs: usize,
    /// Zero rows for frozen persons.
    pub grad_persons: Vec<Vec<f64>>,
    pub grad_scenes: Vec<Vec<f64>>,
    /// Only filled by the combined objective.
    pub grad_gamma: Vec<f64>,
    pub grad_delta: Vec<f64>,
    /// Batch statistics of the fused vectors (combined objective, train mode).
    pub fusion_stats: Option<BatchStats>,
}

fn zero_frozen(grads: &mut [Vec<f64>], set: &EmbeddingSet) {
    for (g, &f) in grads.iter_mut().zip(&set.frozen) {
        if f {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn check_indices(pairs: &PairIndex, anchors: usize, scenes: usize) -> Result<()> {
    for p in &pairs.pairs {
        if p.anchor >= anchors {
            return Err(Error::contract(format!("anchor index {} out of range", p.anchor)));
        }
        if let Some(k) = p.candidates.iter().find(|&&k| k >= scenes) {
            return Err(Error::contract(format!("candidate scene index {k} out of range")));
        }
    }
    Ok(())
}

/// Person-versus-scene contrastive loss: each positive `(i, j)` contrasts
/// `x_i` against `y_k` for `k` in its candidate set.
pub fn baseline_gfn_loss(
    persons: &EmbeddingSet,
    scenes: &EmbeddingSet,
    pairs: &PairIndex,
    tau: f64,
    reduction: Reduction,
) -> Result<GfnLossOutput> {
    persons.check("persons")?;
    scenes.check("scenes")?;
    check_indices(pairs, persons.len(), scenes.len())?;
    let scale = reduction.scale(pairs.len());
    let mut grad_persons = persons.zero_grads();
    let mut grad_scenes = scenes.zero_grads();
    let mut loss = 0.0;
    for p in &pairs.pairs {
        let slot = p.positive_slot()?;
        let cands: Vec<&[f64]> = p.candidates.iter().map(|&k| scenes.rows[k].as_slice()).collect();
        let r = contrastive_pair_loss(&persons.rows[p.anchor], &cands, slot, tau)?;
        loss += r.loss;
        axpy(&mut grad_persons[p.anchor], scale, &r.grad_anchor);
        for (&k, g) in p.candidates.iter().zip(&r.grad_candidates) {
            axpy(&mut grad_scenes[k], scale, g);
        }
    }
    zero_frozen(&mut grad_persons, persons);
    zero_frozen(&mut grad_scenes, scenes);
    Ok(GfnLossOutput {
        loss: loss * scale,
        positive_pairs: pairs.len(),
        grad_persons,
        grad_scenes,
        grad_gamma: Vec::new(),
        grad_delta: Vec::new(),
        fusion_stats: None,
    })
}

/// Fused query-scene loss. The anchor of person `i` is `w_i = f(x_i,
/// y_{own(i)})`, candidates are `z_{i,k} = f(x_i, y_k)`. Each distinct
/// `(i, k)` is fused once, so `z_{i,own(i)}` and `w_i` are the same vector,
/// and in train mode the normalisation statistics run over that set.
#[allow(clippy::too_many_arguments)]
pub fn combined_gfn_loss(
    persons: &EmbeddingSet,
    scenes: &EmbeddingSet,
    own_scene: &[usize],
    pairs: &PairIndex,
    params: &FusionParams,
    tau: f64,
    beta: f64,
    reduction: Reduction,
) -> Result<GfnLossOutput> {
    persons.check("persons")?;
    scenes.check("scenes")?;
    check_indices(pairs, persons.len(), scenes.len())?;
    if own_scene.len() != persons.len() {
        return Err(Error::contract("own-scene map must cover every person"));
    }
    if let Some(&k) = own_scene.iter().find(|&&k| k >= scenes.len()) {
        return Err(Error::contract(format!("own scene index {k} out of range")));
    }

    let mut slots: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut keys: Vec<(usize, usize)> = Vec::new();
    let mut slot_of = |key: (usize, usize)| {
        *slots.entry(key).or_insert_with(|| {
            keys.push(key);
            keys.len() - 1
        })
    };
    let mut layout = Vec::with_capacity(pairs.len());
    for p in &pairs.pairs {
        let anchor = slot_of((p.anchor, own_scene[p.anchor]));
        let cands: Vec<usize> = p.candidates.iter().map(|&k| slot_of((p.anchor, k))).collect();
        layout.push((anchor, cands, p.positive_slot()?));
    }

    let xs: Vec<&[f64]> = keys.iter().map(|&(i, _)| persons.rows[i].as_slice()).collect();
    let ys: Vec<&[f64]> = keys.iter().map(|&(_, k)| scenes.rows[k].as_slice()).collect();
    let scale = reduction.scale(pairs.len());
    let dim = params.dim();

    if keys.is_empty() {
        return Ok(GfnLossOutput {
            loss: 0.0,
            positive_pairs: 0,
            grad_persons: persons.zero_grads(),
            grad_scenes: scenes.zero_grads(),
            grad_gamma: vec![0.0; dim],
            grad_delta: vec![0.0; dim],
            fusion_stats: None,
        });
    }

    let forward = fuse_batch(&xs, &ys, params, beta)?;
    let mut d_fused = vec![vec![0.0; dim]; keys.len()];
    let mut loss = 0.0;
    for (anchor, cands, slot) in &layout {
        let cand_rows: Vec<&[f64]> = cands.iter().map(|&c| forward.outputs[c].as_slice()).collect();
        let r = contrastive_pair_loss(&forward.outputs[*anchor], &cand_rows, *slot, tau)?;
        loss += r.loss;
        axpy(&mut d_fused[*anchor], scale, &r.grad_anchor);
        for (&c, g) in cands.iter().zip(&r.grad_candidates) {
            axpy(&mut d_fused[c], scale, g);
        }
    }

    let back = forward.backward(params, &d_fused);
    let mut grad_persons = persons.zero_grads();
    let mut grad_scenes = scenes.zero_grads();
    for (n, &(i, k)) in keys.iter().enumerate() {
        axpy(&mut grad_persons[i], 1.0, &back.d_x[n]);
        axpy(&mut grad_scenes[k], 1.0, &back.d_y[n]);
    }
    zero_frozen(&mut grad_persons, persons);
    zero_frozen(&mut grad_scenes, scenes);
    Ok(GfnLossOutput {
        loss: loss * scale,
        positive_pairs: pairs.len(),
        grad_persons,
        grad_scenes,
        grad_gamma: back.d_gamma,
        grad_delta: back.d_delta,
        fusion_stats: forward.stats,
    })
}

/// Scene-versus-scene loss over pairs built by [`PairIndex::scene_scene`].
pub fn scene_only_gfn_loss(
    scenes: &EmbeddingSet,
    pairs: &PairIndex,
    tau: f64,
    reduction: Reduction,
) -> Result<GfnLossOutput> {
    scenes.check("scenes")?;
    check_indices(pairs, scenes.len(), scenes.len())?;
    if let Some(p) = pairs.pairs.iter().find(|p| p.candidates.contains(&p.anchor)) {
        return Err(Error::contract(format!(
            "scene {} appears in its own candidate set",
            p.anchor
        )));
    }
    let scale = reduction.scale(pairs.len());
    let mut grad_scenes = scenes.zero_grads();
    let mut loss = 0.0;
    for p in &pairs.pairs {
        let slot = p.positive_slot()?;
        let cands: Vec<&[f64]> = p.candidates.iter().map(|&k| scenes.rows[k].as_slice()).collect();
        let r = contrastive_pair_loss(&scenes.rows[p.anchor], &cands, slot, tau)?;
        loss += r.loss;
        axpy(&mut grad_scenes[p.anchor], scale, &r.grad_anchor);
        for (&k, g) in p.candidates.iter().zip(&r.grad_candidates) {
            axpy(&mut grad_scenes[k], scale, g);
        }
    }
    zero_frozen(&mut grad_scenes, scenes);
    Ok(GfnLossOutput {
        loss: loss * scale,
        positive_pairs: pairs.len(),
        grad_persons: Vec::new(),
        grad_scenes,
        grad_gamma: Vec::new(),
        grad_delta: Vec::new(),
        fusion_stats: None,
    })
}
