//! Shared numeric primitives: cosine similarity, logistic weighting and the
//! one-positive-versus-candidates cross-entropy used by every contrastive
//! objective in the crate.
//!
//! Vectors are plain `f64` slices. Stored embeddings may be `f32`, but all
//! accumulation happens in `f64`.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite, non-empty embedding vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("embedding must have dim > 0"));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::degenerate(format!(
                "embedding entry {pos} is not finite ({})",
                values[pos]
            )));
        }
        Ok(Embedding(values))
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    /// Unit-norm copy. Zero vectors are rejected rather than clamped.
    pub fn normalized(&self) -> Result<Self> {
        Ok(Embedding(normalize(&self.0)?))
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Vec<f64> {
        e.0
    }
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

pub fn normalize(u: &[f64]) -> Result<Vec<f64>> {
    let n = norm(u);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::degenerate(format!("cannot normalize vector with norm {n}")));
    }
    Ok(u.iter().map(|v| v / n).collect())
}

fn check_pair(u: &[f64], v: &[f64]) -> Result<(f64, f64)> {
    if u.len() != v.len() {
        return Err(Error::contract(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    if u.is_empty() {
        return Err(Error::contract("empty vectors"));
    }
    let (nu, nv) = (norm(u), norm(v));
    if !(nu > 0.0) || !(nv > 0.0) {
        return Err(Error::degenerate("cosine similarity of a zero-norm vector"));
    }
    Ok((nu, nv))
}

/// `u·v / (‖u‖‖v‖)`, clamped to `[-1, 1]` against rounding.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    let (nu, nv) = check_pair(u, v)?;
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine similarity together with its partial derivatives.
#[derive(Clone, Debug)]
pub struct CosineGrad {
    pub sim: f64,
    pub d_u: Vec<f64>,
    pub d_v: Vec<f64>,
}

pub fn cosine_sim_grad(u: &[f64], v: &[f64]) -> Result<CosineGrad> {
    let (nu, nv) = check_pair(u, v)?;
    let inv = 1.0 / (nu * nv);
    // Unclamped here so the derivative stays consistent with the value.
    let sim = dot(u, v) * inv;
    let d_u = u
        .iter()
        .zip(v)
        .map(|(a, b)| b * inv - sim * a / (nu * nu))
        .collect();
    let d_v = u
        .iter()
        .zip(v)
        .map(|(a, b)| a * inv - sim * b / (nv * nv))
        .collect();
    Ok(CosineGrad { sim, d_u, d_v })
}

/// Standard increasing logistic, evaluated without overflow for any `z`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Which way the score weight bends.
///
/// `Decreasing` is `e^{-x}/(1+e^{-x})`, i.e. `1 - sigmoid(x)`. `Increasing` is
/// the ordinary sigmoid, so higher filter scores earn larger weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    #[default]
    Increasing,
    Decreasing,
}

pub fn logistic_weight(s: f64, alpha: f64, orientation: Orientation) -> f64 {
    debug_assert!(alpha > 0.0, "alpha must be positive");
    let z = s / alpha;
    match orientation {
        Orientation::Increasing => sigmoid(z),
        Orientation::Decreasing => sigmoid(-z),
    }
}

/// Stable `log Σ exp(l_k)`.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

/// Softmax cross-entropy for a single target. Returns the loss and
/// `∂loss/∂logits`.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let loss = if logits[target] == m {
        // log1p form keeps tiny losses accurate when the target dominates
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != target)
            .map(|(_, l)| (l - m).exp())
            .sum();
        rest.ln_1p()
    } else {
        (lse - logits[target]).max(0.0)
    };
    let mut grad: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

#[derive(Clone, Debug)]
pub struct PairLossResult {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    /// One gradient per candidate, in input order.
    pub grad_candidates: Vec<Vec<f64>>,
}

/// `-log softmax(sim(anchor, c_k) / tau)[positive_index]` with exact
/// gradients through the cosine normalisation.
///
/// Gradient-stopped candidates are the caller's business: every candidate
/// receives a gradient here and the caller drops the ones it froze.
pub fn contrastive_pair_loss(
    anchor: &[f64],
    candidates: &[&[f64]],
    positive_index: usize,
    tau: f64,
) -> Result<PairLossResult> {
    if candidates.is_empty() {
        return Err(Error::contract("contrastive loss needs at least one candidate"));
    }
    if positive_index >= candidates.len() {
        return Err(Error::contract(format!(
            "positive index {positive_index} out of range for {} candidates",
            candidates.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    let grads = candidates
        .iter()
        .map(|c| cosine_sim_grad(anchor, c))
        .collect::<Result<Vec<_>>>()?;
    let logits: Vec<f64> = grads.iter().map(|g| g.sim / tau).collect();
    let (loss, d_logits) = cross_entropy(&logits, positive_index);

    let mut grad_anchor = vec![0.0; anchor.len()];
    let mut grad_candidates = Vec::with_capacity(candidates.len());
    for (g, dl) in grads.iter().zip(&d_logits) {
        let d_sim = dl / tau;
        for (ga, du) in grad_anchor.iter_mut().zip(&g.d_u) {
            *ga += d_sim * du;
        }
        grad_candidates.push(g.d_v.iter().map(|dv| d_sim * dv).collect());
    }
    Ok(PairLossResult {
        loss,
        grad_anchor,
        grad_candidates,
    })
}

/// `acc += scale * v`
pub(crate) fn axpy(acc: &mut [f64], scale: f64, v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += scale * b;
    }
}
