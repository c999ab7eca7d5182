//! Query-scene excitation fusion: `BN(sigmoid(x / beta) ⊙ y)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::sigmoid;

pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Batch statistics; running statistics are updated by the caller.
    #[default]
    Train,
    /// Running statistics.
    Inference,
    /// No normalisation at all: output is the gated scene vector.
    Bypass,
}

/// Per-feature batch-normalisation state for the fused vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub gamma: Vec<f64>,
    pub delta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub mode: FusionMode,
}

impl FusionParams {
    pub fn new(dim: usize) -> Self {
        FusionParams {
            gamma: vec![1.0; dim],
            delta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: DEFAULT_BN_MOMENTUM,
            eps: DEFAULT_BN_EPS,
            mode: FusionMode::Train,
        }
    }

    pub fn bypass(dim: usize) -> Self {
        FusionParams {
            mode: FusionMode::Bypass,
            ..Self::new(dim)
        }
    }

    pub fn with_mode(mut self, mode: FusionMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.delta.len() != d || self.running_mean.len() != d || self.running_var.len() != d {
            return Err(Error::contract("fusion parameter vectors must share a positive length"));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::contract(format!("momentum {} outside (0, 1]", self.momentum)));
        }
        if self.mode == FusionMode::Inference && self.running_var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::contract("running variance must be positive in inference mode"));
        }
        Ok(())
    }

    /// Exponential moving update of the running statistics.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for f in 0..self.dim() {
            self.running_mean[f] = (1.0 - m) * self.running_mean[f] + m * stats.mean[f];
            self.running_var[f] = (1.0 - m) * self.running_var[f] + m * stats.unbiased_var[f];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub n: usize,
    pub mean: Vec<f64>,
    /// Biased (population) variance, used for normalisation.
    pub var: Vec<f64>,
    /// Bessel-corrected variance, folded into the running estimate.
    pub unbiased_var: Vec<f64>,
}

/// Cached forward pass of [`fuse_batch`], sufficient for the backward pass.
#[derive(Clone, Debug)]
pub struct FusionForward {
    pub outputs: Vec<Vec<f64>>,
    gates: Vec<Vec<f64>>,
    ys: Vec<Vec<f64>>,
    normalized: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
    pub stats: Option<BatchStats>,
    mode: FusionMode,
    beta: f64,
}

#[derive(Clone, Debug)]
pub struct FusionGrads {
    pub d_x: Vec<Vec<f64>>,
    pub d_y: Vec<Vec<f64>>,
    pub d_gamma: Vec<f64>,
    pub d_delta: Vec<f64>,
}

/// Fuses `(xs[n], ys[n])` for every `n`. In train mode the normalisation
/// uses statistics over this batch; `params` is not mutated.
pub fn fuse_batch(xs: &[&[f64]], ys: &[&[f64]], params: &FusionParams, beta: f64) -> Result<FusionForward> {
    if xs.len() != ys.len() {
        return Err(Error::contract("fusion needs one scene vector per person vector"));
    }
    if !(beta > 0.0) {
        return Err(Error::contract(format!("beta must be positive, got {beta}")));
    }
    params.validate()?;
    let d = params.dim();
    if let Some(bad) = xs.iter().chain(ys).find(|v| v.len() != d) {
        return Err(Error::contract(format!("fusion dimension mismatch: {} vs {d}", bad.len())));
    }

    let gates: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().map(|v| sigmoid(v / beta)).collect()).collect();
    let gated: Vec<Vec<f64>> = gates
        .iter()
        .zip(ys)
        .map(|(g, y)| g.iter().zip(y.iter()).map(|(a, b)| a * b).collect())
        .collect();
    let n = gated.len();

    let (mean, var, stats) = match params.mode {
        FusionMode::Bypass => {
            return Ok(FusionForward {
                outputs: gated.clone(),
                normalized: gated,
                gates,
                ys: ys.iter().map(|y| y.to_vec()).collect(),
                inv_std: vec![1.0; d],
                stats: None,
                mode: FusionMode::Bypass,
                beta,
            });
        }
        FusionMode::Inference => (params.running_mean.clone(), params.running_var.clone(), None),
        FusionMode::Train => {
            if n == 0 {
                return Err(Error::contract("train-mode fusion needs a non-empty batch"));
            }
            let mut mean = vec![0.0; d];
            for u in &gated {
                for (m, v) in mean.iter_mut().zip(u) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut ss = vec![0.0; d];
            for u in &gated {
                for f in 0..d {
                    ss[f] += (u[f] - mean[f]).powi(2);
                }
            }
            let var: Vec<f64> = ss.iter().map(|s| s / n as f64).collect();
            let unbiased_var = if n > 1 {
                ss.iter().map(|s| s / (n - 1) as f64).collect()
            } else {
                var.clone()
            };
            let stats = BatchStats {
                n,
                mean: mean.clone(),
                var: var.clone(),
                unbiased_var,
            };
            (mean, var, Some(stats))
        }
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + params.eps).sqrt()).collect();
    let normalized: Vec<Vec<f64>> = gated
        .iter()
        .map(|u| (0..d).map(|f| (u[f] - mean[f]) * inv_std[f]).collect())
        .collect();
    let outputs = normalized
        .iter()
        .map(|h| (0..d).map(|f| params.gamma[f] * h[f] + params.delta[f]).collect())
        .collect();
    Ok(FusionForward {
        outputs,
        gates,
        ys: ys.iter().map(|y| y.to_vec()).collect(),
        normalized,
        inv_std,
        stats,
        mode: params.mode,
        beta,
    })
}

impl FusionForward {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    /// Back-propagates `d_out` (one row per fused vector).
    pub fn backward(&self, params: &FusionParams, d_out: &[Vec<f64>]) -> FusionGrads {
        let n = self.len();
        let d = self.inv_std.len();
        let mut d_gamma = vec![0.0; d];
        let mut d_delta = vec![0.0; d];

        let d_gated: Vec<Vec<f64>> = match self.mode {
            FusionMode::Bypass => d_out.to_vec(),
            FusionMode::Inference => {
                for (g, h) in d_out.iter().zip(&self.normalized) {
                    for f in 0..d {
                        d_gamma[f] += g[f] * h[f];
                        d_delta[f] += g[f];
                    }
                }
                d_out
                    .iter()
                    .map(|g| (0..d).map(|f| g[f] * params.gamma[f] * self.inv_std[f]).collect())
                    .collect()
            }
            FusionMode::Train => {
                let mut sum_dh = vec![0.0; d];
                let mut sum_dh_h = vec![0.0; d];
                for (g, h) in d_out.iter().zip(&self.normalized) {
                    for f in 0..d {
                        d_gamma[f] += g[f] * h[f];
                        d_delta[f] += g[f];
                        let dh = g[f] * params.gamma[f];
                        sum_dh[f] += dh;
                        sum_dh_h[f] += dh * h[f];
                    }
                }
                let nf = n as f64;
                d_out
                    .iter()
                    .zip(&self.normalized)
                    .map(|(g, h)| {
                        (0..d)
                            .map(|f| {
                                let dh = g[f] * params.gamma[f];
                                self.inv_std[f] / nf * (nf * dh - sum_dh[f] - h[f] * sum_dh_h[f])
                            })
                            .collect()
                    })
                    .collect()
            }
        };

        let mut d_x = Vec::with_capacity(n);
        let mut d_y = Vec::with_capacity(n);
        for ((du, gate), y) in d_gated.iter().zip(&self.gates).zip(&self.ys) {
            d_y.push((0..d).map(|f| du[f] * gate[f]).collect());
            d_x.push(
                (0..d)
                    .map(|f| du[f] * y[f] * gate[f] * (1.0 - gate[f]) / self.beta)
                    .collect(),
            );
        }
        FusionGrads {
            d_x,
            d_y,
            d_gamma,
            d_delta,
        }
    }
}

/// Fuses a single pair. Train-mode params are evaluated with their running
/// statistics, since one vector has no batch statistics to speak of.
pub fn fuse(x: &[f64], y: &[f64], params: &FusionParams, beta: f64) -> Result<Vec<f64>> {
    let forward = if params.mode == FusionMode::Train {
        fuse_batch(&[x], &[y], &params.clone().with_mode(FusionMode::Inference), beta)?
    } else {
        fuse_batch(&[x], &[y], params, beta)?
    };
    Ok(forward.outputs.into_iter().next().expect("one output"))
}
