//! Layer-wise adaptive moments (LAMB) with bias-corrected Adam moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::tensor_file::{f64_from_bytes, f64_to_bytes};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// When false the trust ratio is pinned to 1, which turns the update
    /// into Adam with decoupled weight decay.
    pub layerwise: bool,
}

impl Default for LambConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 1e-6,
            layerwise: true,
        }
    }
}

impl LambConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if self.eps < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("eps and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Moment buffers, one pair per parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    /// Writes `optimizer.json` (step and block sizes) and the two moment
    /// buffers as raw little-endian f64 files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = OptimizerHeader {
            step: self.step,
            sizes: self.first_moment.iter().map(Vec::len).collect(),
        };
        let path = dir.join("optimizer.json");
        fs::write(&path, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&path, e))?;
        for (file, blocks) in [
            ("moment1.bin", &self.first_moment),
            ("moment2.bin", &self.second_moment),
        ] {
            let flat: Vec<f64> = blocks.iter().flatten().copied().collect();
            let path = dir.join(file);
            fs::write(&path, f64_to_bytes(&flat)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("optimizer.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let header: OptimizerHeader = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        let total: usize = header.sizes.iter().sum();
        let read_blocks = |file: &str| -> Result<Vec<Vec<f64>>> {
            let path = dir.join(file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let flat = f64_from_bytes(&bytes)
                .filter(|v| v.len() == total)
                .ok_or_else(|| Error::Format {
                    path: path.clone(),
                    msg: format!("expected {total} f64 values"),
                })?;
            let mut offset = 0;
            Ok(header
                .sizes
                .iter()
                .map(|&n| {
                    offset += n;
                    flat[offset - n..offset].to_vec()
                })
                .collect())
        };
        Ok(Self {
            step: header.step,
            first_moment: read_blocks("moment1.bin")?,
            second_moment: read_blocks("moment2.bin")?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    sizes: Vec<usize>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖w‖/‖r‖` when both norms are positive, else 1.
pub fn trust_ratio(weights: &[f64], update: &[f64]) -> f64 {
    let (w, r) = (norm(weights), norm(update));
    if w > 0.0 && r > 0.0 {
        w / r
    } else {
        1.0
    }
}

/// One optimizer step: per block, `r = m̂/(√v̂ + ε) + λ·w` and
/// `w ← w − lr·trust·r`. Non-finite gradients abort before any parameter
/// changes.
pub fn lamb_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    names: &[&str],
    state: &mut OptimizerState,
    cfg: &LambConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len()
        || state.first_moment.len() != params.len()
        || state.second_moment.len() != params.len()
    {
        return Err(Error::shape("lamb_step", params.len(), grads.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.first_moment[i].len() != g.len() {
            return Err(Error::shape("lamb_step gradient", p.numel(), g.len()));
        }
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            let name = names.get(i).copied().unwrap_or("?");
            return Err(Error::NonFinite(format!(
                "gradient of {name} at index {pos} ({}); step aborted",
                g[pos]
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let w = p.data_mut();
        let mut update = Vec::with_capacity(g.len());
        for k in 0..g.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            update.push(m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * w[k]);
        }
        let trust = if cfg.layerwise { trust_ratio(w, &update) } else { 1.0 };
        for (wk, rk) in w.iter_mut().zip(&update) {
            *wk -= lr * trust * rk;
        }
    }
    Ok(())
}
