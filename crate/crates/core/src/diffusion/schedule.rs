use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Noise schedule for K diffusion steps.
///
/// Latent level `k` ranges over `0..=K`; level 0 is the clean latent with
/// cumulative alpha 1, and level `k >= 1` uses `alpha_bars[k - 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Scaled-linear schedule: betas interpolate linearly in square-root space.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let (lo, hi) = (beta_start.sqrt(), beta_end.sqrt());
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                return beta_start;
            }
            let t = i as f64 / (steps - 1) as f64;
            let r = lo + t * (hi - lo);
            r * r
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(DiffusionSchedule {
        beta_start,
        beta_end,
        betas,
        alpha_bars,
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// Cumulative alpha at latent level `level` (0 = clean).
    pub fn alpha_bar(&self, level: usize) -> f64 {
        if level == 0 {
            1.0
        } else {
            self.alpha_bars[level - 1]
        }
    }
}
