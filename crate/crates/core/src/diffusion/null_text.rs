use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{Conditioning, DiffusionBackend, Latent};
use crate::diffusion::ddim::{combine_guidance, ddim_invert, transfer};
use crate::diffusion::DiffusionSchedule;
use crate::vecops::sq_dist;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullTextConfig {
    /// Guidance used while reconstructing (the editing guidance).
    pub guidance_scale: f64,
    pub inner_steps: usize,
    pub learning_rate: f64,
    /// Stop the inner loop once the loss drops below this.
    pub early_stop: f64,
    /// Central-difference step for backends without a gradient hook.
    pub fd_step: f64,
    /// Above this conditioning size, finite differences use a random
    /// coordinate subsample of this many entries.
    pub fd_max_coords: usize,
    pub seed: u64,
}

impl Default for NullTextConfig {
    fn default() -> Self {
        Self {
            guidance_scale: 7.5,
            inner_steps: 10,
            learning_rate: 1e-2,
            early_stop: 1e-5,
            fd_step: 1e-4,
            fd_max_coords: 64,
            seed: 0,
        }
    }
}

/// Pivot trajectory plus per-step optimised null conditionings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    pub schedule: DiffusionSchedule,
    pub guidance_scale: f64,
    /// Pivot latents `z_0 ..= z_K`; `z_0` is the encoded image.
    pub trajectory: Vec<Latent>,
    /// `null_embeddings[k - 1]` is the optimised null for the step out of level k.
    pub null_embeddings: Vec<Conditioning>,
    /// Final squared reconstruction error of each step, indexed like the nulls.
    pub step_errors: Vec<f64>,
    /// Accepted inner-loop losses of each step, indexed like the nulls.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_history: Vec<Vec<f64>>,
}

impl InversionResult {
    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    /// Latent reached by guided sampling from `z_K` with the stored nulls.
    pub fn reconstruct_latent(
        &self,
        cond: &Conditioning,
        backend: &dyn DiffusionBackend,
    ) -> Result<Latent> {
        let top = self
            .trajectory
            .last()
            .ok_or_else(|| Error::Contract("empty inversion trajectory".into()))?;
        let out = crate::diffusion::ddim_sample(
            top,
            cond,
            &self.null_embeddings,
            &self.schedule,
            backend,
            self.guidance_scale,
        )?;
        Ok(out.into_iter().next().expect("non-empty"))
    }

    pub fn total_error(&self) -> f64 {
        self.step_errors.iter().sum()
    }
}

/// The per-step least-squares problem over the null conditioning:
/// `|| target - S(z_hat, null, cond) ||^2` where `S` is one guided DDIM step.
pub struct NullTextStep<'a> {
    backend: &'a dyn DiffusionBackend,
    schedule: &'a DiffusionSchedule,
    level: usize,
    z_hat: &'a Latent,
    target: &'a Latent,
    eps_cond: Latent,
    guidance_scale: f64,
}

impl<'a> NullTextStep<'a> {
    pub fn new(
        backend: &'a dyn DiffusionBackend,
        schedule: &'a DiffusionSchedule,
        level: usize,
        z_hat: &'a Latent,
        target: &'a Latent,
        cond: &Conditioning,
        guidance_scale: f64,
    ) -> Result<Self> {
        if level == 0 || level > schedule.steps() {
            return Err(Error::StepOutOfRange {
                index: level,
                steps: schedule.steps(),
            });
        }
        let eps_cond = backend.predict_noise(z_hat, level, cond)?;
        Ok(Self {
            backend,
            schedule,
            level,
            z_hat,
            target,
            eps_cond,
            guidance_scale,
        })
    }

    /// The sampled latent `S(z_hat, null, cond)` at level `k - 1`.
    pub fn step(&self, null: &Conditioning) -> Result<Latent> {
        let eps_null = self.backend.predict_noise(self.z_hat, self.level, null)?;
        let eps = combine_guidance(&self.eps_cond.data, &eps_null.data, self.guidance_scale);
        let data = transfer(
            &self.z_hat.data,
            &eps,
            self.schedule.alpha_bar(self.level),
            self.schedule.alpha_bar(self.level - 1),
        );
        Ok(self.z_hat.with_data(data))
    }

    pub fn loss(&self, null: &Conditioning) -> Result<f64> {
        Ok(sq_dist(&self.target.data, &self.step(null)?.data))
    }

    /// Coefficient of the noise estimate in one DDIM step.
    fn noise_coefficient(&self) -> f64 {
        let a_from = self.schedule.alpha_bar(self.level);
        let a_to = self.schedule.alpha_bar(self.level - 1);
        (1.0 - a_to).sqrt() - a_to.sqrt() * (1.0 - a_from).sqrt() / a_from.sqrt()
    }

    /// Loss and its gradient through the backend's vector-Jacobian hook.
    /// `None` when the backend offers no hook.
    pub fn analytic_gradient(&self, null: &Conditioning) -> Result<Option<(f64, Vec<f64>)>> {
        let s = self.step(null)?;
        let residual: Vec<f64> = self
            .target
            .data
            .iter()
            .zip(&s.data)
            .map(|(t, v)| t - v)
            .collect();
        let loss = residual.iter().map(|r| r * r).sum();
        let Some(jt_r) = self
            .backend
            .noise_vjp(self.z_hat, self.level, null, &residual)?
        else {
            return Ok(None);
        };
        if jt_r.len() != null.len() {
            return Err(Error::Contract(format!(
                "noise_vjp returned {} values for a {}-dim conditioning",
                jt_r.len(),
                null.len()
            )));
        }
        // dS/dnull = B (1 - w) J, so dL/dnull = -2 B (1 - w) J^T r
        let factor = -2.0 * self.noise_coefficient() * (1.0 - self.guidance_scale);
        Ok(Some((loss, jt_r.into_iter().map(|g| factor * g).collect())))
    }

    /// Central-difference gradient over `coords` (all coordinates if `None`).
    pub fn finite_difference_gradient(
        &self,
        null: &Conditioning,
        h: f64,
        coords: Option<&[usize]>,
    ) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; null.len()];
        let all: Vec<usize>;
        let coords = match coords {
            Some(c) => c,
            None => {
                all = (0..null.len()).collect();
                &all
            }
        };
        let mut probe = null.clone();
        for &i in coords {
            let orig = probe.0[i];
            probe.0[i] = orig + h;
            let up = self.loss(&probe)?;
            probe.0[i] = orig - h;
            let down = self.loss(&probe)?;
            probe.0[i] = orig;
            grad[i] = (up - down) / (2.0 * h);
        }
        Ok(grad)
    }
}

/// Optimises one null conditioning per step so that guided sampling
/// retraces the pivot trajectory. Steps run from level K down to 1; each
/// starts from the previous optimum (or the plain null when that is
/// better) and the optimised latent is carried to the next step. Updates
/// follow Adam; a step that would raise the loss is rejected and the
/// learning rate halved, and each accepted step lets it double back up
/// to the configured rate.
pub fn optimize_null_text(
    trajectory: &[Latent],
    cond: &Conditioning,
    schedule: &DiffusionSchedule,
    backend: &dyn DiffusionBackend,
    config: &NullTextConfig,
) -> Result<InversionResult> {
    let steps = schedule.steps();
    if trajectory.len() != steps + 1 {
        return Err(Error::Dimension(format!(
            "trajectory of {} latents for a {steps}-step schedule",
            trajectory.len()
        )));
    }
    let base_null = backend.null_conditioning()?;
    let mut warm = base_null.clone();
    let mut z_hat = trajectory[steps].clone();
    let mut nulls = vec![base_null.clone(); steps];
    let mut errors = vec![0.0; steps];
    let mut history = vec![Vec::new(); steps];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    for k in (1..=steps).rev() {
        let problem = NullTextStep::new(
            backend,
            schedule,
            k,
            &z_hat,
            &trajectory[k - 1],
            cond,
            config.guidance_scale,
        )?;
        let warm_loss = problem.loss(&warm)?;
        let (mut null, mut loss) = if k < steps {
            let base_loss = problem.loss(&base_null)?;
            if base_loss < warm_loss {
                (base_null.clone(), base_loss)
            } else {
                (warm.clone(), warm_loss)
            }
        } else {
            (warm.clone(), warm_loss)
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(k));
        }
        let mut lr = config.learning_rate;
        let mut adam = Adam::new(null.len());
        let mut losses = vec![loss];
        for _ in 0..config.inner_steps {
            if loss < config.early_stop {
                break;
            }
            let grad = match problem.analytic_gradient(&null)? {
                Some((_, g)) => g,
                None => {
                    let coords = (null.len() > config.fd_max_coords).then(|| {
                        index::sample(&mut rng, null.len(), config.fd_max_coords).into_vec()
                    });
                    problem.finite_difference_gradient(&null, config.fd_step, coords.as_deref())?
                }
            };
            let direction = adam.direction(&grad);
            let candidate = Conditioning(
                null.0
                    .iter()
                    .zip(&direction)
                    .map(|(n, d)| n - lr * d)
                    .collect(),
            );
            let candidate_loss = problem.loss(&candidate)?;
            if !candidate_loss.is_finite() {
                return Err(Error::NonFiniteLoss(k));
            }
            if candidate_loss <= loss {
                null = candidate;
                loss = candidate_loss;
                losses.push(loss);
                lr = (2.0 * lr).min(config.learning_rate);
            } else {
                // overshoot: keep the iterate, shrink the step
                lr *= 0.5;
            }
        }
        let next = problem.step(&null)?;
        errors[k - 1] = loss;
        history[k - 1] = losses;
        nulls[k - 1] = null.clone();
        warm = null;
        z_hat = next;
    }

    Ok(InversionResult {
        schedule: schedule.clone(),
        guidance_scale: config.guidance_scale,
        trajectory: trajectory.to_vec(),
        null_embeddings: nulls,
        step_errors: errors,
        loss_history: history,
    })
}

/// Adam moment estimates for one step's inner loop.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Bias-corrected update direction for gradient `g`.
    fn direction(&mut self, g: &[f64]) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        self.m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(g)
            .map(|((m, v), g)| {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                (*m / c1) / ((*v / c2).sqrt() + Self::EPS)
            })
            .collect()
    }
}

/// DDIM inversion followed by null-text optimisation.
pub fn invert(
    z0: &Latent,
    cond: &Conditioning,
    schedule: &DiffusionSchedule,
    backend: &dyn DiffusionBackend,
    inversion_guidance: f64,
    config: &NullTextConfig,
) -> Result<InversionResult> {
    let trajectory = ddim_invert(z0, cond, schedule, backend, inversion_guidance)?;
    optimize_null_text(&trajectory, cond, schedule, backend, config)
}
