use crate::backends::{Conditioning, DiffusionBackend, Latent};
use crate::diffusion::DiffusionSchedule;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Denoising: level k to k - 1.
    Forward,
    /// Inversion: level k to k + 1.
    Reverse,
}

/// Moves a latent between two noise levels with the deterministic DDIM
/// update, holding the noise estimate fixed.
pub(crate) fn transfer(z: &[f64], eps: &[f64], alpha_from: f64, alpha_to: f64) -> Vec<f64> {
    let (sa, sb) = (alpha_from.sqrt(), (1.0 - alpha_from).sqrt());
    let (ta, tb) = (alpha_to.sqrt(), (1.0 - alpha_to).sqrt());
    z.iter()
        .zip(eps)
        .map(|(z, e)| {
            let x0 = (z - sb * e) / sa;
            ta * x0 + tb * e
        })
        .collect()
}

/// One deterministic DDIM step from level `k`.
pub fn ddim_step(
    z: &Latent,
    eps: &Latent,
    k: usize,
    schedule: &DiffusionSchedule,
    direction: Direction,
) -> Result<Latent> {
    if z.len() != eps.len() {
        return Err(Error::Dimension(format!(
            "latent has {} values, noise has {}",
            z.len(),
            eps.len()
        )));
    }
    let steps = schedule.steps();
    let target = match direction {
        Direction::Forward if (1..=steps).contains(&k) => k - 1,
        Direction::Reverse if k < steps => k + 1,
        _ => return Err(Error::StepOutOfRange { index: k, steps }),
    };
    let data = transfer(
        &z.data,
        &eps.data,
        schedule.alpha_bar(k),
        schedule.alpha_bar(target),
    );
    Ok(z.with_data(data))
}

/// Classifier-free guidance: `eps_null + scale * (eps_cond - eps_null)`.
pub fn combine_guidance(eps_cond: &[f64], eps_null: &[f64], scale: f64) -> Vec<f64> {
    eps_cond
        .iter()
        .zip(eps_null)
        .map(|(c, u)| u + scale * (c - u))
        .collect()
}

pub fn guided_noise(
    z: &Latent,
    step: usize,
    cond: &Conditioning,
    null_cond: &Conditioning,
    scale: f64,
    backend: &dyn DiffusionBackend,
) -> Result<Latent> {
    if !(scale >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "guidance scale must be non-negative, got {scale}"
        )));
    }
    let eps_cond = backend.predict_noise(z, step, cond)?;
    let eps_null = backend.predict_noise(z, step, null_cond)?;
    check_shape(z, &eps_cond)?;
    check_shape(z, &eps_null)?;
    Ok(z.with_data(combine_guidance(&eps_cond.data, &eps_null.data, scale)))
}

fn check_shape(z: &Latent, eps: &Latent) -> Result<()> {
    if z.shape != eps.shape {
        return Err(Error::Contract(format!(
            "noise prediction shape {:?} differs from latent shape {:?}",
            eps.shape, z.shape
        )));
    }
    Ok(())
}

/// DDIM inversion: runs the sampler backwards from the clean latent `z0`
/// to level K. Returns the trajectory `z_0 ..= z_K`.
///
/// The noise for the step `k -> k + 1` is predicted at `z_k` with level
/// `k + 1`, the usual inversion approximation.
pub fn ddim_invert(
    z0: &Latent,
    cond: &Conditioning,
    schedule: &DiffusionSchedule,
    backend: &dyn DiffusionBackend,
    guidance_scale: f64,
) -> Result<Vec<Latent>> {
    let null = backend.null_conditioning()?;
    let mut trajectory = Vec::with_capacity(schedule.steps() + 1);
    trajectory.push(z0.clone());
    for k in 0..schedule.steps() {
        let z = trajectory.last().expect("non-empty");
        let eps = guided_noise(z, k + 1, cond, &null, guidance_scale, backend)?;
        let next = ddim_step(z, &eps, k, schedule, Direction::Reverse)?;
        trajectory.push(next);
    }
    Ok(trajectory)
}

/// Guided DDIM sampling from `z_k` at level K down to level 0, using a
/// per-step null conditioning (`nulls[k - 1]` for the step out of level k).
pub fn ddim_sample(
    z_top: &Latent,
    cond: &Conditioning,
    nulls: &[Conditioning],
    schedule: &DiffusionSchedule,
    backend: &dyn DiffusionBackend,
    guidance_scale: f64,
) -> Result<Vec<Latent>> {
    let steps = schedule.steps();
    if nulls.len() != steps {
        return Err(Error::Dimension(format!(
            "{} null conditionings for a {steps}-step schedule",
            nulls.len()
        )));
    }
    let mut out = Vec::with_capacity(steps + 1);
    out.push(z_top.clone());
    for k in (1..=steps).rev() {
        let z = out.last().expect("non-empty");
        let eps = guided_noise(z, k, cond, &nulls[k - 1], guidance_scale, backend)?;
        out.push(ddim_step(z, &eps, k, schedule, Direction::Forward)?);
    }
    // reorder to level order z_0 ..= z_K
    out.reverse();
    Ok(out)
}
