use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::StandardNormal;

use super::{f64_bytes, gaussian_unit, keyed_rng, keyed_uniform, JOINT_DIM};
use super::embed::StubJointEmbed;
use crate::backends::{
    image_to_unit, unit_to_image, AttentionControl, Conditioning, DiffusionBackend, Image,
    JointEmbedBackend, Latent,
};
use crate::diffusion::InversionResult;
use crate::vecops::{normalized, sub};
use crate::{Error, Result};

/// Pixel-space step along the lifted text direction at f = 0.
const EDIT_GAIN: f64 = 2.4;
/// Scale of the off-direction artefact, which grows with f.
const NOISE_GAIN: f64 = 2.0;
/// Edits whose difficulty exceeds this move against the text direction.
const HARD_EDIT: f64 = 0.9;
/// Weight of the latent in the noise prediction.
const SELF_WEIGHT: f64 = 0.01;
const COND_SCALE: f64 = 0.05;

/// Linear toy diffusion model over pixel-valued latents.
///
/// `predict_noise(z, k, c) = 0.01 z + W c` with a fixed random `W`, so the
/// conditioning gradient is exact. Editing reconstructs the source latent
/// and pushes it along the text-embedding difference lifted into pixel
/// space, mixed with an artefact whose weight rises with the injection
/// fraction and a per-edit difficulty.
#[derive(Debug)]
pub struct StubDiffusion {
    seed: u64,
    joint: Arc<StubJointEmbed>,
    weights: Mutex<HashMap<usize, Arc<Vec<Vec<f64>>>>>,
}

impl StubDiffusion {
    pub fn new(seed: u64, joint: Arc<StubJointEmbed>) -> Self {
        Self {
            seed,
            joint,
            weights: Mutex::new(HashMap::new()),
        }
    }

    /// Rows of `W`, one per latent entry, each of conditioning width.
    fn weights(&self, n: usize) -> Arc<Vec<Vec<f64>>> {
        let mut cache = self.weights.lock().unwrap_or_else(|p| p.into_inner());
        cache
            .entry(n)
            .or_insert_with(|| {
                let mut rng = keyed_rng(self.seed, &[b"noise-weights", &(n as u64).to_le_bytes()]);
                Arc::new(
                    (0..n)
                        .map(|_| {
                            (0..JOINT_DIM)
                                .map(|_| COND_SCALE * rng.sample::<f64, _>(StandardNormal))
                                .collect()
                        })
                        .collect(),
                )
            })
            .clone()
    }

    fn image_shape(latent: &Latent) -> Result<(u32, u32)> {
        match latent.shape.as_slice() {
            [h, w, 3] => Ok((*w as u32, *h as u32)),
            other => Err(Error::Dimension(format!(
                "stub latents are [h, w, 3], got {other:?}"
            ))),
        }
    }
}

impl DiffusionBackend for StubDiffusion {
    fn encode(&self, image: &Image) -> Result<Latent> {
        let (w, h) = image.dimensions();
        Latent::new(vec![h as usize, w as usize, 3], image_to_unit(image))
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        let (w, h) = Self::image_shape(latent)?;
        unit_to_image(w, h, &latent.data)
    }

    fn embed_prompt(&self, caption: &str) -> Result<Conditioning> {
        if caption.trim().is_empty() {
            let mut rng = keyed_rng(self.seed, &[b"null-prompt"]);
            return Ok(Conditioning(gaussian_unit(&mut rng, JOINT_DIM)));
        }
        Ok(Conditioning(self.joint.embed_text(caption)?))
    }

    fn predict_noise(&self, latent: &Latent, _step: usize, cond: &Conditioning) -> Result<Latent> {
        if cond.len() != JOINT_DIM {
            return Err(Error::Dimension(format!(
                "conditioning has {} values, expected {JOINT_DIM}",
                cond.len()
            )));
        }
        let w = self.weights(latent.len());
        let data = latent
            .data
            .iter()
            .zip(w.iter())
            .map(|(z, row)| SELF_WEIGHT * z + row.iter().zip(&cond.0).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        Ok(latent.with_data(data))
    }

    fn noise_vjp(
        &self,
        latent: &Latent,
        _step: usize,
        cond: &Conditioning,
        cotangent: &[f64],
    ) -> Result<Option<Vec<f64>>> {
        let w = self.weights(latent.len());
        let mut out = vec![0.0; cond.len()];
        for (row, v) in w.iter().zip(cotangent) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * v;
            }
        }
        Ok(Some(out))
    }

    fn edit_with_attention_control(
        &self,
        inversion: &InversionResult,
        source: &Conditioning,
        target: &Conditioning,
        control: &AttentionControl,
    ) -> Result<Image> {
        let base = inversion.reconstruct_latent(source, self)?;
        let delta = sub(&target.0, &source.0);
        let Some(direction) = normalized(&delta) else {
            return self.decode(&base);
        };
        let n = base.len();
        let f = control.self_replace.clamp(0.0, 1.0);
        let key = [f64_bytes(&source.0), f64_bytes(&target.0)].concat();
        let difficulty = keyed_uniform(self.seed, &[b"difficulty", &key]);
        let sign = if difficulty > HARD_EDIT { -1.0 } else { 1.0 };
        let lifted = self.joint.lift(n, &direction)?;
        let artefact = gaussian_unit(
            &mut keyed_rng(self.seed, &[b"artefact", &key, &f.to_le_bytes()]),
            n,
        );
        let along = sign * EDIT_GAIN * (1.0 - f);
        let off = NOISE_GAIN * difficulty * f;
        let data: Vec<f64> = base
            .data
            .iter()
            .zip(lifted.iter().zip(&artefact))
            .map(|(z, (l, r))| z + along * l + off * r)
            .collect();
        self.decode(&base.with_data(data))
    }
}
