//! Counterfactual image generation: the attention-controlled edit is run
//! for every injection fraction in the sweep, gated, and the largest
//! passing fraction is kept.

use serde::{Deserialize, Serialize};

use crate::backends::{AttentionControl, Conditioning, DiffusionBackend, Image, JointEmbedBackend};
use crate::diffusion::InversionResult;
use crate::gates::{
    caption_consistency_from, image_quality_from, image_similarity_from, GateResult,
    PairEmbeddings, IMAGE_QUALITY,
};
use crate::model::{PerturbationType, PipelineConfig};
use crate::perturbation::CaptionEdit;
use crate::Result;

/// Marker stored in the type field of reconstruction records.
pub const NO_PERTURBATION: &str = "none";

/// Outcome of one injection fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCandidate {
    pub f: f64,
    pub gates: Vec<GateResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_cosine: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SweepCandidate {
    pub fn passed(&self) -> bool {
        self.error.is_none() && !self.gates.is_empty() && self.gates.iter().all(|g| g.passed)
    }
}

/// Index of the largest `f` among candidates passing every gate.
pub fn select_largest_passing(candidates: &[SweepCandidate]) -> Option<usize> {
    candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.passed())
        .max_by(|(_, a), (_, b)| a.f.total_cmp(&b.f))
        .map(|(i, _)| i)
}

/// Index of the failing candidate with the highest directional cosine;
/// ties go to the larger `f`.
pub fn best_failure(candidates: &[SweepCandidate]) -> Option<usize> {
    candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.error.is_none())
        .max_by(|(_, a), (_, b)| {
            let sa = a.phi_cosine.unwrap_or(f64::NEG_INFINITY);
            let sb = b.phi_cosine.unwrap_or(f64::NEG_INFINITY);
            sa.total_cmp(&sb).then(a.f.total_cmp(&b.f))
        })
        .map(|(i, _)| i)
}

/// Everything produced by one sweep, including the chosen image.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub candidates: Vec<SweepCandidate>,
    /// Index of the kept candidate: the selection if any passed, else the
    /// best failure.
    pub kept: Option<usize>,
    pub accepted: bool,
    pub image: Option<Image>,
    pub embeddings: Option<PairEmbeddings>,
}

impl SweepOutcome {
    pub fn kept_candidate(&self) -> Option<&SweepCandidate> {
        self.kept.map(|i| &self.candidates[i])
    }
}

/// Gates one candidate image.
pub fn image_gates(emb: &PairEmbeddings, config: &PipelineConfig) -> Vec<GateResult> {
    let mut gates = vec![image_quality_from(emb, config.tau_image), caption_consistency_from(emb)];
    if let Some(t) = config.image_similarity_threshold {
        gates.push(image_similarity_from(emb, t));
    }
    gates
}

/// Runs the edit for each `f` in the sweep and applies the image gates.
/// A backend failure at one `f` skips that candidate.
#[allow(clippy::too_many_arguments)]
pub fn sweep_edit(
    inversion: &InversionResult,
    source_image: &Image,
    caption: &str,
    edit: &CaptionEdit,
    config: &PipelineConfig,
    diffusion: &dyn DiffusionBackend,
    joint: &dyn JointEmbedBackend,
) -> Result<SweepOutcome> {
    let source = diffusion.embed_prompt(caption)?;
    let target = diffusion.embed_prompt(&edit.edited_caption)?;
    let mut candidates = Vec::with_capacity(config.f_sweep.len());
    let mut produced: Vec<Option<(Image, PairEmbeddings)>> = Vec::with_capacity(config.f_sweep.len());
    for &f in &config.f_sweep {
        let control = AttentionControl {
            self_replace: f,
            cross_replace: config.cross_replace_steps,
            guidance_scale: config.guidance_scale,
        };
        let attempt = diffusion
            .edit_with_attention_control(inversion, &source, &target, &control)
            .and_then(|img| {
                let emb = PairEmbeddings::compute(source_image, &img, caption, &edit.edited_caption, joint)?;
                Ok((img, emb))
            });
        match attempt {
            Ok((img, emb)) => {
                let gates = image_gates(&emb, config);
                let phi = gates.iter().find(|g| g.gate == IMAGE_QUALITY).and_then(|g| g.score);
                candidates.push(SweepCandidate {
                    f,
                    gates,
                    phi_cosine: phi,
                    error: None,
                });
                produced.push(Some((img, emb)));
            }
            Err(e) => {
                log::warn!("edit {} failed at f={f}: {e}", edit.id);
                candidates.push(SweepCandidate {
                    f,
                    gates: Vec::new(),
                    phi_cosine: None,
                    error: Some(e.to_string()),
                });
                produced.push(None);
            }
        }
    }
    let selected = select_largest_passing(&candidates);
    let kept = selected.or_else(|| best_failure(&candidates));
    let (image, embeddings) = match kept.and_then(|i| produced[i].take()) {
        Some((img, emb)) => (Some(img), Some(emb)),
        None => (None, None),
    };
    Ok(SweepOutcome {
        candidates,
        kept,
        accepted: selected.is_some(),
        image,
        embeddings,
    })
}

/// A generated counterfactual, or a rejected edit kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRecord {
    pub id: String,
    pub sample_id: String,
    pub edit_ref: String,
    pub perturbation_type: PerturbationType,
    pub label_id: usize,
    pub label_text: String,
    pub caption: String,
    pub edited_caption: String,
    pub original_span: String,
    pub edited_span: String,
    /// Relative to the output directory; absent when no candidate rendered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_selected: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_cosine: Option<f64>,
    /// Caption gates followed by the kept candidate's image gates.
    pub gates: Vec<GateResult>,
    pub candidates: Vec<SweepCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PairEmbeddings>,
    pub accepted: bool,
}

impl CounterfactualRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn from_sweep(
        id: impl Into<String>,
        edit: &CaptionEdit,
        label_id: usize,
        label_text: &str,
        caption: &str,
        outcome: &SweepOutcome,
        image_path: Option<String>,
    ) -> Self {
        let kept = outcome.kept_candidate();
        let mut gates = edit.gates.clone();
        if let Some(c) = kept {
            gates.extend(c.gates.iter().cloned());
        }
        Self {
            id: id.into(),
            sample_id: edit.sample_id.clone(),
            edit_ref: edit.id.clone(),
            perturbation_type: edit.perturbation_type,
            label_id,
            label_text: label_text.to_string(),
            caption: caption.to_string(),
            edited_caption: edit.edited_caption.clone(),
            original_span: edit.original_span.text.clone(),
            edited_span: edit.edited_span.text.clone(),
            image_path,
            f_selected: if outcome.accepted { kept.map(|c| c.f) } else { None },
            phi_cosine: kept.and_then(|c| c.phi_cosine),
            gates,
            candidates: outcome.candidates.clone(),
            embeddings: outcome.embeddings.clone(),
            accepted: outcome.accepted,
        }
    }

    /// Re-evaluates the stored image gates from the stored embeddings.
    pub fn revalidate(&self, config: &PipelineConfig) -> Option<bool> {
        let emb = self.embeddings.as_ref()?;
        let fresh = image_gates(emb, config);
        let stored: Vec<&GateResult> = self
            .gates
            .iter()
            .filter(|g| fresh.iter().any(|f| f.gate == g.gate))
            .collect();
        Some(
            stored.len() == fresh.len()
                && stored
                    .iter()
                    .zip(&fresh)
                    .all(|(s, f)| s.passed == f.passed && s.score == f.score),
        )
    }
}

/// Control image: the inversion regenerated with the source prompt as
/// both source and target, so nothing is edited.
pub fn reconstruct(
    inversion: &InversionResult,
    source: &Conditioning,
    config: &PipelineConfig,
    diffusion: &dyn DiffusionBackend,
) -> Result<Image> {
    let control = AttentionControl {
        self_replace: 1.0,
        cross_replace: 1.0,
        guidance_scale: config.guidance_scale,
    };
    diffusion.edit_with_attention_control(inversion, source, source, &control)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionRecord {
    pub id: String,
    pub sample_id: String,
    pub label_id: usize,
    pub label_text: String,
    /// Always [`NO_PERTURBATION`].
    pub perturbation_type: String,
    pub image_path: String,
    pub inversion_ref: String,
    /// Sum of the per-step null-text reconstruction errors.
    pub inversion_error: f64,
}
