//! Caption-level semantic filters and image-level edit checks.
//!
//! Every gate returns a [`GateResult`] holding its score and threshold so
//! each decision can be re-derived offline. Gates fail closed: a backend
//! error or degenerate input yields `passed = false` with a note.

use serde::{Deserialize, Serialize};

use crate::backends::{Image, JointEmbedBackend, SentenceEmbedBackend};
use crate::perturbation::CaptionEdit;
use crate::vecops::{cosine, sub};
use crate::{Error, Result};

pub const LABEL_SIMILARITY: &str = "label_similarity";
pub const SPAN_SIMILARITY: &str = "span_similarity";
pub const IMAGE_QUALITY: &str = "image_quality";
pub const CAPTION_CONSISTENCY: &str = "caption_consistency";
pub const IMAGE_SIMILARITY: &str = "image_similarity";

/// How a gate compares its score with its threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// `score < threshold`
    Below,
    /// `score >= threshold`
    AtLeast,
    /// `score > threshold`
    Above,
}

impl Comparison {
    pub fn holds(self, score: f64, threshold: f64) -> bool {
        match self {
            Comparison::Below => score < threshold,
            Comparison::AtLeast => score >= threshold,
            Comparison::Above => score > threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub gate: String,
    pub passed: bool,
    /// `None` when the score could not be computed.
    pub score: Option<f64>,
    pub threshold: f64,
    pub comparison: Comparison,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl GateResult {
    pub fn evaluate(gate: &str, score: f64, threshold: f64, comparison: Comparison) -> Self {
        Self {
            gate: gate.to_string(),
            passed: score.is_finite() && comparison.holds(score, threshold),
            score: Some(score),
            threshold,
            comparison,
            note: None,
        }
    }

    pub fn failed(gate: &str, threshold: f64, comparison: Comparison, note: impl Into<String>) -> Self {
        Self {
            gate: gate.to_string(),
            passed: false,
            score: None,
            threshold,
            comparison,
            note: Some(note.into()),
        }
    }

    fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    /// Re-applies the comparison to the stored score and threshold.
    pub fn recheck(&self) -> bool {
        match self.score {
            Some(s) => s.is_finite() && self.comparison.holds(s, self.threshold),
            None => false,
        }
    }
}

fn cos_checked(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "embedding widths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    cosine(a, b).ok_or(Error::DegenerateDirection("zero-norm embedding"))
}

fn fail_closed(gate: &str, threshold: f64, cmp: Comparison, f: impl FnOnce() -> Result<GateResult>) -> GateResult {
    f().unwrap_or_else(|e| GateResult::failed(gate, threshold, cmp, e.to_string()))
}

/// Text checked against the label for one changed region: the inserted or
/// substituted words, or for a pure deletion the removed words.
fn label_probe(region: &crate::text::ChangedRegion) -> &str {
    if region.edited.is_empty() {
        &region.original.text
    } else {
        &region.edited.text
    }
}

/// Rejects edits whose changed words are close to the class label:
/// passes when every region's `cos(embed(span), embed(label)) < epsilon`.
/// The reported score is the largest region similarity.
pub fn gate_label_similarity(
    edit: &CaptionEdit,
    label_text: &str,
    epsilon: f64,
    emb: &dyn SentenceEmbedBackend,
) -> GateResult {
    fail_closed(LABEL_SIMILARITY, epsilon, Comparison::Below, || {
        let label = emb.embed(label_text)?;
        let mut worst = f64::NEG_INFINITY;
        for region in &edit.regions {
            let v = emb.embed(label_probe(region))?;
            worst = worst.max(cos_checked(&v, &label)?);
        }
        if edit.regions.is_empty() {
            return Err(Error::NoEdit);
        }
        let mut g = GateResult::evaluate(LABEL_SIMILARITY, worst, epsilon, Comparison::Below);
        if edit.multi_span {
            g = g.with_note(format!("max over {} regions", edit.regions.len()));
        }
        Ok(g)
    })
}

/// Rejects near-synonym substitutions: passes when every region with both
/// sides non-empty has `cos(original, edited) < epsilon_span`. Pure
/// insertions and deletions score -1, the minimum cosine.
pub fn gate_span_similarity(
    edit: &CaptionEdit,
    epsilon_span: f64,
    emb: &dyn SentenceEmbedBackend,
) -> GateResult {
    fail_closed(SPAN_SIMILARITY, epsilon_span, Comparison::Below, || {
        let mut worst: Option<f64> = None;
        for region in &edit.regions {
            if region.original.is_empty() || region.edited.is_empty() {
                continue;
            }
            let a = emb.embed(&region.original.text)?;
            let b = emb.embed(&region.edited.text)?;
            let c = cos_checked(&a, &b)?;
            worst = Some(worst.map_or(c, |w: f64| w.max(c)));
        }
        Ok(match worst {
            Some(s) => GateResult::evaluate(SPAN_SIMILARITY, s, epsilon_span, Comparison::Below),
            None => GateResult::evaluate(SPAN_SIMILARITY, -1.0, epsilon_span, Comparison::Below)
                .with_note("insertion or deletion only"),
        })
    })
}

/// `cos(E_I(x') - E_I(x), E_T(c') - E_T(c))`.
pub fn directional_similarity(
    x_emb: &[f64],
    x_edit_emb: &[f64],
    c_emb: &[f64],
    c_edit_emb: &[f64],
) -> Result<f64> {
    if x_emb.len() != x_edit_emb.len() || c_emb.len() != c_edit_emb.len() || x_emb.len() != c_emb.len() {
        return Err(Error::Dimension("directional similarity needs equal widths".into()));
    }
    let di = sub(x_edit_emb, x_emb);
    let dt = sub(c_edit_emb, c_emb);
    if di.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateDirection("image embeddings are identical"));
    }
    if dt.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateDirection("text embeddings are identical"));
    }
    cosine(&di, &dt).ok_or(Error::DegenerateDirection("zero difference vector"))
}

/// The distance form `1 - cos` of the directional criterion, for audit.
pub fn directional_distance(cosine: f64) -> f64 {
    1.0 - cosine
}

/// Joint-space embeddings of one source/edit pair, stored with the
/// record so gate decisions can be recomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEmbeddings {
    pub image: Vec<f64>,
    pub edited_image: Vec<f64>,
    pub caption: Vec<f64>,
    pub edited_caption: Vec<f64>,
}

impl PairEmbeddings {
    pub fn compute(
        x: &Image,
        x_edit: &Image,
        c: &str,
        c_edit: &str,
        joint: &dyn JointEmbedBackend,
    ) -> Result<Self> {
        Ok(Self {
            image: joint.embed_image(x)?,
            edited_image: joint.embed_image(x_edit)?,
            caption: joint.embed_text(c)?,
            edited_caption: joint.embed_text(c_edit)?,
        })
    }
}

/// Passes when the directional cosine is at least `tau`.
pub fn image_quality_from(emb: &PairEmbeddings, tau: f64) -> GateResult {
    match directional_similarity(&emb.image, &emb.edited_image, &emb.caption, &emb.edited_caption) {
        Ok(s) => GateResult::evaluate(IMAGE_QUALITY, s, tau, Comparison::AtLeast)
            .with_note(format!("distance form {:.6}", directional_distance(s))),
        Err(e) => GateResult::failed(IMAGE_QUALITY, tau, Comparison::AtLeast, e.to_string()),
    }
}

/// Passes when the edited image is closer to the edited caption than to
/// the original one: `cos(x', c') - cos(x', c) > 0`.
pub fn caption_consistency_from(emb: &PairEmbeddings) -> GateResult {
    fail_closed(CAPTION_CONSISTENCY, 0.0, Comparison::Above, || {
        let to_edit = cos_checked(&emb.edited_image, &emb.edited_caption)?;
        let to_orig = cos_checked(&emb.edited_image, &emb.caption)?;
        Ok(GateResult::evaluate(CAPTION_CONSISTENCY, to_edit - to_orig, 0.0, Comparison::Above))
    })
}

/// Optional: passes when `cos(E_I(x), E_I(x')) >= threshold`.
pub fn image_similarity_from(emb: &PairEmbeddings, threshold: f64) -> GateResult {
    fail_closed(IMAGE_SIMILARITY, threshold, Comparison::AtLeast, || {
        let s = cos_checked(&emb.image, &emb.edited_image)?;
        Ok(GateResult::evaluate(IMAGE_SIMILARITY, s, threshold, Comparison::AtLeast))
    })
}

pub fn gate_image_quality(
    x: &Image,
    x_edit: &Image,
    c: &str,
    c_edit: &str,
    tau: f64,
    joint: &dyn JointEmbedBackend,
) -> GateResult {
    match PairEmbeddings::compute(x, x_edit, c, c_edit, joint) {
        Ok(emb) => image_quality_from(&emb, tau),
        Err(e) => GateResult::failed(IMAGE_QUALITY, tau, Comparison::AtLeast, e.to_string()),
    }
}

pub fn gate_caption_consistency(
    x_edit: &Image,
    c: &str,
    c_edit: &str,
    joint: &dyn JointEmbedBackend,
) -> GateResult {
    fail_closed(CAPTION_CONSISTENCY, 0.0, Comparison::Above, || {
        let img = joint.embed_image(x_edit)?;
        let to_edit = cos_checked(&img, &joint.embed_text(c_edit)?)?;
        let to_orig = cos_checked(&img, &joint.embed_text(c)?)?;
        Ok(GateResult::evaluate(CAPTION_CONSISTENCY, to_edit - to_orig, 0.0, Comparison::Above))
    })
}

pub fn gate_image_similarity(
    x: &Image,
    x_edit: &Image,
    threshold: f64,
    joint: &dyn JointEmbedBackend,
) -> GateResult {
    fail_closed(IMAGE_SIMILARITY, threshold, Comparison::AtLeast, || {
        let s = cos_checked(&joint.embed_image(x)?, &joint.embed_image(x_edit)?)?;
        Ok(GateResult::evaluate(IMAGE_SIMILARITY, s, threshold, Comparison::AtLeast))
    })
}

/// One stored decision that does not match its own score and threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditFinding {
    pub record_id: String,
    pub gate: String,
    pub stored: bool,
    pub recomputed: bool,
}

/// Re-derives every gate decision from its stored score.
pub fn audit<'a>(records: impl IntoIterator<Item = (&'a str, &'a [GateResult])>) -> (usize, Vec<AuditFinding>) {
    let mut checked = 0;
    let mut findings = Vec::new();
    for (id, gates) in records {
        for g in gates {
            checked += 1;
            let recomputed = g.recheck();
            if recomputed != g.passed {
                findings.push(AuditFinding {
                    record_id: id.to_string(),
                    gate: g.gate.clone(),
                    stored: g.passed,
                    recomputed,
                });
            }
        }
    }
    (checked, findings)
}
