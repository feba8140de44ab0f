//! Captions for test samples, produced by the captioner backend.

use serde::{Deserialize, Serialize};

use crate::backends::{load_image, CaptionerBackend, Image};
use crate::model::{DecodeConfig, TestSample};
use crate::text::word_count;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub id: String,
    pub sample_id: String,
    pub text: String,
    pub decode_meta: DecodeConfig,
    pub word_count: usize,
    /// Set when the caption is shorter than `decode_meta.min_words`.
    /// Short captions are kept.
    pub below_minimum: bool,
}

impl Caption {
    pub fn new(id: impl Into<String>, sample_id: impl Into<String>, text: String, decode: &DecodeConfig) -> Result<Self> {
        let text = text.trim().to_string();
        if text.is_empty() {
            return Err(Error::backend("captioner", "empty caption"));
        }
        let n = word_count(&text);
        Ok(Self {
            id: id.into(),
            sample_id: sample_id.into(),
            text,
            decode_meta: decode.clone(),
            word_count: n,
            below_minimum: is_below_minimum(n, decode.min_words),
        })
    }
}

pub fn is_below_minimum(word_count: usize, min_words: usize) -> bool {
    word_count < min_words
}

/// Captions an already loaded image.
pub fn caption_image(
    id: impl Into<String>,
    sample_id: impl Into<String>,
    image: &Image,
    decode: &DecodeConfig,
    backend: &dyn CaptionerBackend,
) -> Result<Caption> {
    let text = backend.caption(image, decode)?;
    Caption::new(id, sample_id, text, decode)
}

/// Loads the sample's image and captions it.
pub fn generate_caption(
    id: impl Into<String>,
    sample: &TestSample,
    decode: &DecodeConfig,
    backend: &dyn CaptionerBackend,
) -> Result<Caption> {
    let image = load_image(&sample.image_path)?;
    caption_image(id, sample.id.clone(), &image, decode, backend)
}
